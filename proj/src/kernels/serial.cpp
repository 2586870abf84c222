// Reference implementations. Kept deliberately plain: one example at a time, in order.

#include "citl/errors.hpp"
#include "citl/kernels.hpp"

namespace citl::kernels::serial {

void forward_batch(const NetParams& params, std::span<const double> inputs, std::size_t batch, Activations& out) {
    const std::size_t dim = params.input_dim();
    if (inputs.size() != batch * dim) throw DomainError("forward_batch: input size does not match batch");
    detail::resize_activations(params, batch, out);
    for (std::size_t i = 0; i < batch; ++i) {
        detail::forward_example(params, inputs.subspan(i * dim, dim), out.acts, i);
    }
}

void backward_batch(const NetParams& params, const Activations& acts, std::span<const std::size_t> labels,
                    std::span<const double> weights, const LossKind& loss, double normalizer,
                    NetParams& grads, std::span<double> losses) {
    if (labels.size() != acts.batch || weights.size() != acts.batch || losses.size() != acts.batch) {
        throw DomainError("backward_batch: labels, weights and losses must match the batch");
    }
    if (!grads.same_shape(params)) grads = params.zeros_like();
    grads.set_zero();
    std::vector<double> delta;
    std::vector<double> delta_prev;
    for (std::size_t i = 0; i < acts.batch; ++i) {
        losses[i] = detail::backward_example(params, acts, i, labels[i], weights[i], loss, grads, delta, delta_prev);
    }
    grads.for_each([&](double& g) { g /= normalizer; });
}

void prediction_set_sizes(std::span<const double> probs, std::size_t classes, const CalibratedQuantile& q,
                          ApsSetRule rule, std::span<std::size_t> sizes) {
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        sizes[i] = prediction_set_size(probs.subspan(i * classes, classes), q, rule);
    }
}

}  // namespace citl::kernels::serial
