#include <exception>
#include <mutex>

#include <omp.h>

#include "citl/errors.hpp"
#include "citl/kernels.hpp"

namespace citl::kernels::parallel {
namespace {

// Collects the first exception thrown inside a parallel region so it can be rethrown outside.
class ErrorSlot {
public:
    template <class F>
    void run(F&& f) noexcept {
        try {
            f();
        } catch (...) {
            std::lock_guard lock(mutex_);
            if (!error_) error_ = std::current_exception();
        }
    }
    void rethrow() const {
        if (error_) std::rethrow_exception(error_);
    }

private:
    std::mutex mutex_;
    std::exception_ptr error_;
};

}  // namespace

void forward_batch(const NetParams& params, std::span<const double> inputs, std::size_t batch, Activations& out) {
    const std::size_t dim = params.input_dim();
    if (inputs.size() != batch * dim) throw DomainError("forward_batch: input size does not match batch");
    detail::resize_activations(params, batch, out);
    const auto n = static_cast<std::ptrdiff_t>(batch);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const auto row = static_cast<std::size_t>(i);
        detail::forward_example(params, inputs.subspan(row * dim, dim), out.acts, row);
    }
}

void backward_batch(const NetParams& params, const Activations& acts, std::span<const std::size_t> labels,
                    std::span<const double> weights, const LossKind& loss, double normalizer,
                    NetParams& grads, std::span<double> losses) {
    if (labels.size() != acts.batch || weights.size() != acts.batch || losses.size() != acts.batch) {
        throw DomainError("backward_batch: labels, weights and losses must match the batch");
    }
    const std::size_t blocks = (acts.batch + kReductionBlock - 1) / kReductionBlock;
    thread_local std::vector<std::vector<double>> partials;
    const std::size_t nparams = params.num_parameters();
    if (partials.size() < blocks) partials.resize(blocks);

    ErrorSlot errors;
    const auto nblocks = static_cast<std::ptrdiff_t>(blocks);
    std::vector<std::vector<double>>& shared = partials;
#pragma omp parallel
    {
        NetParams local = params.zeros_like();
        std::vector<double> delta;
        std::vector<double> delta_prev;
#pragma omp for schedule(static)
        for (std::ptrdiff_t b = 0; b < nblocks; ++b) {
            errors.run([&] {
                local.set_zero();
                const std::size_t begin = static_cast<std::size_t>(b) * kReductionBlock;
                const std::size_t end = std::min(acts.batch, begin + kReductionBlock);
                for (std::size_t i = begin; i < end; ++i) {
                    losses[i] = detail::backward_example(params, acts, i, labels[i], weights[i], loss, local,
                                                         delta, delta_prev);
                }
                auto& dst = shared[static_cast<std::size_t>(b)];
                dst.resize(nparams);
                std::size_t j = 0;
                local.for_each([&](double v) { dst[j++] = v; });
            });
        }
    }
    errors.rethrow();

    std::vector<double> total(nparams, 0.0);
    const auto np = static_cast<std::ptrdiff_t>(nparams);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t j = 0; j < np; ++j) {
        double sum = 0.0;
        for (std::size_t b = 0; b < blocks; ++b) sum += shared[b][static_cast<std::size_t>(j)];
        total[static_cast<std::size_t>(j)] = sum / normalizer;
    }
    if (!grads.same_shape(params)) grads = params.zeros_like();
    grads.assign_flat(total);
}

void prediction_set_sizes(std::span<const double> probs, std::size_t classes, const CalibratedQuantile& q,
                          ApsSetRule rule, std::span<std::size_t> sizes) {
    const auto n = static_cast<std::ptrdiff_t>(sizes.size());
    ErrorSlot errors;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        errors.run([&] {
            const auto row = static_cast<std::size_t>(i);
            sizes[row] = prediction_set_size(probs.subspan(row * classes, classes), q, rule);
        });
    }
    errors.rethrow();
}

}  // namespace citl::kernels::parallel
