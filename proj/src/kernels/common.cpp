#include <algorithm>
#include <cmath>

#include "citl/errors.hpp"
#include "citl/kernels.hpp"

namespace citl::kernels {

namespace detail {

void resize_activations(const NetParams& params, std::size_t batch, Activations& out) {
    const auto& sizes = params.layer_sizes();
    out.batch = batch;
    out.acts.resize(sizes.size());
    for (std::size_t l = 0; l < sizes.size(); ++l) out.acts[l].resize(batch * sizes[l]);
}

void forward_example(const NetParams& params, std::span<const double> x,
                     std::span<std::vector<double>> acts, std::size_t index) {
    const std::size_t layers = params.num_layers();
    std::copy(x.begin(), x.end(), acts[0].begin() + static_cast<std::ptrdiff_t>(index * x.size()));
    for (std::size_t l = 0; l < layers; ++l) {
        const DenseLayer& layer = params.layer(l);
        const double* in = acts[l].data() + index * layer.in;
        double* out = acts[l + 1].data() + index * layer.out;
        for (std::size_t o = 0; o < layer.out; ++o) {
            const double* w = layer.weights.data() + o * layer.in;
            double z = layer.bias[o];
            for (std::size_t k = 0; k < layer.in; ++k) z += w[k] * in[k];
            out[o] = (l + 1 < layers) ? std::max(z, 0.0) : z;
        }
        if (l + 1 == layers) softmax_inplace(std::span<double>(out, layer.out));
    }
}

double backward_example(const NetParams& params, const Activations& acts, std::size_t index,
                        std::size_t label, double weight, const LossKind& loss, NetParams& grads,
                        std::vector<double>& delta, std::vector<double>& delta_prev) {
    const std::size_t layers = params.num_layers();
    const std::size_t classes = params.num_classes();
    const double* p = acts.acts.back().data() + index * classes;
    const double gamma = loss.focusing();
    const double pt = p[label];
    const double value = focal_loss(std::span<const double>(p, classes), label, gamma);
    if (!std::isfinite(value)) {
        throw NumericError("non-finite loss", -1, -1, static_cast<long>(index));
    }
    if (weight == 0.0) return value;

    delta.resize(classes);
    if (gamma == 0.0 && pt >= kLogFloor) {
        for (std::size_t j = 0; j < classes; ++j) delta[j] = weight * (p[j] - (j == label ? 1.0 : 0.0));
    } else {
        const double scale = weight * loss_derivative_wrt_true_prob(pt, gamma) * pt;
        for (std::size_t j = 0; j < classes; ++j) delta[j] = scale * ((j == label ? 1.0 : 0.0) - p[j]);
    }

    for (std::size_t l = layers; l-- > 0;) {
        const DenseLayer& layer = params.layer(l);
        DenseLayer& g = grads.layer(l);
        const double* a = acts.acts[l].data() + index * layer.in;
        for (std::size_t o = 0; o < layer.out; ++o) {
            const double d = delta[o];
            double* gw = g.weights.data() + o * layer.in;
            for (std::size_t k = 0; k < layer.in; ++k) gw[k] += d * a[k];
            g.bias[o] += d;
        }
        if (l == 0) break;
        delta_prev.assign(layer.in, 0.0);
        for (std::size_t o = 0; o < layer.out; ++o) {
            const double d = delta[o];
            const double* w = layer.weights.data() + o * layer.in;
            for (std::size_t k = 0; k < layer.in; ++k) delta_prev[k] += w[k] * d;
        }
        for (std::size_t k = 0; k < layer.in; ++k) {
            if (a[k] <= 0.0) delta_prev[k] = 0.0;
        }
        std::swap(delta, delta_prev);
    }
    return value;
}

}  // namespace detail

void forward_batch(const NetParams& params, std::span<const double> inputs, std::size_t batch,
                   Activations& out, Exec exec) {
    if (exec == Exec::kSerial) {
        serial::forward_batch(params, inputs, batch, out);
    } else {
        parallel::forward_batch(params, inputs, batch, out);
    }
}

void backward_batch(const NetParams& params, const Activations& acts, std::span<const std::size_t> labels,
                    std::span<const double> weights, const LossKind& loss, double normalizer,
                    NetParams& grads, std::span<double> losses, Exec exec) {
    if (exec == Exec::kSerial) {
        serial::backward_batch(params, acts, labels, weights, loss, normalizer, grads, losses);
    } else {
        parallel::backward_batch(params, acts, labels, weights, loss, normalizer, grads, losses);
    }
}

void prediction_set_sizes(std::span<const double> probs, std::size_t classes, const CalibratedQuantile& q,
                          ApsSetRule rule, std::span<std::size_t> sizes, Exec exec) {
    if (exec == Exec::kSerial) {
        serial::prediction_set_sizes(probs, classes, q, rule, sizes);
    } else {
        parallel::prediction_set_sizes(probs, classes, q, rule, sizes);
    }
}

}  // namespace citl::kernels
