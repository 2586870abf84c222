#include "citl/net.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "citl/errors.hpp"
#include "citl/kernels.hpp"
#include "citl/rng.hpp"

namespace citl {

NetParams::NetParams(std::vector<std::size_t> layer_sizes) : sizes_(std::move(layer_sizes)) {
    if (sizes_.size() < 2) throw ConfigError("network needs at least an input and an output layer");
    for (std::size_t s : sizes_) {
        if (s == 0) throw ConfigError("layer sizes must be positive");
    }
    if (sizes_.back() < 2) throw ConfigError("classifier needs at least 2 classes");
    layers_.resize(sizes_.size() - 1);
    for (std::size_t i = 0; i + 1 < sizes_.size(); ++i) {
        auto& l = layers_[i];
        l.in = sizes_[i];
        l.out = sizes_[i + 1];
        l.weights.assign(l.in * l.out, 0.0);
        l.bias.assign(l.out, 0.0);
    }
}

NetParams NetParams::he_uniform(std::vector<std::size_t> layer_sizes, std::uint64_t seed) {
    NetParams params(std::move(layer_sizes));
    Rng rng(derive_seed(seed, 0x4E4554));
    for (auto& l : params.layers_) {
        const double bound = std::sqrt(6.0 / static_cast<double>(l.in));
        for (double& w : l.weights) w = rng.uniform(-bound, bound);
    }
    return params;
}

std::size_t NetParams::num_parameters() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weights.size() + l.bias.size();
    return n;
}

bool NetParams::all_finite() const noexcept {
    bool ok = true;
    for_each([&](double v) { ok = ok && std::isfinite(v); });
    return ok;
}

void NetParams::set_zero() noexcept {
    for_each([](double& v) { v = 0.0; });
}

std::vector<double> NetParams::flatten() const {
    std::vector<double> out;
    out.reserve(num_parameters());
    for_each([&](double v) { out.push_back(v); });
    return out;
}

void NetParams::assign_flat(std::span<const double> values) {
    if (values.size() != num_parameters()) throw DomainError("flat parameter vector has the wrong length");
    std::size_t i = 0;
    for_each([&](double& v) { v = values[i++]; });
}

LossKind LossKind::focal(double gamma) {
    if (!std::isfinite(gamma) || gamma < 0.0) throw ConfigError("focal gamma must be finite and >= 0");
    return {Kind::kFocal, gamma};
}

double cross_entropy_loss(std::span<const double> p, std::size_t label) {
    return focal_loss(p, label, 0.0);
}

double focal_loss(std::span<const double> p, std::size_t label, double gamma) {
    if (label >= p.size()) throw DomainError("label out of range");
    if (gamma < 0.0) throw DomainError("focal gamma must be >= 0");
    const double pt = p[label];
    const double log_p = std::log(std::max(pt, kLogFloor));
    if (gamma == 0.0) return -log_p;
    return -std::pow(1.0 - pt, gamma) * log_p;
}

double example_loss(const LossKind& loss, std::span<const double> p, std::size_t label) {
    return focal_loss(p, label, loss.focusing());
}

double loss_derivative_wrt_true_prob(double p_true, double gamma) {
    const bool floored = p_true < kLogFloor;
    const double log_p = std::log(std::max(p_true, kLogFloor));
    const double dlog = floored ? 0.0 : 1.0 / p_true;
    if (gamma == 0.0) return -dlog;
    const double one_minus = 1.0 - p_true;
    // d/dp (1-p)^gamma = -gamma (1-p)^(gamma-1); its product with ln p vanishes at p = 1.
    const double focus_term = one_minus > 0.0 ? gamma * std::pow(one_minus, gamma - 1.0) * log_p : 0.0;
    return focus_term - std::pow(one_minus, gamma) * dlog;
}

void softmax_inplace(std::span<double> logits) {
    const double peak = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double& z : logits) {
        z = std::exp(z - peak);
        sum += z;
    }
    for (double& z : logits) z /= sum;
}

std::vector<double> forward(const NetParams& params, std::span<const double> x) {
    if (x.size() != params.input_dim()) {
        throw DomainError("input has " + std::to_string(x.size()) + " features, network expects " +
                          std::to_string(params.input_dim()));
    }
    kernels::Activations acts;
    kernels::serial::forward_batch(params, x, 1, acts);
    std::vector<double> probs(acts.acts.back().begin(), acts.acts.back().end());
    for (double v : probs) {
        if (!std::isfinite(v)) throw NumericError("non-finite activation in forward pass");
    }
    return probs;
}

BatchGradOutput weighted_batch_backward(const NetParams& params, std::span<const BatchExample> batch,
                                        std::span<const double> weights, const LossKind& loss,
                                        double normalizer) {
    if (weights.size() != batch.size()) throw DomainError("one weight per example required");
    const std::size_t dim = params.input_dim();
    std::vector<double> inputs;
    inputs.reserve(batch.size() * dim);
    std::vector<std::size_t> labels;
    labels.reserve(batch.size());
    for (const auto& ex : batch) {
        if (ex.x.size() != dim) throw DomainError("batch example has the wrong feature count");
        if (ex.label >= params.num_classes()) throw DomainError("batch label out of range");
        inputs.insert(inputs.end(), ex.x.begin(), ex.x.end());
        labels.push_back(ex.label);
    }

    kernels::Activations acts;
    kernels::serial::forward_batch(params, inputs, batch.size(), acts);
    BatchGradOutput out;
    out.losses.assign(batch.size(), 0.0);
    out.grads = params.zeros_like();
    kernels::serial::backward_batch(params, acts, labels, weights, loss, normalizer, out.grads, out.losses);
    out.probs = std::move(acts.acts.back());
    return out;
}

void adam_step(NetParams& params, const NetParams& grads, AdamState& state, const AdamConfig& config) {
    if (!params.same_shape(grads) || !params.same_shape(state.m) || !params.same_shape(state.v)) {
        throw DomainError("adam: parameter, gradient and moment shapes differ");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(config.beta1, t);
    const double correction2 = 1.0 - std::pow(config.beta2, t);
    const double decay = config.lr * config.weight_decay;

    for (std::size_t li = 0; li < params.num_layers(); ++li) {
        auto update = [&](std::vector<double>& theta, const std::vector<double>& g, std::vector<double>& m,
                          std::vector<double>& v) {
            for (std::size_t i = 0; i < theta.size(); ++i) {
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
                const double m_hat = m[i] / correction1;
                const double v_hat = v[i] / correction2;
                const double next = theta[i] - decay * theta[i] - config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
                if (!std::isfinite(next)) throw NumericError("adam produced a non-finite parameter");
                theta[i] = next;
            }
        };
        auto& p = params.layer(li);
        auto& m = state.m.layer(li);
        auto& v = state.v.layer(li);
        const auto& g = grads.layer(li);
        update(p.weights, g.weights, m.weights, v.weights);
        update(p.bias, g.bias, m.bias, v.bias);
    }
}

void save_checkpoint(const NetParams& params, std::ostream& out) {
    out << "citl-net " << kCheckpointVersion << '\n' << "sizes";
    for (std::size_t s : params.layer_sizes()) out << ' ' << s;
    out << '\n' << std::setprecision(17);
    for (const auto& l : params.layers()) {
        for (std::size_t r = 0; r < l.out; ++r) {
            for (std::size_t c = 0; c < l.in; ++c) out << (c ? " " : "") << l.weights[r * l.in + c];
            out << '\n';
        }
        for (std::size_t r = 0; r < l.out; ++r) out << (r ? " " : "") << l.bias[r];
        out << '\n';
    }
}

NetParams load_checkpoint(std::istream& in) {
    std::string magic;
    int version = 0;
    if (!(in >> magic >> version) || magic != "citl-net") throw ConfigError("not a citl-net checkpoint");
    if (version != kCheckpointVersion) {
        throw ConfigError("unsupported checkpoint version " + std::to_string(version));
    }
    std::string line;
    std::getline(in, line);
    if (!std::getline(in, line)) throw ConfigError("checkpoint truncated before sizes");
    std::istringstream sizes_line(line);
    std::string tag;
    sizes_line >> tag;
    if (tag != "sizes") throw ConfigError("checkpoint missing sizes line");
    std::vector<std::size_t> sizes;
    for (std::size_t s; sizes_line >> s;) sizes.push_back(s);
    NetParams params(std::move(sizes));
    params.for_each([&](double& v) {
        if (!(in >> v)) throw ConfigError("checkpoint truncated in parameter values");
    });
    return params;
}

void save_checkpoint(const NetParams& params, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open " + path + " for writing");
    save_checkpoint(params, out);
}

NetParams load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open checkpoint " + path);
    return load_checkpoint(in);
}

}  // namespace citl
