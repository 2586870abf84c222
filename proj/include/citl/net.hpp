#pragma once

// Feed-forward ReLU classifier with softmax output and hand-derived gradients.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace citl {

struct DenseLayer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::vector<double> weights;  // out x in, row-major
    std::vector<double> bias;     // out

    friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Parameters of an MLP with layer sizes {input, hidden..., classes}.
///
/// Gradients and optimizer moments reuse this type, since they share its shape.
class NetParams {
public:
    NetParams() = default;

    // Zero-initialized parameters. Needs at least {input, classes}.
    explicit NetParams(std::vector<std::size_t> layer_sizes);

    // He-style uniform init, U(-sqrt(6/fan_in), sqrt(6/fan_in)) weights and zero biases.
    static NetParams he_uniform(std::vector<std::size_t> layer_sizes, std::uint64_t seed);

    const std::vector<std::size_t>& layer_sizes() const noexcept { return sizes_; }
    std::size_t input_dim() const noexcept { return sizes_.front(); }
    std::size_t num_classes() const noexcept { return sizes_.back(); }
    std::size_t num_layers() const noexcept { return layers_.size(); }
    std::size_t num_parameters() const noexcept;

    DenseLayer& layer(std::size_t i) { return layers_[i]; }
    const DenseLayer& layer(std::size_t i) const { return layers_[i]; }
    std::span<DenseLayer> layers() noexcept { return layers_; }
    std::span<const DenseLayer> layers() const noexcept { return layers_; }

    bool same_shape(const NetParams& other) const noexcept { return sizes_ == other.sizes_; }
    bool all_finite() const noexcept;

    NetParams zeros_like() const { return NetParams(sizes_); }
    void set_zero() noexcept;

    // Visits every scalar in a fixed order: layer by layer, weights then bias.
    template <class F>
    void for_each(F&& f) {
        for (auto& l : layers_) {
            for (double& w : l.weights) f(w);
            for (double& b : l.bias) f(b);
        }
    }
    template <class F>
    void for_each(F&& f) const {
        for (const auto& l : layers_) {
            for (double w : l.weights) f(w);
            for (double b : l.bias) f(b);
        }
    }

    std::vector<double> flatten() const;
    void assign_flat(std::span<const double> values);

    friend bool operator==(const NetParams&, const NetParams&) = default;

private:
    std::vector<std::size_t> sizes_;
    std::vector<DenseLayer> layers_;
};

struct LossKind {
    enum class Kind { kCrossEntropy, kFocal };

    Kind kind = Kind::kCrossEntropy;
    double gamma = 0.0;

    static LossKind cross_entropy() { return {Kind::kCrossEntropy, 0.0}; }
    static LossKind focal(double gamma);

    // Effective focusing parameter (0 for cross-entropy).
    double focusing() const noexcept { return kind == Kind::kFocal ? gamma : 0.0; }
};

inline constexpr double kLogFloor = 1e-12;

double cross_entropy_loss(std::span<const double> p, std::size_t label);

// -(1 - p_y)^gamma * ln(max(p_y, kLogFloor)).
double focal_loss(std::span<const double> p, std::size_t label, double gamma);

double example_loss(const LossKind& loss, std::span<const double> p, std::size_t label);

// d loss / d p_y for the floored focal expression.
double loss_derivative_wrt_true_prob(double p_true, double gamma);

void softmax_inplace(std::span<double> logits);

std::vector<double> forward(const NetParams& params, std::span<const double> x);

struct BatchExample {
    std::span<const double> x;
    std::size_t label = 0;
};

struct BatchGradOutput {
    std::vector<double> losses;  // per example, unweighted
    std::vector<double> probs;   // batch x classes, row-major
    NetParams grads;             // sum_i w_i * grad L_i / normalizer
};

// Forward + backward through a batch. The normalizer divides the weighted loss sum.
BatchGradOutput weighted_batch_backward(const NetParams& params, std::span<const BatchExample> batch,
                                        std::span<const double> weights, const LossKind& loss,
                                        double normalizer);

struct AdamConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled: theta -= lr * weight_decay * theta
};

struct AdamState {
    NetParams m;
    NetParams v;
    std::uint64_t step = 0;

    static AdamState for_params(const NetParams& params) {
        return {params.zeros_like(), params.zeros_like(), 0};
    }
};

void adam_step(NetParams& params, const NetParams& grads, AdamState& state, const AdamConfig& config);

// Checkpoint format, version 1 (text):
//   citl-net 1
//   sizes <L+1 integers>
//   then per layer: `out` lines of `in` weights, then one line of `out` biases
// Values are printed with 17 significant digits so a load reproduces every bit.
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const NetParams& params, std::ostream& out);
NetParams load_checkpoint(std::istream& in);
void save_checkpoint(const NetParams& params, const std::string& path);
NetParams load_checkpoint(const std::string& path);

}  // namespace citl
