#pragma once

// Batch kernels behind the training loop.
//
// Each kernel has a serial reference implementation and an OpenMP one. The parallel
// backward pass reduces per-example gradients in fixed blocks of kReductionBlock
// examples, summed in block order, so its result does not depend on the thread count.
// It differs from the serial reference only by floating-point summation order.

#include <cstddef>
#include <span>
#include <vector>

#include "citl/conformal.hpp"
#include "citl/net.hpp"

namespace citl::kernels {

enum class Exec { kSerial, kParallel };

inline constexpr std::size_t kReductionBlock = 16;

// Post-activation values of every layer for one batch. acts[0] is the input,
// acts.back() the softmax output.
struct Activations {
    std::size_t batch = 0;
    std::vector<std::vector<double>> acts;

    std::span<const double> probs(std::size_t i, std::size_t classes) const {
        return std::span<const double>(acts.back()).subspan(i * classes, classes);
    }
};

// inputs: batch x input_dim, row-major.
void forward_batch(const NetParams& params, std::span<const double> inputs, std::size_t batch,
                   Activations& out, Exec exec = Exec::kParallel);

// Writes sum_i weights[i] * grad L_i / normalizer into grads and the unweighted
// per-example losses into losses. Examples with zero weight are skipped outright.
// Throws NumericError (with the example index) on a non-finite loss.
void backward_batch(const NetParams& params, const Activations& acts, std::span<const std::size_t> labels,
                    std::span<const double> weights, const LossKind& loss, double normalizer,
                    NetParams& grads, std::span<double> losses, Exec exec = Exec::kParallel);

// Conformal set size for every row of a batch x classes probability matrix.
void prediction_set_sizes(std::span<const double> probs, std::size_t classes, const CalibratedQuantile& q,
                          ApsSetRule rule, std::span<std::size_t> sizes, Exec exec = Exec::kParallel);

namespace serial {
void forward_batch(const NetParams& params, std::span<const double> inputs, std::size_t batch, Activations& out);
void backward_batch(const NetParams& params, const Activations& acts, std::span<const std::size_t> labels,
                    std::span<const double> weights, const LossKind& loss, double normalizer,
                    NetParams& grads, std::span<double> losses);
void prediction_set_sizes(std::span<const double> probs, std::size_t classes, const CalibratedQuantile& q,
                          ApsSetRule rule, std::span<std::size_t> sizes);
}  // namespace serial

namespace parallel {
void forward_batch(const NetParams& params, std::span<const double> inputs, std::size_t batch, Activations& out);
void backward_batch(const NetParams& params, const Activations& acts, std::span<const std::size_t> labels,
                    std::span<const double> weights, const LossKind& loss, double normalizer,
                    NetParams& grads, std::span<double> losses);
void prediction_set_sizes(std::span<const double> probs, std::size_t classes, const CalibratedQuantile& q,
                          ApsSetRule rule, std::span<std::size_t> sizes);
}  // namespace parallel

namespace detail {

// Single-example pieces shared by both implementations.
void forward_example(const NetParams& params, std::span<const double> x,
                     std::span<std::vector<double>> acts, std::size_t index);

// Accumulates weight * grad L into grads and returns the unweighted loss. Scratch must hold
// two buffers of at least the widest layer.
double backward_example(const NetParams& params, const Activations& acts, std::size_t index,
                        std::size_t label, double weight, const LossKind& loss, NetParams& grads,
                        std::vector<double>& delta, std::vector<double>& delta_prev);

void resize_activations(const NetParams& params, std::size_t batch, Activations& out);

}  // namespace detail

}  // namespace citl::kernels
