// Serial vs OpenMP kernels, and a baseline vs conformal-weighted training step.

#include <benchmark/benchmark.h>

#include <vector>

#include "citl/kernels.hpp"
#include "citl/net.hpp"
#include "citl/rng.hpp"
#include "citl/trainer.hpp"

namespace {

using citl::kernels::Exec;

struct Fixture {
    citl::NetParams params;
    std::vector<double> inputs;
    std::vector<std::size_t> labels;
    std::size_t batch;

    explicit Fixture(std::size_t b) : params(citl::NetParams::he_uniform({12, 64, 64, 10}, 7)), batch(b) {
        citl::Rng rng(11);
        inputs.resize(b * 12);
        for (auto& v : inputs) v = rng.normal();
        for (std::size_t i = 0; i < b; ++i) labels.push_back(rng.index(10));
    }
};

void BM_Forward(benchmark::State& st, Exec exec) {
    Fixture f(static_cast<std::size_t>(st.range(0)));
    citl::kernels::Activations acts;
    for (auto _ : st) {
        citl::kernels::forward_batch(f.params, f.inputs, f.batch, acts, exec);
        benchmark::DoNotOptimize(acts.acts.back().data());
    }
}

void BM_Backward(benchmark::State& st, Exec exec) {
    Fixture f(static_cast<std::size_t>(st.range(0)));
    citl::kernels::Activations acts;
    citl::kernels::forward_batch(f.params, f.inputs, f.batch, acts, exec);
    std::vector<double> weights(f.batch, 1.0), losses(f.batch);
    auto grads = f.params.zeros_like();
    for (auto _ : st) {
        citl::kernels::backward_batch(f.params, acts, f.labels, weights, citl::LossKind::cross_entropy(),
                                      static_cast<double>(f.batch), grads, losses, exec);
        benchmark::ClobberMemory();
    }
}

// One optimizer step, with or without prediction-set weighting.
void BM_Step(benchmark::State& st, bool conformal) {
    const std::size_t b = 64;
    Fixture f(b);
    citl::kernels::Activations acts;
    std::vector<double> weights(b, 1.0), losses(b);
    std::vector<std::size_t> sizes(b);
    auto grads = f.params.zeros_like();
    auto adam = citl::AdamState::for_params(f.params);
    citl::AdamConfig cfg;
    citl::CalibratedQuantile q;
    q.q_hat = 0.8;
    q.alpha = 0.1;
    q.n = 1000;
    for (auto _ : st) {
        citl::kernels::forward_batch(f.params, f.inputs, b, acts, Exec::kParallel);
        if (conformal) {
            citl::kernels::prediction_set_sizes(acts.acts.back(), 10, q, citl::ApsSetRule::kThreshold, sizes,
                                                Exec::kParallel);
            citl::conformal_weights(sizes, citl::WeightingMode::kBatchMeanNormalized, weights);
        }
        citl::kernels::backward_batch(f.params, acts, f.labels, weights, citl::LossKind::cross_entropy(),
                                      static_cast<double>(b), grads, losses, Exec::kParallel);
        citl::adam_step(f.params, grads, adam, cfg);
    }
}

}  // namespace

BENCHMARK_CAPTURE(BM_Forward, serial, Exec::kSerial)->Arg(64)->Arg(512);
BENCHMARK_CAPTURE(BM_Forward, parallel, Exec::kParallel)->Arg(64)->Arg(512);
BENCHMARK_CAPTURE(BM_Backward, serial, Exec::kSerial)->Arg(64)->Arg(512);
BENCHMARK_CAPTURE(BM_Backward, parallel, Exec::kParallel)->Arg(64)->Arg(512);
BENCHMARK_CAPTURE(BM_Step, baseline, false);
BENCHMARK_CAPTURE(BM_Step, conformal, true);

BENCHMARK_MAIN();
