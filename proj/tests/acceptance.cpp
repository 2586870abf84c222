// Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero on any
// failure. Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "citl/conformal.hpp"
#include "citl/data.hpp"
#include "citl/harness.hpp"
#include "citl/kernels.hpp"
#include "citl/metrics.hpp"
#include "citl/net.hpp"
#include "citl/rng.hpp"
#include "citl/trainer.hpp"

using namespace citl;
using harness::GridPlan;
using harness::cmd_grid;

namespace {

// Tolerances and budgets.
constexpr double kCoverageSlack = 0.02;
constexpr double kGradRelTol = 1e-4;
constexpr double kGradFloor = 1e-6;  // denominator floor for near-zero gradients
constexpr double kPrunedTol = 1e-9;
constexpr double kOverheadCeiling = 1.25;
constexpr double kCoverageBudget = 60.0;
constexpr double kHeadlineBudget = 900.0;
constexpr double kOverheadBudget = 120.0;

// Shared experiment setup for the training criteria.
const std::vector<double> kAlphaGrid = {0.005, 0.01, 0.02, 0.04, 0.06, 0.08, 0.10};
constexpr std::size_t kEpochs = 60;

struct Outcome {
    bool pass = false;
    std::string detail;
};

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

DatasetSpec rings_spec(double noise, std::uint64_t seed) {
    DatasetSpec s;
    s.generator = Generator::kConcentricRings;
    s.num_classes = 10;
    s.per_class_n = 600;
    s.test_per_class = 200;
    s.minority_classes = {0, 1};
    s.minority_fraction = 0.2;
    s.noise_rate = noise;
    s.seed = seed;
    return s;
}

std::vector<double> softmax_row(Rng& rng, std::size_t c, double scale) {
    std::vector<double> p(c);
    for (auto& v : p) v = scale * rng.normal();
    softmax_inplace(p);
    return p;
}

std::size_t sample(Rng& rng, const std::vector<double>& p) {
    double u = rng.uniform(), acc = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        acc += p[k];
        if (u < acc) return k;
    }
    return p.size() - 1;
}

std::vector<double> probs_of(const NetParams& params, std::span<const LabeledExample> xs) {
    std::vector<double> inputs;
    for (const auto& e : xs) inputs.insert(inputs.end(), e.x.begin(), e.x.end());
    kernels::Activations acts;
    kernels::forward_batch(params, inputs, xs.size(), acts);
    return acts.acts.back();
}

// 1. Marginal coverage on exchangeable data.
Outcome coverage() {
    const std::size_t classes = 10, n_cal = 1000, n_test = 2000, seeds = 20;
    Outcome out{true, ""};
    for (auto method : {ScoreMethod::kLac, ScoreMethod::kAps}) {
        for (double alpha : {0.05, 0.1, 0.2}) {
            std::vector<double> covs;
            for (std::uint64_t seed = 0; seed < seeds; ++seed) {
                Rng rng(derive_seed(seed, 1));
                std::vector<double> scores;
                for (std::size_t i = 0; i < n_cal; ++i) {
                    const auto p = softmax_row(rng, classes, 1.0);
                    scores.push_back(nonconformity_score(method, p, sample(rng, p)));
                }
                const auto q = fit_quantile(scores, alpha, method);
                std::size_t hit = 0;
                for (std::size_t i = 0; i < n_test; ++i) {
                    const auto p = softmax_row(rng, classes, 1.0);
                    hit += predict_set(p, q).contains(sample(rng, p));
                }
                covs.push_back(static_cast<double>(hit) / n_test);
            }
            const double m = median(covs);
            const auto band = coverage_band(alpha, n_cal);
            const bool ok = m >= band.lower - kCoverageSlack && m <= band.upper + kCoverageSlack;
            out.pass = out.pass && ok;
            out.detail += std::string(to_string(method)) + fmt("@%.2f=", alpha) + fmt("%.4f ", m);
        }
    }
    return out;
}

// 2. Quantile against a sorted order statistic.
Outcome quantile_oracle() {
    Rng rng(2);
    std::size_t mismatches = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 1 + rng.index(1000);
        const double alpha = rng.uniform(0.01, 0.5);
        std::vector<double> s(n);
        for (auto& v : s) v = rng.uniform();
        auto sorted = s;
        std::sort(sorted.begin(), sorted.end());
        const double target = static_cast<double>(n + 1) * (1.0 - alpha);
        std::size_t k = 1;
        while (static_cast<double>(k) < target - 1e-9) ++k;
        const double expect = k > n ? std::numeric_limits<double>::infinity() : sorted[k - 1];
        if (fit_quantile(s, alpha).q_hat != expect) ++mismatches;
    }
    return {mismatches == 0, std::to_string(mismatches) + " mismatches in 1000"};
}

// 3. Set semantics under random thresholds.
Outcome set_semantics() {
    Rng rng(3);
    std::size_t aps_empty = 0, lac_wrong = 0, non_monotone = 0;
    for (int t = 0; t < 100000; ++t) {
        const std::size_t c = 2 + rng.index(9);
        const auto p = softmax_row(rng, c, rng.uniform(0.1, 4.0));
        CalibratedQuantile q;
        q.q_hat = rng.uniform(-0.1, 1.1);
        CalibratedQuantile q2 = q;
        q2.q_hat += rng.uniform(0.0, 0.5);
        q.method = q2.method = ScoreMethod::kAps;
        const auto a1 = predict_set(p, q), a2 = predict_set(p, q2);
        if (a1.empty()) ++aps_empty;
        if (!a1.is_subset_of(a2)) ++non_monotone;
        q.method = q2.method = ScoreMethod::kLac;
        const auto l1 = predict_set(p, q), l2 = predict_set(p, q2);
        double min_score = 1.0;
        for (std::size_t k = 0; k < c; ++k) min_score = std::min(min_score, lac_score(p, k));
        if (l1.empty() != (min_score > q.q_hat)) ++lac_wrong;
        if (!l1.is_subset_of(l2)) ++non_monotone;
    }
    std::ostringstream d;
    d << "aps_empty=" << aps_empty << " lac_empty_mismatch=" << lac_wrong << " non_monotone=" << non_monotone;
    return {aps_empty == 0 && lac_wrong == 0 && non_monotone == 0, d.str()};
}

double batch_objective(const NetParams& p, std::span<const BatchExample> batch, std::span<const double> w,
                       const LossKind& loss, double normalizer) {
    double sum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) sum += w[i] * example_loss(loss, forward(p, batch[i].x), batch[i].label);
    return sum / normalizer;
}

// 4. Analytic gradients against central differences.
Outcome gradient_fidelity() {
    double worst = 0.0;
    std::size_t failures = 0, checked = 0;
    for (std::uint64_t net = 0; net < 50; ++net) {
        Rng rng(derive_seed(net, 4));
        const std::size_t in = 2 + rng.index(4), classes = 2 + rng.index(4);
        std::vector<std::size_t> sizes{in};
        for (std::size_t h = 0, layers = 1 + rng.index(2); h < layers; ++h) sizes.push_back(3 + rng.index(6));
        sizes.push_back(classes);
        auto params = NetParams::he_uniform(sizes, net);
        auto init = params.flatten();
        for (auto& v : init) v += 0.3 * rng.normal();
        params.assign_flat(init);
        const auto loss = net % 2 ? LossKind::focal(rng.uniform(0.5, 3.0)) : LossKind::cross_entropy();
        const std::size_t b = 1 + rng.index(6);
        std::vector<std::vector<double>> xs(b);
        std::vector<BatchExample> batch;
        std::vector<double> w;
        for (auto& x : xs) {
            for (std::size_t k = 0; k < in; ++k) x.push_back(rng.normal());
        }
        for (std::size_t i = 0; i < b; ++i) {
            batch.push_back({xs[i], rng.index(classes)});
            w.push_back(static_cast<double>(rng.index(4)));
        }
        const double norm = static_cast<double>(b);
        const auto analytic = weighted_batch_backward(params, batch, w, loss, norm).grads.flatten();
        auto flat = params.flatten();
        const double h = 1e-6;
        for (std::size_t k = 0; k < flat.size(); ++k) {
            const double orig = flat[k];
            flat[k] = orig + h;
            params.assign_flat(flat);
            const double up = batch_objective(params, batch, w, loss, norm);
            flat[k] = orig - h;
            params.assign_flat(flat);
            const double down = batch_objective(params, batch, w, loss, norm);
            flat[k] = orig;
            params.assign_flat(flat);
            const double fd = (up - down) / (2 * h);
            const double rel = std::abs(analytic[k] - fd) / std::max({std::abs(analytic[k]), std::abs(fd), kGradFloor});
            worst = std::max(worst, rel);
            ++checked;
            if (rel > kGradRelTol) ++failures;
        }
    }
    return {failures == 0, std::to_string(failures) + "/" + std::to_string(checked) + " over tolerance, worst rel " +
                               fmt("%.2e", worst)};
}

// 5. Empty-set examples contribute nothing to the gradient.
Outcome pruning_inertness() {
    double worst = 0.0;
    for (std::uint64_t t = 0; t < 200; ++t) {
        Rng rng(derive_seed(t, 5));
        auto params = NetParams::he_uniform({4, 10, 6, 5}, t);
        const std::size_t n = 2 + rng.index(80);
        std::vector<double> inputs, sub_inputs, weights, sub_weights;
        std::vector<std::size_t> labels, sub_labels, sizes(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> x(4);
            for (auto& v : x) v = rng.normal();
            inputs.insert(inputs.end(), x.begin(), x.end());
            labels.push_back(rng.index(5));
            sizes[i] = rng.bernoulli(0.3) ? 0 : 1 + rng.index(5);
        }
        weights.assign(n, 0.0);
        if (!conformal_weights(sizes, WeightingMode::kBatchMeanNormalized, weights)) continue;
        for (std::size_t i = 0; i < n; ++i) {
            if (sizes[i] == 0) continue;
            sub_inputs.insert(sub_inputs.end(), inputs.begin() + 4 * i, inputs.begin() + 4 * (i + 1));
            sub_labels.push_back(labels[i]);
            sub_weights.push_back(weights[i]);
        }
        for (auto exec : {kernels::Exec::kSerial, kernels::Exec::kParallel}) {
            kernels::Activations full, sub;
            kernels::forward_batch(params, inputs, n, full, exec);
            kernels::forward_batch(params, sub_inputs, sub_labels.size(), sub, exec);
            auto g_full = params.zeros_like(), g_sub = params.zeros_like();
            std::vector<double> l_full(n), l_sub(sub_labels.size());
            const auto loss = t % 2 ? LossKind::focal(2.0) : LossKind::cross_entropy();
            kernels::backward_batch(params, full, labels, weights, loss, double(n), g_full, l_full, exec);
            kernels::backward_batch(params, sub, sub_labels, sub_weights, loss, double(n), g_sub, l_sub, exec);
            const auto a = g_full.flatten(), b = g_sub.flatten();
            for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a[k] - b[k]));
        }
    }
    return {worst <= kPrunedTol, "max abs diff " + fmt("%.2e", worst)};
}

// 6. No calibrator, or singleton sets, is exactly the baseline step.
Outcome reduction() {
    std::size_t mismatches = 0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto d = generate(rings_spec(0.2, seed));
        auto cfg = TrainConfig::citl(0.1, seed);
        auto base_cfg = TrainConfig::baseline(LossKind::cross_entropy(), seed);
        cfg.record_steps = base_cfg.record_steps = false;
        auto base = TrainerState::initial(base_cfg, d.feature_dim(), d.num_classes());
        auto absent = TrainerState::initial(cfg, d.feature_dim(), d.num_classes());
        auto single = TrainerState::initial(cfg, d.feature_dim(), d.num_classes());
        CalibratedQuantile q;
        q.q_hat = 0.0;
        q.method = ScoreMethod::kAps;
        q.n = 1;
        single.calibrator = q;
        auto aps = cfg;
        aps.method = ScoreMethod::kAps;
        for (int e = 0; e < 3; ++e) {
            train_epoch(base, d.train, base_cfg);
            train_epoch(absent, d.train, cfg);
            const auto stats = train_epoch(single, d.train, aps);
            if (stats.uncertainty_fraction != 0.0 || stats.pruned_fraction != 0.0) ++mismatches;
            if (!(absent.params == base.params)) ++mismatches;
            if (!(single.params == base.params)) ++mismatches;
        }
    }
    return {mismatches == 0, std::to_string(mismatches) + " mismatching epochs"};
}

// 7. Best-alpha CitL beats cross-entropy at every noise level.
Outcome headline() {
    GridPlan plan;
    plan.dataset = rings_spec(0.0, 0);
    plan.train.max_epochs = kEpochs;
    plan.train.hidden = {64, 64};
    plan.alphas = kAlphaGrid;
    plan.noise_levels = {0.1, 0.2, 0.3};
    plan.seeds = {0, 1, 2, 3, 4};
    plan.baselines = {"ce"};
    const std::filesystem::path out = "acceptance_grid";
    const auto result = cmd_grid(plan, out);
    std::filesystem::remove_all(out / "runs");
    bool ok = !result.partial && result.summary.size() == plan.noise_levels.size();
    std::ostringstream d;
    for (const auto& row : result.summary) {
        const bool better = row.method && row.baseline && *row.method > *row.baseline;
        const bool minority = row.method_minority && row.baseline_minority && *row.method_minority > *row.baseline_minority;
        ok = ok && better && minority;
        d << fmt("noise %.0f%%", 100 * row.noise) << fmt(" alpha %.3f", row.alpha.value_or(-1))
          << fmt(" delta %+.4f", row.delta.value_or(NAN))
          << fmt(" minority %.4f", row.baseline_minority.value_or(NAN))
          << fmt("->%.4f; ", row.method_minority.value_or(NAN));
    }
    return {ok, d.str()};
}

// 8. Uncertainty and weight range shrink as training proceeds; q̂ only moves at calibration.
Outcome dynamics() {
    std::vector<double> u_first, u_final, wr_early, wr_final;
    std::size_t q_breaks = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto d = generate(rings_spec(0.0, seed));
        auto cfg = TrainConfig::citl(0.1, seed);
        cfg.max_epochs = kEpochs;
        const auto r = run_training(cfg, d);
        const auto& ep = r.epochs;
        const auto first = std::find_if(ep.begin(), ep.end(), [](const EpochTelemetry& e) { return e.trained && e.calibration_n > 0; });
        if (first == ep.end()) return {false, "no calibrated epoch"};
        u_first.push_back(first->uncertainty_fraction);
        u_final.push_back(ep.back().uncertainty_fraction);
        const std::size_t early = std::max<std::size_t>(1, ep.size() / 4);
        double peak = 0.0;
        for (std::size_t i = 0; i < early; ++i) peak = std::max(peak, ep[i].weight_range);
        wr_early.push_back(peak);
        wr_final.push_back(ep.back().weight_range);
        for (const auto& s : r.steps) {
            if (!s.q_hat || *s.q_hat != ep[s.epoch - 1].q_hat) ++q_breaks;
        }
    }
    const bool ok = median(u_final) < median(u_first) && median(wr_final) < median(wr_early) && q_breaks == 0;
    return {ok, "uncertainty " + fmt("%.4f", median(u_first)) + fmt("->%.4f", median(u_final)) + ", weight range " +
                    fmt("%.4f", median(wr_early)) + fmt("->%.4f", median(wr_final)) + ", q_hat breaks " +
                    std::to_string(q_breaks)};
}

// 9. Pruned fraction against alpha. Each trajectory is a CitL run on one seed; at every
// epoch the whole alpha grid is refit on the same calibration prefix and applied to the
// training split with that epoch's model.
Outcome pruning_vs_alpha() {
    const auto d = generate(rings_spec(0.2, 0));
    const auto stream = d.validation_stream();
    const std::size_t cal = d.calibration.size();
    const std::size_t classes = d.num_classes();
    std::size_t epochs = 0, violations = 0, lowest_pruned = 0;
    std::vector<double> final_fracs(kAlphaGrid.size(), 0.0);
    for (double traj_alpha : kAlphaGrid) {
        auto cfg = TrainConfig::citl(traj_alpha, 0);
        cfg.max_epochs = kEpochs;
        cfg.record_steps = false;
        auto state = TrainerState::initial(cfg, d.feature_dim(), classes);
        for (std::size_t e = 0; e < cfg.max_epochs; ++e) {
            const auto vr = validate_epoch(state, stream, cal, cfg);
            const auto cal_probs = probs_of(state.params, std::span(stream).first(cal));
            std::vector<double> scores;
            for (std::size_t i = 0; i < cal; ++i) {
                scores.push_back(lac_score(std::span(cal_probs).subspan(i * classes, classes), stream[i].y));
            }
            const auto train_probs = probs_of(state.params, d.train);
            std::vector<std::size_t> sizes(d.train.size());
            double prev = -1.0;
            for (std::size_t a = 0; a < kAlphaGrid.size(); ++a) {
                kernels::prediction_set_sizes(train_probs, classes, fit_quantile(scores, kAlphaGrid[a]),
                                              ApsSetRule::kThreshold, sizes);
                const double frac = pruned_fraction(sizes);
                if (frac < prev) ++violations;
                if (a == 0 && frac > 0.0) ++lowest_pruned;
                if (traj_alpha == kAlphaGrid.back()) final_fracs[a] = frac;
                prev = frac;
            }
            ++epochs;
            train_epoch(state, d.train, cfg);
            if (update_schedules(state, vr.loss, cfg)) break;
        }
    }
    std::ostringstream det;
    det << epochs << " epochs, " << violations << " decreases, " << lowest_pruned
        << " epochs pruning at the lowest alpha; last epoch of alpha 0.1 run:";
    for (std::size_t a = 0; a < kAlphaGrid.size(); ++a) det << fmt(" %.4f", final_fracs[a]);
    return {violations == 0 && lowest_pruned == 0, det.str()};
}

// 10. Per-step cost of the conformal step against the baseline step.
Outcome overhead() {
    const auto d = generate(rings_spec(0.2, 0));
    auto cfg = TrainConfig::citl(0.1, 0);
    auto base_cfg = TrainConfig::baseline(LossKind::cross_entropy(), 0);
    const auto stream = d.validation_stream();
    auto base = TrainerState::initial(base_cfg, d.feature_dim(), d.num_classes());
    auto method = TrainerState::initial(cfg, d.feature_dim(), d.num_classes());
    std::vector<double> t_base, t_method;
    for (int round = 0; round < 40; ++round) {
        validate_epoch(method, stream, d.calibration.size(), cfg);
        const auto b = train_epoch(base, d.train, base_cfg);
        const auto m = train_epoch(method, d.train, cfg);
        if (round < 5) continue;
        for (const auto& s : b.steps_telemetry) t_base.push_back(s.step_seconds);
        for (const auto& s : m.steps_telemetry) t_method.push_back(s.step_seconds);
    }
    const double ratio = median(t_method) / median(t_base);
    return {ratio <= kOverheadCeiling, "median step " + fmt("%.3e s", median(t_method)) + " vs " +
                                           fmt("%.3e s", median(t_base)) + ", ratio " + fmt("%.3f", ratio)};
}

// 11. Metrics against a count-from-scratch oracle.
Outcome metric_oracles() {
    Rng rng(11);
    std::size_t mismatches = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t c = 2 + rng.index(19);
        const std::size_t n = 1 + rng.index(500);
        std::vector<std::size_t> pred(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = rng.index(c);
            pred[i] = rng.bernoulli(0.6) ? y[i] : rng.index(c);
        }
        double acc_sum = 0.0, iou_sum = 0.0;
        std::size_t used = 0;
        for (std::size_t k = 0; k < c; ++k) {
            std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const bool p = pred[i] == k, l = y[i] == k;
                tp += p && l;
                tn += !p && !l;
                fp += p && !l;
                fn += !p && l;
            }
            acc_sum += static_cast<double>(tp + tn) / static_cast<double>(tp + tn + fp + fn);
            if (tp + fp + fn > 0) {
                iou_sum += static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
                ++used;
            }
        }
        const auto counts = ConfusionCounts::from_predictions(pred, y, c);
        if (macro_accuracy(counts) != acc_sum / static_cast<double>(c)) ++mismatches;
        if (miou(counts).value != iou_sum / static_cast<double>(used)) ++mismatches;
    }
    return {mismatches == 0, std::to_string(mismatches) + " mismatches in 2000 comparisons"};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
    double budget_seconds;  // 0: no runtime bound
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all = {
        {1, "coverage", coverage, kCoverageBudget},
        {2, "quantile oracle", quantile_oracle, 0},
        {3, "set semantics", set_semantics, 0},
        {4, "gradient fidelity", gradient_fidelity, 0},
        {5, "pruning inertness", pruning_inertness, 0},
        {6, "baseline reduction", reduction, 0},
        {7, "headline", headline, kHeadlineBudget},
        {8, "dynamics", dynamics, 0},
        {9, "pruning vs alpha", pruning_vs_alpha, 0},
        {10, "overhead", overhead, kOverheadBudget},
        {11, "metric oracles", metric_oracles, 0},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    int failed = 0;
    for (const auto& c : all) {
        if (!only.empty() && !only.count(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (c.budget_seconds > 0 && secs > c.budget_seconds) {
            o.pass = false;
            o.detail += " [over budget " + fmt("%.0f s]", c.budget_seconds);
        }
        std::printf("%s criterion %d (%s): %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
        std::fflush(stdout);
        failed += !o.pass;
    }
    return failed == 0 ? 0 : 1;
}
