#include "citl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "citl/errors.hpp"
#include "citl/metrics.hpp"
#include "citl/rng.hpp"

namespace citl {
namespace {

constexpr std::uint64_t kShuffleStream = 0x5348554646;
constexpr std::uint64_t kInitStream = 0x494E4954;

std::size_t argmax(std::span<const double> p) {
    return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

void gather(std::span<const LabeledExample> examples, std::span<const std::size_t> idx, std::size_t begin,
            std::size_t end, std::vector<double>& inputs, std::vector<std::size_t>& labels) {
    inputs.clear();
    labels.clear();
    for (std::size_t i = begin; i < end; ++i) {
        const auto& ex = examples[idx.empty() ? i : idx[i]];
        inputs.insert(inputs.end(), ex.x.begin(), ex.x.end());
        labels.push_back(ex.y);
    }
}

bool improves_selection(SelectionRule rule, const TrainerState& state, double metric) {
    if (!state.has_best) return true;
    return rule == SelectionRule::kMinValLoss ? metric < state.best_metric : metric > state.best_metric;
}

double selection_metric(SelectionRule rule, const ValidationResult& v) {
    switch (rule) {
        case SelectionRule::kMaxValAccuracy: return v.macro_accuracy;
        case SelectionRule::kMaxValMiou: return v.miou;
        case SelectionRule::kMinValLoss: return v.loss;
    }
    return v.loss;
}

}  // namespace

std::string_view to_string(WeightingMode m) noexcept {
    return m == WeightingMode::kBatchMeanNormalized ? "batch_mean_normalized" : "unnormalized";
}

std::string_view to_string(SelectionRule r) noexcept {
    switch (r) {
        case SelectionRule::kMaxValAccuracy: return "max_val_accuracy";
        case SelectionRule::kMaxValMiou: return "max_val_miou";
        case SelectionRule::kMinValLoss: return "min_val_loss";
    }
    return "unknown";
}

WeightingMode parse_weighting_mode(std::string_view s) {
    if (s == "batch_mean_normalized" || s == "normalized") return WeightingMode::kBatchMeanNormalized;
    if (s == "unnormalized") return WeightingMode::kUnnormalized;
    throw ConfigError("unknown weighting mode '" + std::string(s) + "'");
}

SelectionRule parse_selection_rule(std::string_view s) {
    if (s == "max_val_accuracy") return SelectionRule::kMaxValAccuracy;
    if (s == "max_val_miou") return SelectionRule::kMaxValMiou;
    if (s == "min_val_loss") return SelectionRule::kMinValLoss;
    throw ConfigError("unknown selection rule '" + std::string(s) + "'");
}

TrainConfig TrainConfig::citl(double alpha, std::uint64_t seed) {
    TrainConfig c;
    c.alpha = alpha;
    c.seed = seed;
    return c;
}

TrainConfig TrainConfig::baseline(LossKind loss, std::uint64_t seed) {
    TrainConfig c;
    c.loss = loss;
    c.seed = seed;
    c.conformal_weighting = false;
    c.selection = SelectionRule::kMinValLoss;
    return c;
}

void TrainConfig::validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("train config field 'alpha': must lie in (0, 1)");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train config field 'lr': must be positive");
    if (weight_decay_factor < 0.0) throw ConfigError("train config field 'weight_decay_factor': must be >= 0");
    if (batch_size == 0) throw ConfigError("train config field 'batch_size': must be positive");
    if (max_epochs == 0) throw ConfigError("train config field 'max_epochs': must be positive");
    if (!(plateau.factor > 0.0 && plateau.factor < 1.0)) {
        throw ConfigError("train config field 'plateau.factor': must lie in (0, 1)");
    }
    if (!(calibration_fraction > 0.0 && calibration_fraction < 1.0)) {
        throw ConfigError("train config field 'calibration_fraction': must lie in (0, 1)");
    }
    if (loss.kind == LossKind::Kind::kFocal && !(loss.gamma >= 0.0 && std::isfinite(loss.gamma))) {
        throw ConfigError("train config field 'gamma': must be finite and >= 0");
    }
    for (std::size_t h : hidden) {
        if (h == 0) throw ConfigError("train config field 'hidden': layer widths must be positive");
    }
}

TrainerState TrainerState::initial(const TrainConfig& config, std::size_t input_dim, std::size_t num_classes) {
    std::vector<std::size_t> sizes{input_dim};
    sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
    sizes.push_back(num_classes);
    TrainerState s;
    s.params = NetParams::he_uniform(sizes, derive_seed(config.seed, kInitStream));
    s.adam = AdamState::for_params(s.params);
    s.lr = config.lr;
    return s;
}

std::size_t calibration_prefix_size(double fraction, std::size_t n) {
    return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
}

bool conformal_weights(std::span<const std::size_t> set_sizes, WeightingMode mode, std::span<double> weights) {
    double total = 0.0;
    for (std::size_t i = 0; i < set_sizes.size(); ++i) {
        weights[i] = static_cast<double>(set_sizes[i]);
        total += weights[i];
    }
    if (mode == WeightingMode::kUnnormalized) return true;
    if (total == 0.0) return false;
    const double mean = total / static_cast<double>(set_sizes.size());
    for (double& w : weights) w /= mean;
    return true;
}

TrainEpochStats train_epoch(TrainerState& state, std::span<const LabeledExample> train, const TrainConfig& config,
                            TelemetrySink* sink) {
    using Clock = std::chrono::steady_clock;
    if (train.empty()) throw ConfigError("training split is empty");
    const std::size_t classes = state.params.num_classes();
    const std::size_t epoch_index = state.epoch + 1;

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(derive_seed(config.seed, kShuffleStream), epoch_index));
    rng.shuffle(std::span<std::size_t>(order));

    const bool weighted = config.conformal_weighting && state.calibrator.has_value();
    const AdamConfig adam{state.lr, 0.9, 0.999, 1e-8, config.weight_decay()};

    TrainEpochStats stats;
    stats.examples = train.size();
    std::vector<double> weight_sum(classes, 0.0);
    std::vector<std::size_t> survivors(classes, 0), class_total(classes, 0), class_pruned(classes, 0);
    std::size_t pruned = 0, uncertain = 0, noisy = 0, noisy_pruned = 0;
    double loss_sum = 0.0, seconds_sum = 0.0;

    kernels::Activations acts;
    NetParams grads = state.params.zeros_like();
    std::vector<double> inputs, weights, losses;
    std::vector<std::size_t> labels, sizes;

    for (std::size_t begin = 0, batch_index = 0; begin < train.size(); begin += config.batch_size, ++batch_index) {
        const std::size_t end = std::min(train.size(), begin + config.batch_size);
        const std::size_t n = end - begin;
        gather(train, order, begin, end, inputs, labels);
        weights.assign(n, 1.0);
        losses.assign(n, 0.0);
        sizes.assign(n, 1);

        const auto t0 = Clock::now();
        kernels::forward_batch(state.params, inputs, n, acts, config.exec);
        bool take_step = true;
        if (weighted) {
            kernels::prediction_set_sizes(acts.acts.back(), classes, *state.calibrator, config.aps_rule, sizes,
                                          config.exec);
            take_step = conformal_weights(sizes, config.weighting, weights);
        }
        if (take_step) {
            try {
                kernels::backward_batch(state.params, acts, labels, weights, config.loss, static_cast<double>(n),
                                        grads, losses, config.exec);
                adam_step(state.params, grads, state.adam, adam);
            } catch (const NumericError& e) {
                const long example = e.example() >= 0 ? static_cast<long>(begin) + e.example() : -1;
                throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch_index) + ", batch " +
                                       std::to_string(batch_index),
                                   static_cast<long>(epoch_index), static_cast<long>(batch_index), example);
            }
            ++state.global_step;
        } else {
            for (std::size_t i = 0; i < n; ++i) losses[i] = cross_entropy_loss(acts.probs(i, classes), labels[i]);
            ++stats.skipped_batches;
        }
        const double seconds = std::chrono::duration<double>(Clock::now() - t0).count();

        std::size_t batch_pruned = 0, batch_uncertain = 0, size_sum = 0;
        double batch_loss = 0.0, applied = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& ex = train[order[begin + i]];
            const std::size_t s = sizes[i];
            ++class_total[ex.y];
            size_sum += s;
            applied += take_step ? weights[i] : 0.0;
            batch_loss += losses[i];
            if (s == 0) {
                ++batch_pruned;
                ++class_pruned[ex.y];
            } else {
                weight_sum[ex.y] += static_cast<double>(s);
                ++survivors[ex.y];
            }
            if (s > 1) ++batch_uncertain;
            if (ex.is_noisy) {
                ++noisy;
                if (s == 0) ++noisy_pruned;
            }
        }
        pruned += batch_pruned;
        uncertain += batch_uncertain;
        loss_sum += batch_loss;
        seconds_sum += seconds;
        ++stats.steps;

        StepTelemetry step;
        step.epoch = epoch_index;
        step.step = state.global_step + stats.skipped_batches;
        step.batch_size = n;
        if (state.calibrator) step.q_hat = state.calibrator->q_hat;
        step.pruned_fraction = static_cast<double>(batch_pruned) / static_cast<double>(n);
        step.uncertainty_fraction = static_cast<double>(batch_uncertain) / static_cast<double>(n);
        step.mean_set_size = static_cast<double>(size_sum) / static_cast<double>(n);
        step.mean_applied_weight = applied / static_cast<double>(n);
        step.skipped = !take_step;
        step.step_seconds = seconds;
        step.lr = state.lr;
        step.loss = batch_loss / static_cast<double>(n);
        if (sink) sink->on_step(step);
        if (config.record_steps) stats.steps_telemetry.push_back(step);
    }

    const auto total = static_cast<double>(train.size());
    stats.mean_loss = loss_sum / total;
    stats.pruned_fraction = static_cast<double>(pruned) / total;
    stats.uncertainty_fraction = static_cast<double>(uncertain) / total;
    stats.pruned_noisy_fraction = noisy ? static_cast<double>(noisy_pruned) / static_cast<double>(noisy) : 0.0;
    stats.mean_step_seconds = seconds_sum / static_cast<double>(stats.steps);
    stats.per_class_mean_weight.assign(classes, std::numeric_limits<double>::quiet_NaN());
    stats.per_class_pruned_fraction.assign(classes, std::numeric_limits<double>::quiet_NaN());
    std::vector<double> present;
    for (std::size_t c = 0; c < classes; ++c) {
        if (survivors[c] > 0) {
            stats.per_class_mean_weight[c] = weight_sum[c] / static_cast<double>(survivors[c]);
            present.push_back(stats.per_class_mean_weight[c]);
        }
        if (class_total[c] > 0) {
            stats.per_class_pruned_fraction[c] =
                static_cast<double>(class_pruned[c]) / static_cast<double>(class_total[c]);
        }
    }
    stats.weight_range = present.empty() ? 0.0 : weight_range(present);
    state.epoch = epoch_index;
    return stats;
}

ValidationResult validate_epoch(TrainerState& state, std::span<const LabeledExample> stream,
                                std::size_t calibration_size, const TrainConfig& config) {
    if (calibration_size == 0 || calibration_size >= stream.size()) {
        throw ConfigError("calibration prefix must hold at least one example and leave a remainder; got " +
                          std::to_string(calibration_size) + " of " + std::to_string(stream.size()));
    }
    const std::size_t classes = state.params.num_classes();
    StreamingCalibrator calibrator(config.method);
    std::optional<CalibratedQuantile> fitted;

    std::vector<std::size_t> predicted, labels_scored;
    std::vector<PredictionSet> sets;
    std::size_t covered = 0, uncertain = 0, pruned = 0, size_sum = 0;
    double loss_sum = 0.0;

    kernels::Activations acts;
    std::vector<double> inputs;
    std::vector<std::size_t> labels;
    const std::span<const std::size_t> no_index;
    for (std::size_t begin = 0; begin < stream.size(); begin += config.batch_size) {
        const std::size_t end = std::min(stream.size(), begin + config.batch_size);
        gather(stream, no_index, begin, end, inputs, labels);
        kernels::forward_batch(state.params, inputs, end - begin, acts, config.exec);
        for (std::size_t i = 0; i < end - begin; ++i) {
            const std::size_t idx = begin + i;
            const auto p = acts.probs(i, classes);
            if (idx < calibration_size) {
                calibrator.add(p, labels[i]);
                continue;
            }
            if (!fitted) fitted = calibrator.fit(config.alpha);
            const std::size_t size = prediction_set_size(p, *fitted, config.aps_rule);
            const PredictionSet set = predict_set(p, *fitted, config.aps_rule);
            covered += set.contains(labels[i]) ? 1 : 0;
            uncertain += size > 1 ? 1 : 0;
            pruned += size == 0 ? 1 : 0;
            size_sum += size;
            const double loss = cross_entropy_loss(p, labels[i]);
            if (!std::isfinite(loss)) throw NumericError("non-finite validation loss", static_cast<long>(state.epoch));
            loss_sum += loss;
            predicted.push_back(argmax(p));
            labels_scored.push_back(labels[i]);
        }
    }

    ValidationResult r;
    r.calibrator = *fitted;
    r.calibration_size = calibration_size;
    r.scored = predicted.size();
    const auto n = static_cast<double>(r.scored);
    r.loss = loss_sum / n;
    const auto counts = ConfusionCounts::from_predictions(predicted, labels_scored, classes);
    r.macro_accuracy = macro_accuracy(counts);
    r.accuracy = plain_accuracy(predicted, labels_scored);
    r.miou = miou(counts).value;
    r.coverage = static_cast<double>(covered) / n;
    r.uncertainty_fraction = static_cast<double>(uncertain) / n;
    r.pruned_fraction = static_cast<double>(pruned) / n;
    r.mean_set_size = static_cast<double>(size_sum) / n;
    state.calibrator = r.calibrator;
    return r;
}

bool update_schedules(TrainerState& state, double val_loss, const TrainConfig& config) {
    if (!state.has_val_loss) {
        state.has_val_loss = true;
        state.best_val_loss = val_loss;
        state.plateau_ref = val_loss;
        return false;
    }
    if (val_loss < state.plateau_ref * (1.0 - config.plateau.threshold)) {
        state.plateau_ref = val_loss;
        state.plateau_bad_epochs = 0;
    } else if (++state.plateau_bad_epochs >= config.plateau.patience) {
        const double next = std::max(state.lr * config.plateau.factor, config.plateau.min_lr);
        if (next < state.lr) {
            state.lr = next;
            ++state.lr_reductions;
        }
        state.plateau_bad_epochs = 0;
    }
    if (val_loss < state.best_val_loss) {
        state.best_val_loss = val_loss;
        state.early_stop_bad_epochs = 0;
        return false;
    }
    return ++state.early_stop_bad_epochs >= config.early_stop_patience;
}

TrainingResult run_training(const TrainConfig& config, const Dataset& dataset, TelemetrySink* sink) {
    config.validate();
    if (dataset.train.empty()) throw ConfigError("dataset has no training examples");
    const std::vector<LabeledExample> stream = dataset.validation_stream();
    if (stream.size() < 2) throw ConfigError("dataset has no usable validation split");
    const std::size_t prefix = dataset.calibration.empty()
                                   ? calibration_prefix_size(config.calibration_fraction, stream.size())
                                   : dataset.calibration.size();

    TrainerState state = TrainerState::initial(config, dataset.feature_dim(), dataset.num_classes());
    TrainingResult result;
    for (std::size_t e = 1; e <= config.max_epochs; ++e) {
        const ValidationResult v = validate_epoch(state, stream, prefix, config);
        const double metric = selection_metric(config.selection, v);
        if (improves_selection(config.selection, state, metric)) {
            state.best_params = state.params;
            state.best_metric = metric;
            state.best_epoch = e;
            state.has_best = true;
        }
        const bool stop = update_schedules(state, v.loss, config);

        EpochTelemetry rec;
        rec.epoch = e;
        rec.q_hat = v.calibrator.q_hat;
        rec.calibration_n = v.calibration_size;
        rec.val_loss = v.loss;
        rec.val_macro_accuracy = v.macro_accuracy;
        rec.val_accuracy = v.accuracy;
        rec.val_miou = v.miou;
        rec.val_coverage = v.coverage;
        rec.val_uncertainty_fraction = v.uncertainty_fraction;
        rec.val_pruned_fraction = v.pruned_fraction;
        rec.lr = state.lr;
        if (stop) {
            rec.trained = false;
            result.stopped_early = true;
            if (sink) sink->on_epoch(rec);
            result.epochs.push_back(std::move(rec));
            break;
        }

        TrainEpochStats t = train_epoch(state, dataset.train, config, sink);
        rec.per_class_mean_weight = std::move(t.per_class_mean_weight);
        rec.per_class_pruned_fraction = std::move(t.per_class_pruned_fraction);
        rec.weight_range = t.weight_range;
        rec.pruned_fraction = t.pruned_fraction;
        rec.uncertainty_fraction = t.uncertainty_fraction;
        rec.pruned_noisy_fraction = t.pruned_noisy_fraction;
        rec.train_loss = t.mean_loss;
        rec.skipped_batches = t.skipped_batches;
        rec.mean_step_seconds = t.mean_step_seconds;
        if (sink) sink->on_epoch(rec);
        result.epochs.push_back(std::move(rec));
        for (auto& s : t.steps_telemetry) result.steps.push_back(std::move(s));
    }
    result.best_params = state.has_best ? state.best_params : state.params;
    result.final_params = state.params;
    result.best_epoch = state.best_epoch;
    result.best_metric = state.best_metric;
    result.lr_reductions = state.lr_reductions;
    return result;
}

TrainingResult run_baseline(TrainConfig config, const Dataset& dataset, TelemetrySink* sink) {
    config.conformal_weighting = false;
    config.selection = SelectionRule::kMinValLoss;
    return run_training(config, dataset, sink);
}

EvalResult evaluate(const NetParams& params, std::span<const LabeledExample> examples, kernels::Exec exec) {
    if (examples.empty()) throw ConfigError("cannot evaluate on an empty split");
    const std::size_t classes = params.num_classes();
    EvalResult r;
    std::vector<std::size_t> labels;
    std::vector<double> inputs;
    std::vector<std::size_t> batch_labels;
    kernels::Activations acts;
    double loss_sum = 0.0;
    const std::span<const std::size_t> no_index;
    constexpr std::size_t kChunk = 256;
    for (std::size_t begin = 0; begin < examples.size(); begin += kChunk) {
        const std::size_t end = std::min(examples.size(), begin + kChunk);
        gather(examples, no_index, begin, end, inputs, batch_labels);
        kernels::forward_batch(params, inputs, end - begin, acts, exec);
        for (std::size_t i = 0; i < end - begin; ++i) {
            const auto p = acts.probs(i, classes);
            r.predicted.push_back(argmax(p));
            loss_sum += cross_entropy_loss(p, batch_labels[i]);
            labels.push_back(batch_labels[i]);
        }
    }
    const auto counts = ConfusionCounts::from_predictions(r.predicted, labels, classes);
    r.macro_accuracy = macro_accuracy(counts);
    r.accuracy = plain_accuracy(r.predicted, labels);
    r.miou = miou(counts).value;
    r.loss = loss_sum / static_cast<double>(examples.size());
    r.per_class_accuracy = per_class_recall(counts);
    return r;
}

}  // namespace citl
