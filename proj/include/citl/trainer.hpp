#pragma once

// Conformal-in-the-loop training: each example's loss is multiplied by the size of its
// conformal prediction set, so uncertain examples are up-weighted and examples with an
// empty set are dropped for that step. The conformal threshold is refit on a calibration
// prefix at the start of every validation pass.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "citl/conformal.hpp"
#include "citl/data.hpp"
#include "citl/kernels.hpp"
#include "citl/net.hpp"

namespace citl {

enum class WeightingMode { kBatchMeanNormalized, kUnnormalized };
enum class SelectionRule { kMaxValAccuracy, kMaxValMiou, kMinValLoss };

std::string_view to_string(WeightingMode m) noexcept;
std::string_view to_string(SelectionRule r) noexcept;
WeightingMode parse_weighting_mode(std::string_view s);
SelectionRule parse_selection_rule(std::string_view s);

struct PlateauConfig {
    double factor = 0.2;
    std::size_t patience = 10;
    double min_lr = 1e-6;
    double threshold = 1e-4;  // relative improvement that resets the counter
};

struct TrainConfig {
    double alpha = 0.1;
    ScoreMethod method = ScoreMethod::kLac;
    ApsSetRule aps_rule = ApsSetRule::kThreshold;
    LossKind loss = LossKind::cross_entropy();
    WeightingMode weighting = WeightingMode::kBatchMeanNormalized;
    bool conformal_weighting = true;  // false: every weight is 1 (baseline)

    double lr = 5e-4;
    double weight_decay_factor = 0.1;  // decay coefficient = factor * initial lr
    PlateauConfig plateau;
    std::size_t early_stop_patience = 20;
    std::size_t batch_size = 64;
    std::size_t max_epochs = 100;
    std::uint64_t seed = 0;
    SelectionRule selection = SelectionRule::kMaxValAccuracy;
    std::vector<std::size_t> hidden = {64, 64};
    double calibration_fraction = 0.2;  // used when a dataset has no calibration split
    kernels::Exec exec = kernels::Exec::kParallel;
    bool record_steps = true;

    // CitL defaults: conformal weighting, max validation accuracy selection.
    static TrainConfig citl(double alpha, std::uint64_t seed);
    // Baseline defaults: unit weights, min validation loss selection.
    static TrainConfig baseline(LossKind loss, std::uint64_t seed);

    void validate() const;
    double weight_decay() const noexcept { return weight_decay_factor * lr; }
};

struct TrainerState {
    NetParams params;
    AdamState adam;
    std::optional<CalibratedQuantile> calibrator;
    std::size_t epoch = 0;        // completed training epochs
    std::size_t global_step = 0;  // optimizer steps taken
    double lr = 0.0;

    NetParams best_params;
    double best_metric = 0.0;
    std::size_t best_epoch = 0;
    bool has_best = false;

    double best_val_loss = 0.0;  // early stopping reference
    double plateau_ref = 0.0;    // plateau scheduler reference
    bool has_val_loss = false;
    std::size_t plateau_bad_epochs = 0;
    std::size_t early_stop_bad_epochs = 0;
    std::size_t lr_reductions = 0;

    static TrainerState initial(const TrainConfig& config, std::size_t input_dim, std::size_t num_classes);
};

struct StepTelemetry {
    std::size_t epoch = 0;
    std::size_t step = 0;  // global batch index, counting skipped batches
    std::size_t batch_size = 0;
    std::optional<double> q_hat;  // empty before the first calibration; +inf admits everything
    double pruned_fraction = 0.0;
    double uncertainty_fraction = 0.0;
    double mean_set_size = 0.0;
    double mean_applied_weight = 0.0;
    bool skipped = false;
    double step_seconds = 0.0;
    double lr = 0.0;
    double loss = 0.0;  // mean unweighted loss of the batch
};

struct TrainEpochStats {
    std::size_t examples = 0;
    std::size_t steps = 0;
    std::size_t skipped_batches = 0;
    double mean_loss = 0.0;
    double pruned_fraction = 0.0;
    double uncertainty_fraction = 0.0;
    double pruned_noisy_fraction = 0.0;  // diagnostic: share of noisy-labelled examples pruned
    // Mean raw set size per class over surviving (non-pruned) examples. NaN for a class
    // with no survivors.
    std::vector<double> per_class_mean_weight;
    std::vector<double> per_class_pruned_fraction;
    double weight_range = 0.0;  // over classes with survivors
    double mean_step_seconds = 0.0;
    std::vector<StepTelemetry> steps_telemetry;
};

struct ValidationResult {
    CalibratedQuantile calibrator;
    std::size_t calibration_size = 0;
    std::size_t scored = 0;
    double loss = 0.0;  // unweighted cross-entropy over the post-calibration remainder
    double macro_accuracy = 0.0;
    double accuracy = 0.0;
    double miou = 0.0;
    double coverage = 0.0;
    double uncertainty_fraction = 0.0;
    double pruned_fraction = 0.0;
    double mean_set_size = 0.0;
};

struct EpochTelemetry {
    std::size_t epoch = 0;  // 1-based
    bool trained = true;
    double q_hat = 0.0;
    std::size_t calibration_n = 0;
    std::vector<double> per_class_mean_weight;
    std::vector<double> per_class_pruned_fraction;
    double weight_range = 0.0;
    double pruned_fraction = 0.0;
    double uncertainty_fraction = 0.0;
    double pruned_noisy_fraction = 0.0;
    double train_loss = 0.0;
    std::size_t skipped_batches = 0;
    double val_loss = 0.0;
    double val_macro_accuracy = 0.0;
    double val_accuracy = 0.0;
    double val_miou = 0.0;
    double val_coverage = 0.0;
    double val_uncertainty_fraction = 0.0;
    double val_pruned_fraction = 0.0;
    double lr = 0.0;
    double mean_step_seconds = 0.0;
};

/// Receives telemetry as it is produced.
class TelemetrySink {
public:
    virtual ~TelemetrySink() = default;
    virtual void on_step(const StepTelemetry&) {}
    virtual void on_epoch(const EpochTelemetry&) {}
};

struct TrainingResult {
    NetParams best_params;
    NetParams final_params;
    std::size_t best_epoch = 0;
    double best_metric = 0.0;
    bool stopped_early = false;
    std::size_t lr_reductions = 0;
    std::vector<EpochTelemetry> epochs;
    std::vector<StepTelemetry> steps;
};

struct EvalResult {
    double macro_accuracy = 0.0;
    double accuracy = 0.0;
    double miou = 0.0;
    double loss = 0.0;
    std::vector<double> per_class_accuracy;  // recall per class
    std::vector<std::size_t> predicted;
};

// Size of the calibration prefix for a validation stream of n examples.
std::size_t calibration_prefix_size(double fraction, std::size_t n);

// Per-example conformal weights for a batch from its set sizes. Returns false when the
// batch has to be skipped (normalized mode, every set empty).
bool conformal_weights(std::span<const std::size_t> set_sizes, WeightingMode mode, std::span<double> weights);

TrainEpochStats train_epoch(TrainerState& state, std::span<const LabeledExample> train, const TrainConfig& config,
                            TelemetrySink* sink = nullptr);

// The first `calibration_size` examples of `stream` fit the calibrator; the rest are scored.
// The state adopts the fresh calibrator.
ValidationResult validate_epoch(TrainerState& state, std::span<const LabeledExample> stream,
                                std::size_t calibration_size, const TrainConfig& config);

TrainingResult run_training(const TrainConfig& config, const Dataset& dataset, TelemetrySink* sink = nullptr);

// run_training with conformal weighting disabled and min-validation-loss selection.
TrainingResult run_baseline(TrainConfig config, const Dataset& dataset, TelemetrySink* sink = nullptr);

EvalResult evaluate(const NetParams& params, std::span<const LabeledExample> examples,
                    kernels::Exec exec = kernels::Exec::kParallel);

// Learning-rate plateau scheduler and early stopping, fed one validation loss per epoch.
// Returns true when training should stop.
bool update_schedules(TrainerState& state, double val_loss, const TrainConfig& config);

}  // namespace citl
