#pragma once

// Experiment harness behind the `citl` command line: dataset generation, single runs,
// alpha/noise grids, an offline conformal sidecar for probability dumps, and figure data.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "citl/conformal.hpp"
#include "citl/data.hpp"
#include "citl/trainer.hpp"
#include "json.hpp"

namespace citl::harness {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitNumericAbort = 2, kExitPartialGrid = 3 };

inline constexpr const char* kOutputRootEnv = "CITL_OUTPUT_ROOT";

// CITL_OUTPUT_ROOT if set, otherwise ./citl_out.
std::filesystem::path default_output_root();

// FNV-1a 64 over bytes, as 16 hex digits.
std::string content_hash(std::string_view bytes);
// Hash of a JSON value's canonical dump. Object keys are sorted, so field order is irrelevant.
std::string json_hash(const nlohmann::json& j);

// Writes `contents` to `path` via a temporary file and rename.
void atomic_write(const std::filesystem::path& path, std::string_view contents);

// ---- train config <-> JSON --------------------------------------------------

nlohmann::json train_config_to_json(const TrainConfig& c);
// Overlays the fields present in `j` onto `base`. Unknown fields are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

// ---- generate ---------------------------------------------------------------

struct GenerateResult {
    std::filesystem::path dataset_path;
    std::filesystem::path manifest_path;
    nlohmann::json manifest;
};

// Manifest: spec hash, dataset file name and checksum, per-split and per-class counts,
// and the downsampled classes.
GenerateResult cmd_generate(const DatasetSpec& spec, const std::filesystem::path& out_dir);

// ---- run --------------------------------------------------------------------

struct RunConfig {
    std::string dataset_path;
    TrainConfig train;
    bool baseline = false;
    std::string name;

    static RunConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    std::string hash() const;
};

struct RunRecord {
    std::string config_hash;
    std::string name;
    std::uint64_t seed = 0;
    bool baseline = false;
    double alpha = 0.0;
    std::string method;
    std::string loss;
    double noise_rate = 0.0;
    std::size_t best_epoch = 0;
    double best_val_metric = 0.0;
    double test_macro_accuracy = 0.0;
    double test_accuracy = 0.0;
    double test_miou = 0.0;
    std::vector<double> test_per_class_accuracy;
    std::vector<std::size_t> minority_classes;
    double minority_accuracy = 0.0;  // mean test recall over minority classes
    double val_macro_accuracy = 0.0; // best model on the validation remainder
    double val_miou = 0.0;
    double mean_step_seconds = 0.0;
    std::vector<double> q_hat_by_epoch;
    std::size_t epochs_run = 0;
    bool aborted = false;
    std::string abort_message;
    std::string telemetry_path;
    std::string checkpoint_path;
    std::string probability_dump_path;
    std::string record_path;

    nlohmann::json to_json() const;
    static RunRecord from_json(const nlohmann::json& j);
};

// Trains on an in-memory dataset and writes telemetry, checkpoint, validation probability
// dump and record under out_dir/<config hash>/. An empty out_dir writes nothing.
RunRecord execute_run(const RunConfig& config, const Dataset& dataset, const std::filesystem::path& out_dir);

// Loads the dataset named by the config, then execute_run. A numeric abort yields a record
// with aborted = true and an abort marker in the telemetry.
RunRecord cmd_run(const RunConfig& config, const std::filesystem::path& out_root);

// ---- grid -------------------------------------------------------------------

struct GridPlan {
    DatasetSpec dataset;  // noise_rate and seed are overridden per cell
    TrainConfig train;    // alpha, seed, loss and weighting overridden per cell
    std::vector<double> alphas;
    std::vector<double> noise_levels;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> baselines;  // any of "ce", "focal"
    bool include_method = true;
    double focal_gamma = 2.0;
    std::string metric = "macro_accuracy";  // or "miou"
    std::size_t jobs = 1;

    static GridPlan from_json(const nlohmann::json& j);
    void validate() const;
};

struct GridCell {
    double noise = 0.0;
    std::uint64_t seed = 0;
    std::string kind;  // "method", "ce" or "focal"
    double alpha = 0.0;
    bool ok = false;
    std::string error;
    double test_metric = 0.0;
    double val_metric = 0.0;
    double minority_accuracy = 0.0;
    double worst_class_accuracy = 0.0;
    double final_pruned_fraction = 0.0;
    double mean_step_seconds = 0.0;
    RunRecord record;
};

struct SummaryRow {
    double noise = 0.0;
    std::optional<double> alpha;
    std::optional<double> baseline;        // median CE metric
    std::optional<double> focal;           // median focal metric
    std::optional<double> method;          // median method metric at the best alpha
    std::optional<double> delta;           // method - baseline
    std::optional<double> baseline_minority;
    std::optional<double> method_minority;
};

struct GridResult {
    std::vector<GridCell> cells;
    std::vector<SummaryRow> summary;
    bool partial = false;
    std::filesystem::path cells_csv;
    std::filesystem::path summary_csv;
};

// Median of every (noise, kind, alpha) group over seeds; per noise level the best alpha is
// the argmax of the method median. Pure function of the cells.
std::vector<SummaryRow> summarize_grid(const std::vector<GridCell>& cells, const GridPlan& plan);

// Runs every cell (up to plan.jobs concurrently) and writes cells.csv and summary.csv when
// out_dir is non-empty. Failed cells are recorded and the summary covers the rest.
GridResult cmd_grid(const GridPlan& plan, const std::filesystem::path& out_dir);

void write_cells_csv(const std::vector<GridCell>& cells, std::ostream& out);
void write_summary_csv(const std::vector<SummaryRow>& rows, const GridPlan& plan, std::ostream& out);

// ---- probability dumps and sidecar ------------------------------------------

// Dump format (text, version 1):
//   citl-probs 1 classes=<C> method=<lac|aps> count=<N>
//   then N lines: p_0,p_1,...,p_{C-1},label
inline constexpr int kDumpVersion = 1;

struct ProbabilityDump {
    std::size_t classes = 0;
    ScoreMethod method = ScoreMethod::kLac;
    std::vector<std::vector<double>> probs;
    std::vector<std::size_t> labels;
    std::vector<std::size_t> rows;  // source row of each entry; empty means 0..N-1
};

void write_probability_dump(const ProbabilityDump& dump, std::ostream& out);
void write_probability_dump(const ProbabilityDump& dump, const std::filesystem::path& path);

struct DumpRejection {
    std::size_t row = 0;  // 0-based data row
    std::string reason;
};

// Parses a dump. Rows failing the probability-vector check are collected in `rejected`
// rather than thrown; structural errors (bad header, wrong column count) throw ConfigError.
ProbabilityDump read_probability_dump(std::istream& in, std::vector<DumpRejection>& rejected);
ProbabilityDump read_probability_dump(const std::filesystem::path& path, std::vector<DumpRejection>& rejected);

ProbabilityDump dump_model_outputs(const NetParams& params, std::span<const LabeledExample> examples,
                                   ScoreMethod method);

struct SidecarOptions {
    double alpha = 0.1;
    std::optional<ScoreMethod> method;  // defaults to the dump header's method
    double calibration_fraction = 0.2;
    ApsSetRule aps_rule = ApsSetRule::kThreshold;
};

struct SidecarReport {
    CalibratedQuantile quantile;
    std::size_t calibration_size = 0;
    std::vector<std::size_t> rows;    // dump row index of each scored remainder row
    std::vector<PredictionSet> sets;  // one per remainder row, in dump order
    std::vector<std::size_t> weights; // |P| per remainder row
    std::vector<std::size_t> pruned;  // dump row indices with an empty set
    double coverage = 0.0;
    CoverageBand band{0.0, 0.0};
    bool within_band = false;
    double uncertainty_fraction = 0.0;
    double pruned_fraction = 0.0;
    std::vector<DumpRejection> rejected;

    nlohmann::json to_json() const;
};

// The first ⌈fraction * rows⌉ valid rows fit the quantile; the rest receive sets.
SidecarReport run_sidecar(const ProbabilityDump& dump, const SidecarOptions& options);
SidecarReport cmd_sidecar(const std::filesystem::path& dump_path, const SidecarOptions& options);

// ---- report -----------------------------------------------------------------

// Figure data files written by cmd_report, with their CSV headers.
struct FigureFile {
    std::string name;
    std::string header;
};
const std::vector<FigureFile>& figure_files();

// Reads run records (and their telemetry) and writes the figure CSVs into out_dir.
std::vector<std::filesystem::path> cmd_report(const std::vector<std::filesystem::path>& record_paths,
                                              const std::filesystem::path& out_dir);

}  // namespace citl::harness
