#include "citl/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "citl/errors.hpp"
#include "citl/metrics.hpp"
#include "citl/rng.hpp"
#include "citl/telemetry.hpp"

namespace citl::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string opt_cell(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

double median(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

template <class T>
void overlay(const json& j, const char* key, T& out, std::set<std::string>& seen) {
    seen.insert(key);
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train config field '") + key + "': " + e.what());
    }
}

double minority_mean(const std::vector<double>& per_class, const std::vector<std::size_t>& minority) {
    if (minority.empty()) return std::nan("");
    double sum = 0.0;
    for (std::size_t c : minority) sum += per_class.at(c);
    return sum / static_cast<double>(minority.size());
}

}  // namespace

fs::path default_output_root() {
    const char* env = std::getenv(kOutputRootEnv);
    return env && *env ? fs::path(env) : fs::path("citl_out");
}

std::string content_hash(std::string_view bytes) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string json_hash(const json& j) { return content_hash(j.dump()); }

void atomic_write(const fs::path& path, std::string_view contents) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ConfigError("cannot write " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw ConfigError("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

// ---- train config -----------------------------------------------------------

json train_config_to_json(const TrainConfig& c) {
    return json{{"alpha", c.alpha},
                {"method", std::string(to_string(c.method))},
                {"aps_rule", c.aps_rule == ApsSetRule::kThreshold ? "threshold" : "cumulative_crossing"},
                {"loss", c.loss.kind == LossKind::Kind::kFocal ? "focal" : "ce"},
                {"gamma", c.loss.gamma},
                {"weighting", std::string(to_string(c.weighting))},
                {"conformal_weighting", c.conformal_weighting},
                {"lr", c.lr},
                {"weight_decay_factor", c.weight_decay_factor},
                {"plateau_factor", c.plateau.factor},
                {"plateau_patience", c.plateau.patience},
                {"min_lr", c.plateau.min_lr},
                {"plateau_threshold", c.plateau.threshold},
                {"early_stop_patience", c.early_stop_patience},
                {"batch_size", c.batch_size},
                {"max_epochs", c.max_epochs},
                {"seed", c.seed},
                {"selection", std::string(to_string(c.selection))},
                {"hidden", c.hidden},
                {"calibration_fraction", c.calibration_fraction},
                {"exec", c.exec == kernels::Exec::kSerial ? "serial" : "parallel"},
                {"record_steps", c.record_steps}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    std::set<std::string> seen;
    std::string method = std::string(to_string(c.method));
    std::string aps_rule = c.aps_rule == ApsSetRule::kThreshold ? "threshold" : "cumulative_crossing";
    std::string loss = c.loss.kind == LossKind::Kind::kFocal ? "focal" : "ce";
    double gamma = c.loss.kind == LossKind::Kind::kFocal ? c.loss.gamma : 2.0;
    std::string weighting = std::string(to_string(c.weighting));
    std::string selection = std::string(to_string(c.selection));
    std::string exec = c.exec == kernels::Exec::kSerial ? "serial" : "parallel";

    overlay(j, "alpha", c.alpha, seen);
    overlay(j, "method", method, seen);
    overlay(j, "aps_rule", aps_rule, seen);
    overlay(j, "loss", loss, seen);
    overlay(j, "gamma", gamma, seen);
    overlay(j, "weighting", weighting, seen);
    overlay(j, "conformal_weighting", c.conformal_weighting, seen);
    overlay(j, "lr", c.lr, seen);
    overlay(j, "weight_decay_factor", c.weight_decay_factor, seen);
    overlay(j, "plateau_factor", c.plateau.factor, seen);
    overlay(j, "plateau_patience", c.plateau.patience, seen);
    overlay(j, "min_lr", c.plateau.min_lr, seen);
    overlay(j, "plateau_threshold", c.plateau.threshold, seen);
    overlay(j, "early_stop_patience", c.early_stop_patience, seen);
    overlay(j, "batch_size", c.batch_size, seen);
    overlay(j, "max_epochs", c.max_epochs, seen);
    overlay(j, "seed", c.seed, seen);
    overlay(j, "selection", selection, seen);
    overlay(j, "hidden", c.hidden, seen);
    overlay(j, "calibration_fraction", c.calibration_fraction, seen);
    overlay(j, "exec", exec, seen);
    overlay(j, "record_steps", c.record_steps, seen);
    for (auto& [k, v] : j.items()) {
        if (!seen.count(k)) throw ConfigError("train config field '" + k + "': unknown field");
    }

    c.method = parse_score_method(method);
    if (aps_rule == "threshold") c.aps_rule = ApsSetRule::kThreshold;
    else if (aps_rule == "cumulative_crossing") c.aps_rule = ApsSetRule::kCumulativeCrossing;
    else throw ConfigError("train config field 'aps_rule': unknown rule '" + aps_rule + "'");
    if (loss == "ce") c.loss = LossKind::cross_entropy();
    else if (loss == "focal") c.loss = LossKind::focal(gamma);
    else throw ConfigError("train config field 'loss': expected ce or focal");
    c.weighting = parse_weighting_mode(weighting);
    c.selection = parse_selection_rule(selection);
    if (exec == "serial") c.exec = kernels::Exec::kSerial;
    else if (exec == "parallel") c.exec = kernels::Exec::kParallel;
    else throw ConfigError("train config field 'exec': expected serial or parallel");
    c.validate();
    return c;
}

// ---- generate ---------------------------------------------------------------

GenerateResult cmd_generate(const DatasetSpec& spec, const fs::path& out_dir) {
    spec.validate();
    const Dataset data = generate(spec);
    std::ostringstream body;
    write_dataset(data, body);
    const std::string bytes = body.str();

    const std::string spec_hash = content_hash(spec_to_json(spec));
    const std::string file_name = "dataset-" + spec_hash + ".jsonl";

    json per_class = json::object();
    auto counts = [&](const std::vector<LabeledExample>& xs) {
        return class_counts(std::span<const LabeledExample>(xs), spec.num_classes);
    };
    per_class["train"] = counts(data.train);
    per_class["validation"] = counts(data.validation);
    per_class["calibration"] = counts(data.calibration);
    per_class["test"] = counts(data.test);

    std::vector<std::size_t> downsampled;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        if (spec.kept_per_class(c) < spec.per_class_n) downsampled.push_back(c);
    }
    std::size_t noisy = 0;
    for (const auto& ex : data.train) noisy += ex.is_noisy ? 1 : 0;

    GenerateResult r;
    r.manifest = json{{"format", "citl-manifest"},
                      {"version", 1},
                      {"spec_hash", spec_hash},
                      {"dataset", file_name},
                      {"checksum", content_hash(bytes)},
                      {"bytes", bytes.size()},
                      {"rng", std::string(kRngFamily)},
                      {"rng_version", kRngVersion},
                      {"counts",
                       {{"train", data.train.size()},
                        {"validation", data.validation.size()},
                        {"calibration", data.calibration.size()},
                        {"test", data.test.size()}}},
                      {"per_class", per_class},
                      {"downsampled_classes", downsampled},
                      {"noisy_train_examples", noisy},
                      {"spec", json::parse(spec_to_json(spec))}};
    r.dataset_path = out_dir / file_name;
    r.manifest_path = out_dir / ("manifest-" + spec_hash + ".json");
    atomic_write(r.dataset_path, bytes);
    atomic_write(r.manifest_path, r.manifest.dump(2) + "\n");
    return r;
}

// ---- run ----------------------------------------------------------------------

RunConfig RunConfig::from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    for (auto& [k, v] : j.items()) {
        if (k != "dataset" && k != "train" && k != "baseline" && k != "name") {
            throw ConfigError("run config field '" + k + "': unknown field");
        }
    }
    RunConfig rc;
    if (!j.contains("dataset") || !j["dataset"].is_string()) {
        throw ConfigError("run config field 'dataset': a dataset path is required");
    }
    rc.dataset_path = j["dataset"].get<std::string>();
    rc.baseline = j.value("baseline", false);
    rc.name = j.value("name", "");
    TrainConfig base = rc.baseline ? TrainConfig::baseline(LossKind::cross_entropy(), 0) : TrainConfig{};
    rc.train = train_config_from_json(j.value("train", json::object()), base);
    if (rc.baseline) {
        rc.train.conformal_weighting = false;
        rc.train.selection = SelectionRule::kMinValLoss;
    }
    return rc;
}

json RunConfig::to_json() const {
    return json{{"dataset", dataset_path}, {"train", train_config_to_json(train)}, {"baseline", baseline}, {"name", name}};
}

std::string RunConfig::hash() const {
    json j = to_json();
    j.erase("name");
    return json_hash(j);
}

json RunRecord::to_json() const {
    json q = json::array();
    for (double v : q_hat_by_epoch) q.push_back(encode_number(v));
    json per_class = json::array();
    for (double v : test_per_class_accuracy) per_class.push_back(encode_number(v));
    return json{{"format", "citl-run-record"},
                {"version", 1},
                {"config_hash", config_hash},
                {"name", name},
                {"seed", seed},
                {"baseline", baseline},
                {"alpha", alpha},
                {"method", method},
                {"loss", loss},
                {"noise_rate", noise_rate},
                {"best_epoch", best_epoch},
                {"best_val_metric", encode_number(best_val_metric)},
                {"test_macro_accuracy", test_macro_accuracy},
                {"test_accuracy", test_accuracy},
                {"test_miou", test_miou},
                {"test_per_class_accuracy", per_class},
                {"minority_classes", minority_classes},
                {"minority_accuracy", encode_number(minority_accuracy)},
                {"val_macro_accuracy", val_macro_accuracy},
                {"val_miou", val_miou},
                {"mean_step_seconds", mean_step_seconds},
                {"q_hat_by_epoch", q},
                {"epochs_run", epochs_run},
                {"aborted", aborted},
                {"abort_message", abort_message},
                {"telemetry", telemetry_path},
                {"checkpoint", checkpoint_path},
                {"probability_dump", probability_dump_path}};
}

RunRecord RunRecord::from_json(const json& j) {
    if (j.value("format", "") != "citl-run-record") throw ConfigError("not a citl run record");
    if (j.value("version", 0) != 1) throw ConfigError("unsupported run record version");
    RunRecord r;
    r.config_hash = j.at("config_hash").get<std::string>();
    r.name = j.value("name", "");
    r.seed = j.at("seed").get<std::uint64_t>();
    r.baseline = j.at("baseline").get<bool>();
    r.alpha = j.at("alpha").get<double>();
    r.method = j.at("method").get<std::string>();
    r.loss = j.at("loss").get<std::string>();
    r.noise_rate = j.at("noise_rate").get<double>();
    r.best_epoch = j.at("best_epoch").get<std::size_t>();
    r.best_val_metric = decode_number(j.at("best_val_metric"));
    r.test_macro_accuracy = j.at("test_macro_accuracy").get<double>();
    r.test_accuracy = j.at("test_accuracy").get<double>();
    r.test_miou = j.at("test_miou").get<double>();
    for (const auto& v : j.at("test_per_class_accuracy")) r.test_per_class_accuracy.push_back(decode_number(v));
    r.minority_classes = j.at("minority_classes").get<std::vector<std::size_t>>();
    r.minority_accuracy = decode_number(j.at("minority_accuracy"));
    r.val_macro_accuracy = j.at("val_macro_accuracy").get<double>();
    r.val_miou = j.at("val_miou").get<double>();
    r.mean_step_seconds = j.at("mean_step_seconds").get<double>();
    for (const auto& v : j.at("q_hat_by_epoch")) r.q_hat_by_epoch.push_back(decode_number(v));
    r.epochs_run = j.at("epochs_run").get<std::size_t>();
    r.aborted = j.at("aborted").get<bool>();
    r.abort_message = j.value("abort_message", "");
    r.telemetry_path = j.value("telemetry", "");
    r.checkpoint_path = j.value("checkpoint", "");
    r.probability_dump_path = j.value("probability_dump", "");
    return r;
}

namespace {

// Forwards telemetry to the JSONL writer and keeps the epoch records.
class RecordingSink : public TelemetrySink {
public:
    explicit RecordingSink(JsonlTelemetryWriter* writer) : writer_(writer) {}
    void on_step(const StepTelemetry& s) override {
        if (writer_) writer_->on_step(s);
    }
    void on_epoch(const EpochTelemetry& e) override {
        epochs.push_back(e);
        if (writer_) writer_->on_epoch(e);
    }
    std::vector<EpochTelemetry> epochs;

private:
    JsonlTelemetryWriter* writer_;
};

}  // namespace

RunRecord execute_run(const RunConfig& config, const Dataset& dataset, const fs::path& out_dir) {
    RunConfig rc = config;
    if (rc.baseline) {
        rc.train.conformal_weighting = false;
        rc.train.selection = SelectionRule::kMinValLoss;
    }
    RunRecord rec;
    rec.config_hash = rc.hash();
    rec.name = rc.name;
    rec.seed = rc.train.seed;
    rec.baseline = rc.baseline;
    rec.alpha = rc.train.alpha;
    rec.method = std::string(to_string(rc.train.method));
    rec.loss = rc.train.loss.kind == LossKind::Kind::kFocal ? "focal" : "ce";
    rec.noise_rate = dataset.spec.noise_rate;
    rec.minority_classes = dataset.spec.minority_classes;

    const bool write = !out_dir.empty();
    const fs::path dir = out_dir / rec.config_hash;
    std::unique_ptr<JsonlTelemetryWriter> writer;
    if (write) {
        fs::create_directories(dir);
        rec.telemetry_path = (dir / "telemetry.jsonl").string();
        writer = std::make_unique<JsonlTelemetryWriter>(
            rec.telemetry_path, json{{"run", rec.config_hash}, {"config", rc.to_json()}});
    }
    RecordingSink sink(writer.get());

    TrainingResult result;
    try {
        result = rc.baseline ? run_baseline(rc.train, dataset, &sink) : run_training(rc.train, dataset, &sink);
    } catch (const NumericError& e) {
        rec.aborted = true;
        rec.abort_message = e.what();
        rec.epochs_run = sink.epochs.size();
        if (writer) writer->abort(e.what(), e.epoch(), e.batch());
        if (write) {
            rec.record_path = (dir / "record.json").string();
            atomic_write(rec.record_path, rec.to_json().dump(2) + "\n");
        }
        return rec;
    }

    rec.best_epoch = result.best_epoch;
    rec.best_val_metric = result.best_metric;
    rec.epochs_run = result.epochs.size();
    double step_sum = 0.0;
    std::size_t trained = 0;
    for (const auto& e : result.epochs) {
        rec.q_hat_by_epoch.push_back(e.q_hat);
        if (e.trained) {
            step_sum += e.mean_step_seconds;
            ++trained;
        }
    }
    rec.mean_step_seconds = trained ? step_sum / static_cast<double>(trained) : 0.0;

    const EvalResult test = evaluate(result.best_params, dataset.test, rc.train.exec);
    rec.test_macro_accuracy = test.macro_accuracy;
    rec.test_accuracy = test.accuracy;
    rec.test_miou = test.miou;
    rec.test_per_class_accuracy = test.per_class_accuracy;
    rec.minority_accuracy = minority_mean(test.per_class_accuracy, rec.minority_classes);
    if (!dataset.validation.empty()) {
        const EvalResult val = evaluate(result.best_params, dataset.validation, rc.train.exec);
        rec.val_macro_accuracy = val.macro_accuracy;
        rec.val_miou = val.miou;
    }

    if (write) {
        rec.checkpoint_path = (dir / "checkpoint.txt").string();
        std::ostringstream ckpt;
        save_checkpoint(result.best_params, ckpt);
        atomic_write(rec.checkpoint_path, ckpt.str());
        rec.probability_dump_path = (dir / "validation_probs.csv").string();
        const auto stream = dataset.validation_stream();
        write_probability_dump(dump_model_outputs(result.best_params, stream, rc.train.method),
                               rec.probability_dump_path);
        rec.record_path = (dir / "record.json").string();
        atomic_write(rec.record_path, rec.to_json().dump(2) + "\n");
    }
    return rec;
}

RunRecord cmd_run(const RunConfig& config, const fs::path& out_root) {
    if (config.dataset_path.empty() || !fs::exists(config.dataset_path)) {
        throw ConfigError("run config field 'dataset': no dataset at '" + config.dataset_path + "'");
    }
    const Dataset data = read_dataset(config.dataset_path);
    return execute_run(config, data, out_root / "runs");
}

// ---- grid -------------------------------------------------------------------

GridPlan GridPlan::from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("grid plan must be a JSON object");
    static const std::set<std::string> known{"dataset", "train", "alphas", "noise_levels", "seeds", "baselines",
                                             "include_method", "focal_gamma", "metric", "jobs"};
    for (auto& [k, v] : j.items()) {
        if (!known.count(k)) throw ConfigError("grid plan field '" + k + "': unknown field");
    }
    GridPlan p;
    try {
        if (j.contains("dataset")) p.dataset = spec_from_json(j.at("dataset").dump());
        if (j.contains("train")) p.train = train_config_from_json(j.at("train"));
        p.alphas = j.value("alphas", std::vector<double>{});
        p.noise_levels = j.value("noise_levels", std::vector<double>{0.0});
        p.seeds = j.value("seeds", std::vector<std::uint64_t>{0});
        p.baselines = j.value("baselines", std::vector<std::string>{"ce"});
        p.include_method = j.value("include_method", !p.alphas.empty());
        p.focal_gamma = j.value("focal_gamma", 2.0);
        p.metric = j.value("metric", std::string("macro_accuracy"));
        p.jobs = j.value("jobs", std::size_t{1});
    } catch (const json::exception& e) {
        throw ConfigError(std::string("grid plan: ") + e.what());
    }
    p.validate();
    return p;
}

void GridPlan::validate() const {
    if (include_method && alphas.empty()) throw ConfigError("grid plan field 'alphas': empty alpha grid");
    if (!include_method && baselines.empty()) throw ConfigError("grid plan: nothing to run");
    if (noise_levels.empty()) throw ConfigError("grid plan field 'noise_levels': empty");
    if (seeds.empty()) throw ConfigError("grid plan field 'seeds': need at least one seed");
    for (double a : alphas) {
        if (!(a > 0.0 && a < 1.0)) throw ConfigError("grid plan field 'alphas': values must lie in (0, 1)");
    }
    for (const auto& b : baselines) {
        if (b != "ce" && b != "focal") throw ConfigError("grid plan field 'baselines': unknown baseline '" + b + "'");
    }
    if (metric != "macro_accuracy" && metric != "miou") {
        throw ConfigError("grid plan field 'metric': expected macro_accuracy or miou");
    }
    if (jobs == 0) throw ConfigError("grid plan field 'jobs': must be positive");
}

std::vector<SummaryRow> summarize_grid(const std::vector<GridCell>& cells, const GridPlan& plan) {
    std::vector<SummaryRow> rows;
    const bool has_ce = std::count(plan.baselines.begin(), plan.baselines.end(), "ce") > 0;
    const bool has_focal = std::count(plan.baselines.begin(), plan.baselines.end(), "focal") > 0;
    for (double noise : plan.noise_levels) {
        auto collect = [&](const std::string& kind, std::optional<double> alpha, bool minority) {
            std::vector<double> xs;
            for (const auto& c : cells) {
                if (!c.ok || c.noise != noise || c.kind != kind) continue;
                if (alpha && c.alpha != *alpha) continue;
                const double v = minority ? c.minority_accuracy : c.test_metric;
                if (!std::isnan(v)) xs.push_back(v);
            }
            return xs.empty() ? std::optional<double>{} : std::optional<double>{median(xs)};
        };
        SummaryRow row;
        row.noise = noise;
        if (has_ce) {
            row.baseline = collect("ce", std::nullopt, false);
            row.baseline_minority = collect("ce", std::nullopt, true);
        }
        if (has_focal) row.focal = collect("focal", std::nullopt, false);
        if (plan.include_method) {
            for (double a : plan.alphas) {
                const auto m = collect("method", a, false);
                if (m && (!row.method || *m > *row.method)) {
                    row.method = m;
                    row.alpha = a;
                }
            }
            if (row.alpha) row.method_minority = collect("method", row.alpha, true);
            if (row.method && row.baseline) row.delta = *row.method - *row.baseline;
        }
        rows.push_back(row);
    }
    return rows;
}

void write_cells_csv(const std::vector<GridCell>& cells, std::ostream& out) {
    out << "noise,seed,kind,alpha,status,test_metric,val_metric,minority_accuracy,worst_class_accuracy,"
           "final_pruned_fraction,mean_step_seconds,epochs,run,error\n";
    for (const auto& c : cells) {
        std::string err = c.error;
        std::replace(err.begin(), err.end(), ',', ';');
        std::replace(err.begin(), err.end(), '\n', ' ');
        out << format_double(c.noise) << ',' << c.seed << ',' << c.kind << ','
            << (c.kind == "method" ? format_double(c.alpha) : "") << ',' << (c.ok ? "ok" : "failed") << ','
            << format_double(c.test_metric) << ',' << format_double(c.val_metric) << ','
            << format_double(c.minority_accuracy) << ',' << format_double(c.worst_class_accuracy) << ','
            << format_double(c.final_pruned_fraction) << ',' << format_double(c.mean_step_seconds) << ','
            << c.record.epochs_run << ',' << c.record.config_hash << ',' << err << '\n';
    }
}

void write_summary_csv(const std::vector<SummaryRow>& rows, const GridPlan& plan, std::ostream& out) {
    const bool has_ce = std::count(plan.baselines.begin(), plan.baselines.end(), "ce") > 0;
    const bool has_focal = std::count(plan.baselines.begin(), plan.baselines.end(), "focal") > 0;
    const bool method = plan.include_method;
    std::vector<std::string> cols{"noise"};
    if (method) cols.push_back("alpha");
    if (has_ce) cols.push_back("baseline");
    if (has_focal) cols.push_back("focal");
    if (method) cols.push_back("method");
    if (method && has_ce) cols.push_back("delta");
    if (has_ce) cols.push_back("baseline_minority");
    if (method) cols.push_back("method_minority");
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << '\n';
    for (const auto& r : rows) {
        std::vector<std::string> v{format_double(r.noise * 100.0)};
        if (method) v.push_back(opt_cell(r.alpha));
        if (has_ce) v.push_back(opt_cell(r.baseline));
        if (has_focal) v.push_back(opt_cell(r.focal));
        if (method) v.push_back(opt_cell(r.method));
        if (method && has_ce) v.push_back(opt_cell(r.delta));
        if (has_ce) v.push_back(opt_cell(r.baseline_minority));
        if (method) v.push_back(opt_cell(r.method_minority));
        for (std::size_t i = 0; i < v.size(); ++i) out << (i ? "," : "") << v[i];
        out << '\n';
    }
}

GridResult cmd_grid(const GridPlan& plan, const fs::path& out_dir) {
    plan.validate();
    struct Job {
        GridCell cell;
        std::size_t dataset;
        RunConfig config;
    };
    std::vector<Dataset> datasets;
    std::vector<Job> jobs;
    for (double noise : plan.noise_levels) {
        for (std::uint64_t seed : plan.seeds) {
            DatasetSpec spec = plan.dataset;
            spec.noise_rate = noise;
            spec.seed = seed;
            datasets.push_back(generate(spec));
            const std::size_t d = datasets.size() - 1;
            auto add = [&](const std::string& kind, double alpha) {
                Job job;
                job.cell.noise = noise;
                job.cell.seed = seed;
                job.cell.kind = kind;
                job.cell.alpha = alpha;
                job.dataset = d;
                job.config.dataset_path = "grid:" + content_hash(spec_to_json(spec));
                job.config.train = plan.train;
                job.config.train.seed = seed;
                job.config.train.alpha = alpha;
                job.config.train.record_steps = false;
                if (plan.jobs > 1) job.config.train.exec = kernels::Exec::kSerial;
                if (kind == "method") {
                    job.config.train.conformal_weighting = true;
                    if (plan.metric == "miou") job.config.train.selection = SelectionRule::kMaxValMiou;
                    else job.config.train.selection = SelectionRule::kMaxValAccuracy;
                } else {
                    job.config.baseline = true;
                    job.config.train.loss =
                        kind == "focal" ? LossKind::focal(plan.focal_gamma) : LossKind::cross_entropy();
                }
                job.config.name = kind + "-noise" + format_double(noise) + "-seed" + std::to_string(seed) +
                                  (kind == "method" ? "-alpha" + format_double(alpha) : "");
                jobs.push_back(std::move(job));
            };
            for (const auto& b : plan.baselines) add(b, plan.train.alpha);
            if (plan.include_method) {
                for (double a : plan.alphas) add("method", a);
            }
        }
    }

    const fs::path runs_dir = out_dir.empty() ? fs::path{} : out_dir / "runs";
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            Job& job = jobs[i];
            GridCell& cell = job.cell;
            try {
                cell.record = execute_run(job.config, datasets[job.dataset], runs_dir);
                if (cell.record.aborted) {
                    cell.error = cell.record.abort_message;
                    continue;
                }
                cell.ok = true;
                cell.test_metric = plan.metric == "miou" ? cell.record.test_miou : cell.record.test_macro_accuracy;
                cell.val_metric = plan.metric == "miou" ? cell.record.val_miou : cell.record.val_macro_accuracy;
                cell.minority_accuracy = cell.record.minority_accuracy;
                const auto& pc = cell.record.test_per_class_accuracy;
                cell.worst_class_accuracy = pc.empty() ? 0.0 : *std::min_element(pc.begin(), pc.end());
                cell.mean_step_seconds = cell.record.mean_step_seconds;
            } catch (const std::exception& e) {
                cell.error = e.what();
            }
        }
    };
    const std::size_t threads = std::min(plan.jobs, jobs.size());
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    GridResult result;
    for (auto& job : jobs) {
        if (!job.cell.ok) result.partial = true;
        if (job.cell.ok && !job.cell.record.telemetry_path.empty()) {
            const auto log = read_telemetry(job.cell.record.telemetry_path);
            for (auto it = log.epochs.rbegin(); it != log.epochs.rend(); ++it) {
                if (it->trained) {
                    job.cell.final_pruned_fraction = it->pruned_fraction;
                    break;
                }
            }
        }
        result.cells.push_back(std::move(job.cell));
    }
    result.summary = summarize_grid(result.cells, plan);
    if (!out_dir.empty()) {
        std::ostringstream cells_csv, summary_csv;
        write_cells_csv(result.cells, cells_csv);
        write_summary_csv(result.summary, plan, summary_csv);
        result.cells_csv = out_dir / "cells.csv";
        result.summary_csv = out_dir / "summary.csv";
        atomic_write(result.cells_csv, cells_csv.str());
        atomic_write(result.summary_csv, summary_csv.str());
    }
    return result;
}

// ---- probability dumps --------------------------------------------------------

void write_probability_dump(const ProbabilityDump& dump, std::ostream& out) {
    out << "citl-probs " << kDumpVersion << " classes=" << dump.classes << " method=" << to_string(dump.method)
        << " count=" << dump.probs.size() << '\n';
    for (std::size_t i = 0; i < dump.probs.size(); ++i) {
        for (double p : dump.probs[i]) out << format_double(p) << ',';
        out << dump.labels[i] << '\n';
    }
}

void write_probability_dump(const ProbabilityDump& dump, const fs::path& path) {
    std::ostringstream ss;
    write_probability_dump(dump, ss);
    atomic_write(path, ss.str());
}

ProbabilityDump read_probability_dump(std::istream& in, std::vector<DumpRejection>& rejected) {
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("probability dump is empty");
    std::istringstream header(line);
    std::string magic;
    int version = 0;
    header >> magic >> version;
    if (magic != "citl-probs") throw ConfigError("probability dump: missing citl-probs header");
    if (version != kDumpVersion) throw ConfigError("probability dump: unsupported version " + std::to_string(version));
    ProbabilityDump dump;
    std::size_t count = 0;
    bool have_count = false;
    for (std::string kv; header >> kv;) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("probability dump header: bad field '" + kv + "'");
        const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
        if (key == "classes") dump.classes = std::stoul(value);
        else if (key == "method") dump.method = parse_score_method(value);
        else if (key == "count") {
            count = std::stoul(value);
            have_count = true;
        } else throw ConfigError("probability dump header: unknown field '" + key + "'");
    }
    if (dump.classes < 2) throw ConfigError("probability dump header: classes must be >= 2");

    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
        if (fields.size() != dump.classes + 1) {
            throw ConfigError("probability dump row " + std::to_string(row) + ": expected " +
                              std::to_string(dump.classes + 1) + " fields, got " + std::to_string(fields.size()));
        }
        std::vector<double> p(dump.classes);
        std::size_t label = 0;
        std::string reason;
        try {
            for (std::size_t c = 0; c < dump.classes; ++c) p[c] = std::stod(fields[c]);
            const long parsed = std::stol(fields.back());
            if (parsed < 0 || static_cast<std::size_t>(parsed) >= dump.classes) reason = "label out of range";
            label = static_cast<std::size_t>(parsed);
            if (reason.empty()) validate_probabilities(p);
        } catch (const DomainError& e) {
            reason = e.what();
        } catch (const std::exception&) {
            reason = "unparseable number";
        }
        if (reason.empty()) {
            dump.probs.push_back(std::move(p));
            dump.labels.push_back(label);
            dump.rows.push_back(row);
        } else {
            rejected.push_back({row, reason});
        }
        ++row;
    }
    if (have_count && count != row) {
        throw ConfigError("probability dump: header count " + std::to_string(count) + " but " + std::to_string(row) +
                          " rows");
    }
    return dump;
}

ProbabilityDump read_probability_dump(const fs::path& path, std::vector<DumpRejection>& rejected) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open probability dump " + path.string());
    return read_probability_dump(in, rejected);
}

ProbabilityDump dump_model_outputs(const NetParams& params, std::span<const LabeledExample> examples,
                                   ScoreMethod method) {
    ProbabilityDump dump;
    dump.classes = params.num_classes();
    dump.method = method;
    std::vector<double> inputs;
    for (const auto& ex : examples) inputs.insert(inputs.end(), ex.x.begin(), ex.x.end());
    kernels::Activations acts;
    kernels::forward_batch(params, inputs, examples.size(), acts, kernels::Exec::kSerial);
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto p = acts.probs(i, dump.classes);
        dump.probs.emplace_back(p.begin(), p.end());
        dump.labels.push_back(examples[i].y);
    }
    return dump;
}

// ---- sidecar ------------------------------------------------------------------

json SidecarReport::to_json() const {
    json rows_json = json::array();
    for (std::size_t i = 0; i < sets.size(); ++i) {
        rows_json.push_back(json{{"row", rows[i]}, {"set", sets[i].members()}, {"weight", weights[i]}});
    }
    json rej = json::array();
    for (const auto& r : rejected) rej.push_back(json{{"row", r.row}, {"reason", r.reason}});
    return json{{"quantile",
                 {{"q_hat", encode_number(quantile.q_hat)},
                  {"alpha", quantile.alpha},
                  {"n", quantile.n},
                  {"method", std::string(to_string(quantile.method))}}},
                {"calibration_size", calibration_size},
                {"scored", sets.size()},
                {"coverage", coverage},
                {"band", {band.lower, band.upper}},
                {"within_band", within_band},
                {"uncertainty_fraction", uncertainty_fraction},
                {"pruned_fraction", pruned_fraction},
                {"pruned_rows", pruned},
                {"rejected", rej},
                {"rows", rows_json}};
}

SidecarReport run_sidecar(const ProbabilityDump& dump, const SidecarOptions& options) {
    const ScoreMethod method = options.method.value_or(dump.method);
    const std::size_t n = dump.probs.size();
    const std::size_t prefix = calibration_prefix_size(options.calibration_fraction, n);
    if (prefix == 0 || prefix >= n) {
        throw ConfigError("sidecar: calibration prefix of " + std::to_string(prefix) + " rows out of " +
                          std::to_string(n) + " leaves nothing to calibrate or score");
    }
    StreamingCalibrator calibrator(method);
    for (std::size_t i = 0; i < prefix; ++i) calibrator.add(dump.probs[i], dump.labels[i]);

    SidecarReport r;
    r.quantile = calibrator.fit(options.alpha);
    r.calibration_size = prefix;
    std::vector<std::size_t> labels;
    for (std::size_t i = prefix; i < n; ++i) {
        const std::size_t row = dump.rows.empty() ? i : dump.rows[i];
        PredictionSet set = predict_set(dump.probs[i], r.quantile, options.aps_rule);
        r.rows.push_back(row);
        r.weights.push_back(set.size());
        if (set.empty()) r.pruned.push_back(row);
        r.sets.push_back(std::move(set));
        labels.push_back(dump.labels[i]);
    }
    r.coverage = empirical_coverage(r.sets, labels);
    r.band = coverage_band(options.alpha, prefix);
    r.within_band = r.coverage >= r.band.lower && r.coverage <= r.band.upper;
    r.uncertainty_fraction = uncertainty_fraction(std::span<const PredictionSet>(r.sets));
    r.pruned_fraction = pruned_fraction(std::span<const PredictionSet>(r.sets));
    return r;
}

SidecarReport cmd_sidecar(const fs::path& dump_path, const SidecarOptions& options) {
    std::vector<DumpRejection> rejected;
    const ProbabilityDump dump = read_probability_dump(dump_path, rejected);
    SidecarReport r = run_sidecar(dump, options);
    r.rejected = std::move(rejected);
    return r;
}

// ---- report -------------------------------------------------------------------

const std::vector<FigureFile>& figure_files() {
    static const std::vector<FigureFile> files{
        {"fig_weight_range.csv", "run,alpha,noise,baseline,epoch,step,weight_range"},
        {"fig_uncertainty.csv", "run,alpha,noise,baseline,epoch,uncertainty_fraction,val_uncertainty_fraction"},
        {"fig_pruned.csv", "run,alpha,noise,epoch,step,pruned_fraction"},
        {"fig_quantile.csv", "run,alpha,noise,epoch,step,q_hat"},
        {"fig_overhead.csv", "run,alpha,noise,method_step_seconds,baseline_step_seconds,ratio"},
    };
    return files;
}

std::vector<fs::path> cmd_report(const std::vector<fs::path>& record_paths, const fs::path& out_dir) {
    if (record_paths.empty()) throw ConfigError("report: no run records given");
    struct Loaded {
        RunRecord record;
        TelemetryLog log;
    };
    std::vector<Loaded> runs;
    for (const auto& path : record_paths) {
        json j;
        try {
            j = json::parse(read_file(path));
        } catch (const json::parse_error& e) {
            throw ConfigError("report: " + path.string() + " is not valid JSON: " + e.what());
        }
        Loaded l{RunRecord::from_json(j), {}};
        if (l.record.telemetry_path.empty()) throw ConfigError("report: " + path.string() + " has no telemetry");
        l.log = read_telemetry(l.record.telemetry_path);
        runs.push_back(std::move(l));
    }

    const auto& files = figure_files();
    std::vector<std::ostringstream> out(files.size());
    for (std::size_t i = 0; i < files.size(); ++i) out[i] << files[i].header << '\n';

    for (const auto& run : runs) {
        const auto& r = run.record;
        const std::string prefix = r.config_hash + "," + format_double(r.alpha) + "," + format_double(r.noise_rate);
        std::map<std::size_t, std::size_t> last_step_of_epoch;
        for (const auto& s : run.log.steps) last_step_of_epoch[s.epoch] = s.step;
        for (const auto& e : run.log.epochs) {
            if (!e.trained) continue;
            const auto it = last_step_of_epoch.find(e.epoch);
            const std::string step = it == last_step_of_epoch.end() ? "" : std::to_string(it->second);
            out[0] << prefix << ',' << (r.baseline ? 1 : 0) << ',' << e.epoch << ',' << step << ','
                   << format_double(e.weight_range) << '\n';
            out[1] << prefix << ',' << (r.baseline ? 1 : 0) << ',' << e.epoch << ','
                   << format_double(e.uncertainty_fraction) << ',' << format_double(e.val_uncertainty_fraction) << '\n';
        }
        if (!r.baseline) {
            for (const auto& s : run.log.steps) {
                out[2] << prefix << ',' << s.epoch << ',' << s.step << ',' << format_double(s.pruned_fraction) << '\n';
                out[3] << prefix << ',' << s.epoch << ',' << s.step << ','
                       << (s.q_hat ? (std::isinf(*s.q_hat) ? std::string("inf") : format_double(*s.q_hat)) : "")
                       << '\n';
            }
            std::optional<double> base;
            for (const auto& other : runs) {
                if (other.record.baseline && other.record.seed == r.seed && other.record.noise_rate == r.noise_rate) {
                    base = other.record.mean_step_seconds;
                    break;
                }
            }
            out[4] << prefix << ',' << format_double(r.mean_step_seconds) << ',' << (base ? format_double(*base) : "")
                   << ',' << (base && *base > 0 ? format_double(r.mean_step_seconds / *base) : "") << '\n';
        }
    }

    std::vector<fs::path> written;
    for (std::size_t i = 0; i < files.size(); ++i) {
        const fs::path p = out_dir / files[i].name;
        atomic_write(p, out[i].str());
        written.push_back(p);
    }
    return written;
}

}  // namespace citl::harness
