#include "citl/telemetry.hpp"

#include <cmath>
#include <limits>

#include "citl/errors.hpp"

namespace citl {

using nlohmann::json;

json encode_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

double decode_number(const json& j) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    }
    throw ConfigError("telemetry: expected a number, got " + j.dump());
}

namespace {

json encode_vector(const std::vector<double>& xs) {
    json arr = json::array();
    for (double x : xs) arr.push_back(encode_number(x));
    return arr;
}

std::vector<double> decode_vector(const json& j) {
    std::vector<double> out;
    for (const auto& x : j) out.push_back(decode_number(x));
    return out;
}

}  // namespace

json to_json(const StepTelemetry& s) {
    return json{{"type", "step"},
                {"epoch", s.epoch},
                {"step", s.step},
                {"batch_size", s.batch_size},
                {"q_hat", s.q_hat ? encode_number(*s.q_hat) : json(nullptr)},
                {"pruned_fraction", s.pruned_fraction},
                {"uncertainty_fraction", s.uncertainty_fraction},
                {"mean_set_size", s.mean_set_size},
                {"mean_applied_weight", s.mean_applied_weight},
                {"skipped", s.skipped},
                {"step_seconds", s.step_seconds},
                {"lr", s.lr},
                {"loss", encode_number(s.loss)}};
}

json to_json(const EpochTelemetry& e) {
    return json{{"type", "epoch"},
                {"epoch", e.epoch},
                {"trained", e.trained},
                {"q_hat", encode_number(e.q_hat)},
                {"calibration_n", e.calibration_n},
                {"per_class_mean_weight", encode_vector(e.per_class_mean_weight)},
                {"per_class_pruned_fraction", encode_vector(e.per_class_pruned_fraction)},
                {"weight_range", e.weight_range},
                {"pruned_fraction", e.pruned_fraction},
                {"uncertainty_fraction", e.uncertainty_fraction},
                {"pruned_noisy_fraction", e.pruned_noisy_fraction},
                {"train_loss", encode_number(e.train_loss)},
                {"skipped_batches", e.skipped_batches},
                {"val_loss", encode_number(e.val_loss)},
                {"val_macro_accuracy", e.val_macro_accuracy},
                {"val_accuracy", e.val_accuracy},
                {"val_miou", e.val_miou},
                {"val_coverage", e.val_coverage},
                {"val_uncertainty_fraction", e.val_uncertainty_fraction},
                {"val_pruned_fraction", e.val_pruned_fraction},
                {"lr", e.lr},
                {"mean_step_seconds", e.mean_step_seconds}};
}

StepTelemetry step_from_json(const json& j) {
    StepTelemetry s;
    s.epoch = j.at("epoch").get<std::size_t>();
    s.step = j.at("step").get<std::size_t>();
    s.batch_size = j.at("batch_size").get<std::size_t>();
    if (!j.at("q_hat").is_null()) s.q_hat = decode_number(j.at("q_hat"));
    s.pruned_fraction = j.at("pruned_fraction").get<double>();
    s.uncertainty_fraction = j.at("uncertainty_fraction").get<double>();
    s.mean_set_size = j.at("mean_set_size").get<double>();
    s.mean_applied_weight = j.at("mean_applied_weight").get<double>();
    s.skipped = j.at("skipped").get<bool>();
    s.step_seconds = j.at("step_seconds").get<double>();
    s.lr = j.at("lr").get<double>();
    s.loss = decode_number(j.at("loss"));
    return s;
}

EpochTelemetry epoch_from_json(const json& j) {
    EpochTelemetry e;
    e.epoch = j.at("epoch").get<std::size_t>();
    e.trained = j.at("trained").get<bool>();
    e.q_hat = decode_number(j.at("q_hat"));
    e.calibration_n = j.at("calibration_n").get<std::size_t>();
    e.per_class_mean_weight = decode_vector(j.at("per_class_mean_weight"));
    e.per_class_pruned_fraction = decode_vector(j.at("per_class_pruned_fraction"));
    e.weight_range = j.at("weight_range").get<double>();
    e.pruned_fraction = j.at("pruned_fraction").get<double>();
    e.uncertainty_fraction = j.at("uncertainty_fraction").get<double>();
    e.pruned_noisy_fraction = j.at("pruned_noisy_fraction").get<double>();
    e.train_loss = decode_number(j.at("train_loss"));
    e.skipped_batches = j.at("skipped_batches").get<std::size_t>();
    e.val_loss = decode_number(j.at("val_loss"));
    e.val_macro_accuracy = j.at("val_macro_accuracy").get<double>();
    e.val_accuracy = j.at("val_accuracy").get<double>();
    e.val_miou = j.at("val_miou").get<double>();
    e.val_coverage = j.at("val_coverage").get<double>();
    e.val_uncertainty_fraction = j.at("val_uncertainty_fraction").get<double>();
    e.val_pruned_fraction = j.at("val_pruned_fraction").get<double>();
    e.lr = j.at("lr").get<double>();
    e.mean_step_seconds = j.at("mean_step_seconds").get<double>();
    return e;
}

JsonlTelemetryWriter::JsonlTelemetryWriter(const std::string& path, const json& header_fields) : out_(path) {
    if (!out_) throw ConfigError("cannot open telemetry file " + path);
    json header = header_fields;
    header["type"] = "header";
    header["schema"] = kTelemetrySchema;
    header["version"] = kTelemetryVersion;
    write(header);
}

void JsonlTelemetryWriter::write(const json& j) {
    out_ << j.dump() << '\n';
    out_.flush();
}

void JsonlTelemetryWriter::on_step(const StepTelemetry& s) { write(to_json(s)); }
void JsonlTelemetryWriter::on_epoch(const EpochTelemetry& e) { write(to_json(e)); }

void JsonlTelemetryWriter::abort(const std::string& message, long epoch, long batch) {
    write(json{{"type", "abort"}, {"message", message}, {"epoch", epoch}, {"batch", batch}});
}

TelemetryLog read_telemetry(std::istream& in) {
    TelemetryLog log;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            const std::string type = j.at("type").get<std::string>();
            if (lineno == 1) {
                if (type != "header" || j.value("schema", "") != kTelemetrySchema) {
                    throw ConfigError("telemetry: missing citl-telemetry header");
                }
                if (j.value("version", 0) != kTelemetryVersion) {
                    throw ConfigError("telemetry: unsupported schema version " + j.at("version").dump());
                }
                log.header = j;
            } else if (type == "step") {
                log.steps.push_back(step_from_json(j));
            } else if (type == "epoch") {
                log.epochs.push_back(epoch_from_json(j));
            } else if (type == "abort") {
                log.aborted = true;
                log.abort_message = j.value("message", "");
            } else {
                throw ConfigError("telemetry: unknown record type '" + type + "'");
            }
        } catch (const json::exception& e) {
            throw ConfigError("telemetry line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (log.header.is_null()) throw ConfigError("telemetry: empty file");
    return log;
}

TelemetryLog read_telemetry(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open telemetry file " + path);
    return read_telemetry(in);
}

}  // namespace citl
