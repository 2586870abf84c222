#pragma once

// Line-delimited JSON telemetry: one header, one record per step and per epoch, and an
// abort marker when a run dies. Field names are part of the file contract.
//
//   {"type":"header","schema":"citl-telemetry","version":1,"run":"<hash>",...}
//   {"type":"step","epoch":1,"step":0,"batch_size":64,"q_hat":0.91,"pruned_fraction":0,...}
//   {"type":"epoch","epoch":1,"q_hat":0.91,"per_class_mean_weight":[...],...}
//   {"type":"abort","message":"...","epoch":3,"batch":12}
//
// Non-finite numbers are written as strings ("inf", "nan") since JSON has no literal
// for them; q_hat is null before the first calibration.

#include <fstream>
#include <iosfwd>
#include <string>
#include <vector>

#include "citl/trainer.hpp"
#include "json.hpp"

namespace citl {

inline constexpr const char* kTelemetrySchema = "citl-telemetry";
inline constexpr int kTelemetryVersion = 1;

nlohmann::json to_json(const StepTelemetry& s);
nlohmann::json to_json(const EpochTelemetry& e);
StepTelemetry step_from_json(const nlohmann::json& j);
EpochTelemetry epoch_from_json(const nlohmann::json& j);

// Number encoding that survives infinities and NaN.
nlohmann::json encode_number(double v);
double decode_number(const nlohmann::json& j);

class JsonlTelemetryWriter : public TelemetrySink {
public:
    JsonlTelemetryWriter(const std::string& path, const nlohmann::json& header_fields);

    void on_step(const StepTelemetry& s) override;
    void on_epoch(const EpochTelemetry& e) override;
    void abort(const std::string& message, long epoch, long batch);

private:
    void write(const nlohmann::json& j);
    std::ofstream out_;
};

struct TelemetryLog {
    nlohmann::json header;
    std::vector<StepTelemetry> steps;
    std::vector<EpochTelemetry> epochs;
    bool aborted = false;
    std::string abort_message;
};

// Throws ConfigError on an unknown schema or version.
TelemetryLog read_telemetry(const std::string& path);
TelemetryLog read_telemetry(std::istream& in);

}  // namespace citl
