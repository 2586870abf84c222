// citl: command-line harness for conformal-in-the-loop experiments.

#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "citl/errors.hpp"
#include "citl/harness.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
namespace h = citl::harness;
using nlohmann::json;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw citl::ConfigError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json load_json(const std::string& path) {
    try {
        return json::parse(slurp(path));
    } catch (const json::parse_error& e) {
        throw citl::ConfigError(path + ": " + e.what());
    }
}

fs::path resolve_out(const std::string& flag, const char* sub) {
    return flag.empty() ? h::default_output_root() / sub : fs::path(flag);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conformal-in-the-loop training harness"};
    app.require_subcommand(1);

    std::string out;
    app.add_option("-o,--out", out, "Output directory (default: $CITL_OUTPUT_ROOT or ./citl_out)");

    std::string spec_path;
    auto* gen = app.add_subcommand("generate", "Generate a dataset from a JSON spec");
    gen->add_option("spec", spec_path, "Dataset spec file")->required();

    std::string run_path;
    auto* run = app.add_subcommand("run", "Train one model from a JSON run config");
    run->add_option("config", run_path, "Run config file")->required();

    std::string plan_path;
    auto* grid = app.add_subcommand("grid", "Run an alpha/noise/seed grid");
    grid->add_option("plan", plan_path, "Grid plan file")->required();

    std::string dump_path;
    std::string method;
    std::string aps_rule = "threshold";
    h::SidecarOptions sidecar_opts;
    bool sets_only = false;
    auto* side = app.add_subcommand("sidecar", "Conformal analysis of a probability dump");
    side->add_option("dump", dump_path, "Probability dump file")->required();
    side->add_option("-a,--alpha", sidecar_opts.alpha, "Miscoverage level")->check(CLI::Range(0.0, 1.0));
    side->add_option("-m,--method", method, "Score method (lac or aps); defaults to the dump header");
    side->add_option("--calibration-fraction", sidecar_opts.calibration_fraction, "Prefix fraction used to fit")
        ->check(CLI::Range(0.0, 1.0));
    side->add_option("--aps-rule", aps_rule, "APS set rule: threshold or cumulative_crossing");
    side->add_flag("--summary", sets_only, "Omit per-row sets from the output");

    std::vector<std::string> records;
    auto* rep = app.add_subcommand("report", "Write figure CSVs from run records");
    rep->add_option("records", records, "run record.json files")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? h::kExitOk : h::kExitUsage;
    }

    try {
        if (*gen) {
            const auto r = h::cmd_generate(citl::spec_from_json(slurp(spec_path)), resolve_out(out, "datasets"));
            std::cout << r.dataset_path.string() << '\n' << r.manifest_path.string() << '\n';
        } else if (*run) {
            const auto rec = h::cmd_run(h::RunConfig::from_json(load_json(run_path)),
                                        out.empty() ? h::default_output_root() : fs::path(out));
            std::cout << (rec.record_path.empty() ? rec.config_hash : rec.record_path) << '\n';
            if (rec.aborted) {
                std::cerr << "citl: numeric abort: " << rec.abort_message << '\n';
                return h::kExitNumericAbort;
            }
        } else if (*grid) {
            const auto plan = h::GridPlan::from_json(load_json(plan_path));
            const auto r = h::cmd_grid(plan, resolve_out(out, "grid"));
            std::cout << r.summary_csv.string() << '\n';
            for (const auto& c : r.cells) {
                if (!c.ok) std::cerr << "citl: cell " << c.record.name << " failed: " << c.error << '\n';
            }
            if (r.partial) return h::kExitPartialGrid;
        } else if (*side) {
            if (!method.empty()) sidecar_opts.method = citl::parse_score_method(method);
            if (aps_rule == "threshold") sidecar_opts.aps_rule = citl::ApsSetRule::kThreshold;
            else if (aps_rule == "cumulative_crossing") sidecar_opts.aps_rule = citl::ApsSetRule::kCumulativeCrossing;
            else throw citl::ConfigError("--aps-rule: expected threshold or cumulative_crossing");
            json j = h::cmd_sidecar(dump_path, sidecar_opts).to_json();
            if (sets_only) j.erase("rows");
            if (out.empty()) {
                std::cout << j.dump(2) << '\n';
            } else {
                fs::path target(out);
                if (fs::is_directory(target)) target /= "sidecar.json";
                h::atomic_write(target, j.dump(2) + "\n");
                std::cout << target.string() << '\n';
            }
        } else if (*rep) {
            std::vector<fs::path> paths(records.begin(), records.end());
            for (const auto& p : h::cmd_report(paths, resolve_out(out, "report"))) std::cout << p.string() << '\n';
        }
    } catch (const citl::NumericError& e) {
        std::cerr << "citl: numeric abort: " << e.what() << '\n';
        return h::kExitNumericAbort;
    } catch (const std::exception& e) {
        std::cerr << "citl: " << e.what() << '\n';
        return h::kExitUsage;
    }
    return h::kExitOk;
}
