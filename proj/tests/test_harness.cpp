#include "catch_amalgamated.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "citl/errors.hpp"
#include "citl/harness.hpp"
#include "citl/rng.hpp"
#include "citl/telemetry.hpp"

using namespace citl;
using namespace citl::harness;
namespace fs = std::filesystem;
using nlohmann::json;
using Catch::Approx;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("citl_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::ifstream in(p);
    for (std::string line; std::getline(in, line);) {
        std::vector<std::string> row;
        std::stringstream ss(line);
        for (std::string f; std::getline(ss, f, ',');) row.push_back(f);
        if (!line.empty() && line.back() == ',') row.emplace_back();
        rows.push_back(row);
    }
    return rows;
}

std::size_t column(const std::vector<std::string>& header, const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) return i;
    }
    FAIL("missing column " << name);
    return 0;
}

DatasetSpec small_spec(double noise = 0.1, std::uint64_t seed = 2) {
    DatasetSpec s;
    s.generator = Generator::kConcentricRings;
    s.num_classes = 4;
    s.per_class_n = 150;
    s.test_per_class = 50;
    s.minority_classes = {0};
    s.minority_fraction = 0.4;
    s.noise_rate = noise;
    s.seed = seed;
    return s;
}

TrainConfig small_train() {
    TrainConfig c;
    c.hidden = {16};
    c.batch_size = 32;
    c.max_epochs = 3;
    return c;
}

int run_cli(const std::string& args) {
    const char* cli = std::getenv("CITL_CLI");
    if (!cli) return -1;
    const int rc = std::system((std::string(cli) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

ProbabilityDump synthetic_dump(std::size_t n, std::size_t classes, std::uint64_t seed) {
    Rng rng(seed);
    ProbabilityDump d;
    d.classes = classes;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> p(classes);
        double sum = 0.0;
        for (auto& v : p) {
            v = std::exp(rng.normal());
            sum += v;
        }
        for (auto& v : p) v /= sum;
        const double u = rng.uniform();
        double acc = 0.0;
        std::size_t y = classes - 1;
        for (std::size_t c = 0; c < classes; ++c) {
            acc += p[c];
            if (u < acc) {
                y = c;
                break;
            }
        }
        d.probs.push_back(p);
        d.labels.push_back(y);
    }
    return d;
}

}  // namespace

TEST_CASE("content hash") {
    CHECK(content_hash("") == "cbf29ce484222325");
    CHECK(content_hash("a") == "af63dc4c8601ec8c");
    CHECK(json_hash(json::parse(R"({"a":1,"b":2})")) == json_hash(json::parse(R"({"b":2,"a":1})")));
}

TEST_CASE("generate is deterministic and reports downsampled classes") {
    const auto dir = scratch("generate");
    DatasetSpec s;
    s.generator = Generator::kConcentricRings;
    s.minority_classes = {0, 1};
    s.minority_fraction = 0.2;
    const auto a = cmd_generate(s, dir / "a");
    const auto b = cmd_generate(s, dir / "b");
    CHECK(a.manifest["checksum"] == b.manifest["checksum"]);
    CHECK(a.manifest == b.manifest);
    CHECK(a.manifest["downsampled_classes"] == json::array({0, 1}));
    CHECK(slurp(a.dataset_path) == slurp(b.dataset_path));
    CHECK(read_dataset(a.dataset_path.string()).train.size() == a.manifest["counts"]["train"].get<std::size_t>());
}

TEST_CASE("train config json round trip ignores field order") {
    auto c = small_train();
    c.alpha = 0.17;
    c.method = ScoreMethod::kAps;
    c.loss = LossKind::focal(1.5);
    const json j = train_config_to_json(c);
    CHECK(train_config_to_json(train_config_from_json(j)) == j);
    CHECK_THROWS_AS(train_config_from_json(json{{"alpah", 0.1}}), ConfigError);
    CHECK_THROWS_AS(train_config_from_json(json{{"alpha", 2.0}}), ConfigError);

    RunConfig r1 = RunConfig::from_json(json::parse(R"({"dataset":"d.jsonl","train":{"alpha":0.12,"seed":4}})"));
    RunConfig r2 = RunConfig::from_json(json::parse(R"({"train":{"seed":4,"alpha":0.12},"dataset":"d.jsonl"})"));
    CHECK(r1.hash() == r2.hash());
    r2.train.alpha = 0.13;
    CHECK(r1.hash() != r2.hash());
}

TEST_CASE("runs write telemetry, checkpoint and record") {
    const auto dir = scratch("run");
    const auto gen = cmd_generate(small_spec(), dir / "data");
    RunConfig rc;
    rc.dataset_path = gen.dataset_path.string();
    rc.train = small_train();
    rc.train.alpha = 0.18;
    const auto rec = cmd_run(rc, dir);
    CHECK_FALSE(rec.baseline);
    CHECK(rec.q_hat_by_epoch.size() == 3);
    CHECK(fs::exists(rec.telemetry_path));
    CHECK(fs::exists(rec.checkpoint_path));
    CHECK(fs::exists(rec.record_path));
    const auto back = RunRecord::from_json(json::parse(slurp(rec.record_path)));
    CHECK(back.q_hat_by_epoch == rec.q_hat_by_epoch);
    CHECK(back.config_hash == rec.config_hash);
    const auto log = read_telemetry(rec.telemetry_path);
    CHECK(log.epochs.size() == 3);
    CHECK(log.epochs[1].q_hat == rec.q_hat_by_epoch[1]);

    RunConfig bc = rc;
    bc.baseline = true;
    bc.train.conformal_weighting = true;
    const auto brec = cmd_run(bc, dir);
    CHECK(brec.baseline);
    const auto blog = read_telemetry(brec.telemetry_path);
    for (const auto& s : blog.steps) CHECK(s.mean_applied_weight == 1.0);
    const auto parsed = RunConfig::from_json(json{{"dataset", "x"}, {"baseline", true}});
    CHECK(parsed.train.selection == SelectionRule::kMinValLoss);
    CHECK_FALSE(parsed.train.conformal_weighting);

    const auto again = cmd_run(rc, dir);
    CHECK(again.record_path == rec.record_path);
    CHECK(slurp(again.record_path).find(rec.config_hash) != std::string::npos);
}

TEST_CASE("missing dataset is a usage error") {
    RunConfig rc;
    rc.dataset_path = "/nonexistent/data.jsonl";
    CHECK_THROWS_AS(cmd_run(rc, scratch("missing")), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(json::object()), ConfigError);
}

TEST_CASE("telemetry round trip and schema check") {
    std::stringstream ss;
    ss << R"({"type":"header","schema":"citl-telemetry","version":1})" << '\n';
    StepTelemetry s;
    s.epoch = 2;
    s.step = 7;
    s.q_hat = std::numeric_limits<double>::infinity();
    s.pruned_fraction = 0.25;
    EpochTelemetry e;
    e.epoch = 2;
    e.per_class_mean_weight = {1.0, std::nan("")};
    e.weight_range = 0.5;
    ss << to_json(s).dump() << '\n' << to_json(e).dump() << '\n';
    const auto log = read_telemetry(ss);
    REQUIRE(log.steps.size() == 1);
    CHECK(std::isinf(*log.steps[0].q_hat));
    CHECK(log.steps[0].pruned_fraction == 0.25);
    CHECK(std::isnan(log.epochs[0].per_class_mean_weight[1]));
    std::stringstream bad(R"({"type":"header","schema":"citl-telemetry","version":7})");
    CHECK_THROWS_AS(read_telemetry(bad), ConfigError);
}

TEST_CASE("single cell grid gives a single-row table") {
    GridPlan plan;
    plan.dataset = small_spec();
    plan.train = small_train();
    plan.alphas = {0.1};
    plan.noise_levels = {0.1};
    plan.seeds = {1};
    plan.baselines = {"ce"};
    const auto r = cmd_grid(plan, scratch("grid1"));
    CHECK_FALSE(r.partial);
    const auto rows = read_csv(r.summary_csv);
    REQUIRE(rows.size() == 2);
    const auto& h = rows[0];
    const double method = std::stod(rows[1][column(h, "method")]);
    const double base = std::stod(rows[1][column(h, "baseline")]);
    CHECK(std::stod(rows[1][column(h, "delta")]) == Approx(method - base).epsilon(1e-12));
}

TEST_CASE("best alpha row matches per-cell csv") {
    GridPlan plan;
    plan.dataset = small_spec();
    plan.train = small_train();
    plan.alphas = {0.1, 0.13, 0.16, 0.19};
    plan.noise_levels = {0.0, 0.2};
    plan.seeds = {1, 2, 3};
    plan.baselines = {"ce"};
    const auto dir = scratch("grid_best");
    const auto r = cmd_grid(plan, dir);
    const auto cells = read_csv(r.cells_csv);
    const auto summary = read_csv(r.summary_csv);
    const auto& ch = cells[0];
    for (std::size_t row = 1; row < summary.size(); ++row) {
        const double noise = std::stod(summary[row][0]) / 100.0;
        double best = -1.0, best_alpha = -1.0, base_med = 0.0;
        std::vector<double> base;
        for (double a : plan.alphas) {
            std::vector<double> v;
            for (std::size_t i = 1; i < cells.size(); ++i) {
                const auto& c = cells[i];
                if (std::abs(std::stod(c[column(ch, "noise")]) - noise) > 1e-12) continue;
                if (c[column(ch, "kind")] == "ce" && a == plan.alphas[0]) base.push_back(std::stod(c[column(ch, "test_metric")]));
                if (c[column(ch, "kind")] == "method" && std::stod(c[column(ch, "alpha")]) == a) {
                    v.push_back(std::stod(c[column(ch, "test_metric")]));
                }
            }
            std::sort(v.begin(), v.end());
            if (v[1] > best) {
                best = v[1];
                best_alpha = a;
            }
        }
        std::sort(base.begin(), base.end());
        base_med = base[1];
        const auto& sh = summary[0];
        CHECK(std::stod(summary[row][column(sh, "alpha")]) == best_alpha);
        CHECK(std::stod(summary[row][column(sh, "method")]) == best);
        CHECK(std::stod(summary[row][column(sh, "delta")]) == Approx(best - base_med).epsilon(1e-12));
    }
}

TEST_CASE("baseline-only grid omits the delta column") {
    GridPlan plan;
    plan.dataset = small_spec();
    plan.train = small_train();
    plan.include_method = false;
    plan.noise_levels = {0.1};
    plan.seeds = {1};
    plan.baselines = {"ce", "focal"};
    const auto r = cmd_grid(plan, scratch("grid_base"));
    const auto header = read_csv(r.summary_csv)[0];
    CHECK(std::find(header.begin(), header.end(), "delta") == header.end());
    CHECK(std::find(header.begin(), header.end(), "focal") != header.end());
}

TEST_CASE("grid plan validation") {
    CHECK_THROWS_AS(GridPlan::from_json(json{{"alphas", json::array()}, {"include_method", true}}), ConfigError);
    CHECK_THROWS_AS(GridPlan::from_json(json{{"alphas", {0.1}}, {"seeds", json::array()}}), ConfigError);
    CHECK_THROWS_AS(GridPlan::from_json(json{{"alphas", {0.1}}, {"baselines", {"mse"}}}), ConfigError);
    CHECK_NOTHROW(GridPlan::from_json(json{{"alphas", {0.1, 0.2}}}));
}

TEST_CASE("dump round trip and indexed rejections") {
    std::stringstream ss;
    ss << "citl-probs 1 classes=3 method=aps count=4\n"
       << "0.5,0.3,0.2,0\n"
       << "0.5,0.6,0.2,1\n"
       << "0.2,0.2,0.6,7\n"
       << "0.1,0.1,0.8,2\n";
    std::vector<DumpRejection> rej;
    const auto d = read_probability_dump(ss, rej);
    CHECK(d.method == ScoreMethod::kAps);
    CHECK(d.probs.size() == 2);
    CHECK(d.rows == std::vector<std::size_t>{0, 3});
    REQUIRE(rej.size() == 2);
    CHECK(rej[0].row == 1);
    CHECK(rej[1].row == 2);

    std::stringstream out;
    write_probability_dump(d, out);
    std::vector<DumpRejection> none;
    const auto back = read_probability_dump(out, none);
    CHECK(back.probs == d.probs);
    CHECK(none.empty());

    std::stringstream bad_header("nope 1 classes=3\n");
    CHECK_THROWS_AS(read_probability_dump(bad_header, none), ConfigError);
    std::stringstream bad_cols("citl-probs 1 classes=3 method=lac count=1\n0.5,0.5,0\n");
    CHECK_THROWS_AS(read_probability_dump(bad_cols, none), ConfigError);
}

TEST_CASE("sidecar on a perfect classifier") {
    ProbabilityDump d;
    d.classes = 3;
    for (std::size_t i = 0; i < 100; ++i) {
        std::vector<double> p(3, 0.0);
        p[i % 3] = 1.0;
        d.probs.push_back(p);
        d.labels.push_back(i % 3);
    }
    const auto r = run_sidecar(d, SidecarOptions{});
    for (const auto& s : r.sets) CHECK(s.size() == 1);
    CHECK(r.pruned.empty());
    CHECK(r.coverage == 1.0);
}

TEST_CASE("sidecar on a uniform dump") {
    ProbabilityDump d;
    d.classes = 4;
    for (std::size_t i = 0; i < 50; ++i) {
        d.probs.push_back({0.25, 0.25, 0.25, 0.25});
        d.labels.push_back(i % 4);
    }
    const auto r = run_sidecar(d, SidecarOptions{});
    for (const auto& s : r.sets) CHECK(s.size() == 4);
    for (auto w : r.weights) CHECK(w == 4);
}

TEST_CASE("sidecar coverage on seeded synthetic dumps") {
    for (auto method : {ScoreMethod::kLac, ScoreMethod::kAps}) {
        std::vector<double> cov;
        for (std::uint64_t seed = 0; seed < 21; ++seed) {
            SidecarOptions opt;
            opt.alpha = 0.1;
            opt.method = method;
            opt.calibration_fraction = 1.0 / 3.0;
            const auto r = run_sidecar(synthetic_dump(3000, 8, seed), opt);
            CHECK(r.calibration_size == 1000);
            cov.push_back(r.coverage);
        }
        std::sort(cov.begin(), cov.end());
        const auto band = coverage_band(0.1, 1000);
        CHECK(cov[10] >= band.lower - 0.02);
        CHECK(cov[10] <= band.upper + 0.02);
    }
}

TEST_CASE("sidecar agrees with the in-loop validation pass") {
    const Dataset data = generate(small_spec(0.2, 5));
    auto cfg = small_train();
    const auto result = run_training(cfg, data);
    const auto stream = data.validation_stream();
    TrainerState state;
    state.params = result.best_params;
    const auto v = validate_epoch(state, stream, data.calibration.size(), cfg);

    const auto dump = dump_model_outputs(result.best_params, stream, cfg.method);
    std::stringstream ss;
    write_probability_dump(dump, ss);
    std::vector<DumpRejection> rej;
    SidecarOptions opt;
    opt.alpha = cfg.alpha;
    opt.calibration_fraction = data.spec.calibration_fraction;
    const auto r = run_sidecar(read_probability_dump(ss, rej), opt);
    CHECK(rej.empty());
    CHECK(r.calibration_size == data.calibration.size());
    CHECK(r.quantile.q_hat == v.calibrator.q_hat);
    CHECK(r.coverage == v.coverage);
    CHECK(r.uncertainty_fraction == v.uncertainty_fraction);
    CHECK(r.pruned_fraction == v.pruned_fraction);
}

TEST_CASE("report writes five figure files") {
    const auto dir = scratch("report");
    const auto gen = cmd_generate(small_spec(), dir / "data");
    RunConfig method;
    method.dataset_path = gen.dataset_path.string();
    method.train = small_train();
    RunConfig base = method;
    base.baseline = true;
    const auto m = cmd_run(method, dir);
    const auto b = cmd_run(base, dir);

    const auto single = cmd_report({m.record_path}, dir / "single");
    REQUIRE(single.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(read_csv(single[i])[0].size() > 1);
        std::ifstream in(single[i]);
        std::string header;
        std::getline(in, header);
        CHECK(header == figure_files()[i].header);
    }

    const auto both = cmd_report({m.record_path, b.record_path}, dir / "both");
    const auto overhead = read_csv(both[4]);
    REQUIRE(overhead.size() == 2);
    const auto& h = overhead[0];
    const double ms = std::stod(overhead[1][column(h, "method_step_seconds")]);
    const double bs = std::stod(overhead[1][column(h, "baseline_step_seconds")]);
    CHECK(std::stod(overhead[1][column(h, "ratio")]) == Approx(ms / bs).epsilon(1e-12));
    CHECK(ms == Approx(m.mean_step_seconds).epsilon(1e-12));
    CHECK(bs == Approx(b.mean_step_seconds).epsilon(1e-12));

    CHECK_THROWS_AS(cmd_report({}, dir / "none"), ConfigError);
}

TEST_CASE("cli exit codes and atomic output") {
    if (!std::getenv("CITL_CLI")) SKIP("CITL_CLI not set");
    const auto dir = scratch("cli");
    {
        std::ofstream(dir / "bad.json") << R"({"num_classes": 3, "noise_rate": 0.9})";
        std::ofstream(dir / "garbage.json") << "{not json";
        std::ofstream(dir / "good.json") << spec_to_json(small_spec());
        std::ofstream(dir / "run.json") << R"({"dataset": "/nonexistent.jsonl"})";
    }
    CHECK(run_cli("-o " + (dir / "out_bad").string() + " generate " + (dir / "bad.json").string()) == kExitUsage);
    CHECK_FALSE(fs::exists(dir / "out_bad"));
    CHECK(run_cli("-o " + (dir / "out_bad").string() + " generate " + (dir / "garbage.json").string()) == kExitUsage);
    CHECK(run_cli("-o " + (dir / "out").string() + " generate " + (dir / "good.json").string()) == kExitOk);
    CHECK(run_cli("-o " + (dir / "out").string() + " run " + (dir / "run.json").string()) == kExitUsage);
    CHECK(run_cli("report") == kExitUsage);
    CHECK(run_cli("frobnicate") == kExitUsage);
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(dir / "out")) {
        CHECK(e.path().extension() != ".tmp");
        ++files;
    }
    CHECK(files == 2);
}
