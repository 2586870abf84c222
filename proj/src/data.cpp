#include "citl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>

#include "citl/errors.hpp"
#include "citl/rng.hpp"
#include "json.hpp"

namespace citl {
namespace {

using nlohmann::json;

enum Stream : std::uint64_t {
    kStructure = 1,
    kPool = 2,
    kDownsample = 3,
    kSplit = 4,
    kNoise = 5,
    kTest = 6,
    kDense = 7,
    kDenseCalibration = 8,
};

void require(bool ok, const std::string& field, const std::string& why) {
    if (!ok) throw ConfigError("dataset spec field '" + field + "': " + why);
}

std::size_t ceil_fraction(double fraction, std::size_t n) {
    return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
}

struct Sampler {
    const DatasetSpec& spec;
    std::vector<std::vector<double>> centers;  // class * blobs_per_class + blob

    explicit Sampler(const DatasetSpec& s) : spec(s) {
        if (spec.generator != Generator::kGaussianBlobs) return;
        Rng rng(derive_seed(spec.seed, kStructure));
        centers.resize(spec.num_classes * spec.blobs_per_class);
        for (auto& c : centers) {
            c.resize(spec.feature_dim);
            for (double& v : c) v = rng.uniform(-spec.center_spread, spec.center_spread);
        }
    }

    LabeledExample draw(std::size_t cls, Rng& rng) const {
        LabeledExample ex;
        ex.y = ex.y_clean = cls;
        ex.is_minority = spec.is_minority(cls);
        if (spec.generator == Generator::kGaussianBlobs) {
            const auto& c = centers[cls * spec.blobs_per_class + rng.index(spec.blobs_per_class)];
            ex.x.resize(spec.feature_dim);
            for (std::size_t d = 0; d < spec.feature_dim; ++d) ex.x[d] = rng.normal(c[d], spec.cluster_std);
        } else {
            const std::size_t sectors = spec.ring_sectors;
            const double ring = static_cast<double>(cls / sectors);
            const double sector = static_cast<double>(cls % sectors);
            const double width = 2.0 * std::numbers::pi / static_cast<double>(sectors);
            const double angle = width * (sector + rng.uniform());
            const double radius = (ring + 1.0) * spec.ring_gap + rng.normal(0.0, spec.ring_noise);
            ex.x.resize(2 + spec.ring_noise_dims);
            ex.x[0] = radius * std::cos(angle);
            ex.x[1] = radius * std::sin(angle);
            for (std::size_t d = 0; d < spec.ring_noise_dims; ++d) ex.x[2 + d] = rng.normal();
        }
        return ex;
    }
};

Dataset generate_classification(const DatasetSpec& spec) {
    Sampler sampler(spec);
    Rng pool_rng(derive_seed(spec.seed, kPool));
    Rng keep_rng(derive_seed(spec.seed, kDownsample));
    Rng test_rng(derive_seed(spec.seed, kTest));

    std::vector<LabeledExample> pool;
    Dataset data;
    data.spec = spec;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        std::vector<LabeledExample> cls;
        cls.reserve(spec.per_class_n);
        for (std::size_t i = 0; i < spec.per_class_n; ++i) cls.push_back(sampler.draw(c, pool_rng));
        // Downsampling happens on the full pool, before the train/validation split.
        const std::size_t keep = spec.kept_per_class(c);
        if (keep < cls.size()) {
            keep_rng.shuffle(std::span<LabeledExample>(cls));
            cls.resize(keep);
        }
        for (auto& ex : cls) pool.push_back(std::move(ex));
        for (std::size_t i = 0; i < spec.test_per_class; ++i) data.test.push_back(sampler.draw(c, test_rng));
    }

    Rng split_rng(derive_seed(spec.seed, kSplit));
    split_rng.shuffle(std::span<LabeledExample>(pool));
    const std::size_t n_val = ceil_fraction(spec.validation_fraction, pool.size());
    const std::size_t n_cal = ceil_fraction(spec.calibration_fraction, n_val);
    auto it = pool.begin();
    data.calibration.assign(std::make_move_iterator(it), std::make_move_iterator(it + static_cast<std::ptrdiff_t>(n_cal)));
    it += static_cast<std::ptrdiff_t>(n_cal);
    data.validation.assign(std::make_move_iterator(it),
                           std::make_move_iterator(it + static_cast<std::ptrdiff_t>(n_val - n_cal)));
    it += static_cast<std::ptrdiff_t>(n_val - n_cal);
    data.train.assign(std::make_move_iterator(it), std::make_move_iterator(pool.end()));
    data.train = inject_noise(std::move(data.train), spec.noise_rate, spec.num_classes,
                              derive_seed(spec.seed, kNoise));
    return data;
}

Dataset generate_dense(const DatasetSpec& spec) {
    std::vector<DenseItem> items = dense_grid(spec);
    const std::size_t n_items = items.size();
    const std::size_t n_val = ceil_fraction(spec.grid_validation_items, n_items);
    const std::size_t n_test = ceil_fraction(spec.grid_test_items, n_items);
    require(n_val + n_test < n_items, "grid_items", "too few items for train/validation/test");

    Dataset data;
    data.spec = spec;
    // Items are drawn i.i.d., so a fixed split by position is already random.
    std::vector<DenseItem> val_items(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n_val));
    for (std::size_t i = n_val; i < n_val + n_test; ++i) {
        for (auto& cell : items[i].cells) data.test.push_back(cell);
    }
    std::vector<LabeledExample> train;
    for (std::size_t i = n_val + n_test; i < n_items; ++i) {
        for (auto& cell : items[i].cells) train.push_back(cell);
    }
    data.train = inject_noise(std::move(train), spec.noise_rate, spec.num_classes, derive_seed(spec.seed, kNoise));

    // Calibration: a share of validation items, then a share of their cells.
    Rng cal_rng(derive_seed(spec.seed, kDenseCalibration));
    std::vector<std::size_t> item_order(val_items.size());
    std::iota(item_order.begin(), item_order.end(), 0);
    cal_rng.shuffle(std::span<std::size_t>(item_order));
    const std::size_t cal_items = std::max<std::size_t>(1, ceil_fraction(spec.dense_calibration_items, val_items.size()));
    std::vector<bool> chosen_item(val_items.size(), false);
    for (std::size_t i = 0; i < cal_items && i < item_order.size(); ++i) chosen_item[item_order[i]] = true;
    for (std::size_t i = 0; i < val_items.size(); ++i) {
        auto& cells = val_items[i].cells;
        if (!chosen_item[i]) {
            for (auto& cell : cells) data.validation.push_back(cell);
            continue;
        }
        std::vector<std::size_t> cell_order(cells.size());
        std::iota(cell_order.begin(), cell_order.end(), 0);
        cal_rng.shuffle(std::span<std::size_t>(cell_order));
        const std::size_t take = std::max<std::size_t>(1, ceil_fraction(spec.dense_calibration_cells, cells.size()));
        std::vector<bool> to_cal(cells.size(), false);
        for (std::size_t k = 0; k < take; ++k) to_cal[cell_order[k]] = true;
        for (std::size_t k = 0; k < cells.size(); ++k) {
            (to_cal[k] ? data.calibration : data.validation).push_back(cells[k]);
        }
    }
    return data;
}

json spec_json(const DatasetSpec& s) {
    return json{
        {"num_classes", s.num_classes},
        {"per_class_n", s.per_class_n},
        {"test_per_class", s.test_per_class},
        {"minority_classes", s.minority_classes},
        {"minority_fraction", s.minority_fraction},
        {"noise_rate", s.noise_rate},
        {"seed", s.seed},
        {"generator", std::string(to_string(s.generator))},
        {"validation_fraction", s.validation_fraction},
        {"calibration_fraction", s.calibration_fraction},
        {"feature_dim", s.feature_dim},
        {"blobs_per_class", s.blobs_per_class},
        {"center_spread", s.center_spread},
        {"cluster_std", s.cluster_std},
        {"ring_sectors", s.ring_sectors},
        {"ring_gap", s.ring_gap},
        {"ring_noise", s.ring_noise},
        {"ring_noise_dims", s.ring_noise_dims},
        {"grid_height", s.grid_height},
        {"grid_width", s.grid_width},
        {"grid_block", s.grid_block},
        {"grid_items", s.grid_items},
        {"grid_validation_items", s.grid_validation_items},
        {"grid_test_items", s.grid_test_items},
        {"class_skew", s.class_skew},
        {"channel_noise", s.channel_noise},
        {"dense_calibration_items", s.dense_calibration_items},
        {"dense_calibration_cells", s.dense_calibration_cells},
    };
}

template <class T>
void read_field(const json& j, const char* name, T& out) {
    if (!j.contains(name)) return;
    try {
        out = j.at(name).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("dataset spec field '") + name + "': " + e.what());
    }
}

DatasetSpec spec_from(const json& j) {
    if (!j.is_object()) throw ConfigError("dataset spec must be a JSON object");
    static const std::vector<std::string> known = [] {
        std::vector<std::string> keys;
        const json defaults = spec_json(DatasetSpec{});
        for (auto& [k, v] : defaults.items()) keys.push_back(k);
        return keys;
    }();
    for (auto& [k, v] : j.items()) {
        if (std::find(known.begin(), known.end(), k) == known.end()) {
            throw ConfigError("dataset spec field '" + k + "': unknown field");
        }
    }
    DatasetSpec s;
    read_field(j, "num_classes", s.num_classes);
    read_field(j, "per_class_n", s.per_class_n);
    read_field(j, "test_per_class", s.test_per_class);
    read_field(j, "minority_classes", s.minority_classes);
    read_field(j, "minority_fraction", s.minority_fraction);
    read_field(j, "noise_rate", s.noise_rate);
    read_field(j, "seed", s.seed);
    if (j.contains("generator")) {
        if (!j["generator"].is_string()) throw ConfigError("dataset spec field 'generator': expected a string");
        s.generator = parse_generator(j["generator"].get<std::string>());
    }
    read_field(j, "validation_fraction", s.validation_fraction);
    read_field(j, "calibration_fraction", s.calibration_fraction);
    read_field(j, "feature_dim", s.feature_dim);
    read_field(j, "blobs_per_class", s.blobs_per_class);
    read_field(j, "center_spread", s.center_spread);
    read_field(j, "cluster_std", s.cluster_std);
    read_field(j, "ring_sectors", s.ring_sectors);
    read_field(j, "ring_gap", s.ring_gap);
    read_field(j, "ring_noise", s.ring_noise);
    read_field(j, "ring_noise_dims", s.ring_noise_dims);
    read_field(j, "grid_height", s.grid_height);
    read_field(j, "grid_width", s.grid_width);
    read_field(j, "grid_block", s.grid_block);
    read_field(j, "grid_items", s.grid_items);
    read_field(j, "grid_validation_items", s.grid_validation_items);
    read_field(j, "grid_test_items", s.grid_test_items);
    read_field(j, "class_skew", s.class_skew);
    read_field(j, "channel_noise", s.channel_noise);
    read_field(j, "dense_calibration_items", s.dense_calibration_items);
    read_field(j, "dense_calibration_cells", s.dense_calibration_cells);
    return s;
}

}  // namespace

std::string_view to_string(Generator g) noexcept {
    switch (g) {
        case Generator::kGaussianBlobs: return "gaussian_blobs";
        case Generator::kConcentricRings: return "concentric_rings";
        case Generator::kDenseGrid: return "dense_grid";
    }
    return "unknown";
}

Generator parse_generator(std::string_view name) {
    if (name == "gaussian_blobs" || name == "blobs") return Generator::kGaussianBlobs;
    if (name == "concentric_rings" || name == "rings") return Generator::kConcentricRings;
    if (name == "dense_grid" || name == "dense") return Generator::kDenseGrid;
    throw ConfigError("dataset spec field 'generator': unknown generator '" + std::string(name) + "'");
}

bool DatasetSpec::is_minority(std::size_t cls) const {
    return std::find(minority_classes.begin(), minority_classes.end(), cls) != minority_classes.end();
}

std::size_t DatasetSpec::kept_per_class(std::size_t cls) const {
    if (!is_minority(cls) || generator == Generator::kDenseGrid) return per_class_n;
    return static_cast<std::size_t>(std::floor(minority_fraction * static_cast<double>(per_class_n) + 1e-9));
}

void DatasetSpec::validate() const {
    require(num_classes >= 2, "num_classes", "need at least 2 classes");
    require(noise_rate >= 0.0 && noise_rate <= 0.5, "noise_rate",
            "must lie in [0, 0.5]; symmetric noise above 0.5 makes the true class unidentifiable");
    require(validation_fraction > 0.0 && validation_fraction < 1.0, "validation_fraction", "must lie in (0, 1)");
    require(calibration_fraction > 0.0 && calibration_fraction < 1.0, "calibration_fraction", "must lie in (0, 1)");
    for (std::size_t c : minority_classes) {
        require(c < num_classes, "minority_classes", "class " + std::to_string(c) + " out of range");
    }
    if (generator == Generator::kDenseGrid) {
        require(num_classes >= 3, "num_classes", "dense grid needs at least 3 classes");
        require(grid_height >= 8 && grid_width >= 8, "grid_height", "grid must be at least 8x8");
        require(grid_block >= 1 && grid_height % grid_block == 0 && grid_width % grid_block == 0, "grid_block",
                "must divide both grid dimensions");
        require(grid_items >= 3, "grid_items", "need at least 3 items");
        require(class_skew > 0.0, "class_skew", "must be positive");
        require(channel_noise >= 0.0, "channel_noise", "must be non-negative");
        require(dense_calibration_items > 0.0 && dense_calibration_items <= 1.0, "dense_calibration_items",
                "must lie in (0, 1]");
        require(dense_calibration_cells > 0.0 && dense_calibration_cells <= 1.0, "dense_calibration_cells",
                "must lie in (0, 1]");
        return;
    }
    require(per_class_n >= 1, "per_class_n", "must be positive");
    require(minority_fraction > 0.0 && minority_fraction <= 1.0, "minority_fraction", "must lie in (0, 1]");
    if (!minority_classes.empty()) {
        require(minority_fraction * static_cast<double>(per_class_n) >= 1.0 - 1e-9, "minority_fraction",
                "minority_fraction * per_class_n < 1 leaves a minority class empty");
    }
    if (generator == Generator::kGaussianBlobs) {
        require(feature_dim >= 1, "feature_dim", "must be positive");
        require(blobs_per_class >= 1, "blobs_per_class", "must be positive");
        require(cluster_std > 0.0, "cluster_std", "must be positive");
    } else {
        require(ring_sectors >= 1, "ring_sectors", "must be positive");
        require(ring_gap > 0.0, "ring_gap", "must be positive");
        require(ring_noise >= 0.0, "ring_noise", "must be non-negative");
    }
}

std::size_t Dataset::feature_dim() const {
    for (const auto* split : {&train, &validation, &calibration, &test}) {
        if (!split->empty()) return split->front().x.size();
    }
    return 0;
}

std::vector<LabeledExample> Dataset::validation_stream() const {
    std::vector<LabeledExample> stream = calibration;
    stream.insert(stream.end(), validation.begin(), validation.end());
    return stream;
}

Dataset generate(const DatasetSpec& spec) {
    spec.validate();
    return spec.generator == Generator::kDenseGrid ? generate_dense(spec) : generate_classification(spec);
}

std::vector<LabeledExample> inject_noise(std::vector<LabeledExample> examples, double rate,
                                         std::size_t num_classes, std::uint64_t seed) {
    if (!(rate >= 0.0 && rate <= 0.5)) {
        throw ConfigError("noise rate " + std::to_string(rate) +
                          " rejected: symmetric label noise must lie in [0, 0.5] to stay learnable");
    }
    if (num_classes < 2) throw ConfigError("label noise needs at least 2 classes");
    if (rate == 0.0) return examples;
    Rng rng(seed);
    for (auto& ex : examples) {
        if (!rng.bernoulli(rate)) continue;
        std::size_t other = rng.index(num_classes - 1);
        if (other >= ex.y_clean) ++other;
        ex.y = other;
        ex.is_noisy = true;
    }
    return examples;
}

std::vector<double> dense_class_probabilities(const DatasetSpec& spec) {
    std::vector<double> probs(spec.num_classes);
    double total = 0.0;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        probs[c] = std::pow(spec.class_skew, static_cast<double>(c));
        total += probs[c];
    }
    for (double& p : probs) p /= total;
    return probs;
}

std::vector<DenseItem> dense_grid(const DatasetSpec& spec) {
    DatasetSpec checked = spec;
    checked.generator = Generator::kDenseGrid;
    checked.validate();
    const std::vector<double> probs = dense_class_probabilities(spec);
    std::vector<double> cdf(probs.size());
    std::partial_sum(probs.begin(), probs.end(), cdf.begin());

    const std::size_t bh = spec.grid_height / spec.grid_block;
    const std::size_t bw = spec.grid_width / spec.grid_block;
    std::vector<DenseItem> items(spec.grid_items);
    for (std::size_t item = 0; item < spec.grid_items; ++item) {
        // Per-item seeds keep items independent of generation order.
        Rng rng(derive_seed(derive_seed(spec.seed, kDense), item));
        std::vector<std::size_t> block_class(bh * bw);
        for (auto& cls : block_class) {
            const double u = rng.uniform();
            cls = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end() - 1, u) - cdf.begin());
        }
        DenseItem& out = items[item];
        out.height = spec.grid_height;
        out.width = spec.grid_width;
        out.cells.reserve(spec.grid_height * spec.grid_width);
        for (std::size_t r = 0; r < spec.grid_height; ++r) {
            for (std::size_t c = 0; c < spec.grid_width; ++c) {
                LabeledExample ex;
                const std::size_t cls = block_class[(r / spec.grid_block) * bw + c / spec.grid_block];
                ex.y = ex.y_clean = cls;
                ex.is_minority = spec.is_minority(cls);
                ex.x.resize(2 + spec.num_classes);
                ex.x[0] = static_cast<double>(r) / static_cast<double>(spec.grid_height - 1);
                ex.x[1] = static_cast<double>(c) / static_cast<double>(spec.grid_width - 1);
                for (std::size_t k = 0; k < spec.num_classes; ++k) {
                    ex.x[2 + k] = (k == cls ? 1.0 : 0.0) + rng.normal(0.0, spec.channel_noise);
                }
                out.cells.push_back(std::move(ex));
            }
        }
    }
    return items;
}

std::string spec_to_json(const DatasetSpec& spec) { return spec_json(spec).dump(2); }

DatasetSpec spec_from_json(std::string_view json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("dataset spec is not valid JSON: ") + e.what());
    }
    DatasetSpec s = spec_from(j);
    s.validate();
    return s;
}

std::vector<std::size_t> class_counts(std::span<const LabeledExample> examples, std::size_t num_classes) {
    std::vector<std::size_t> counts(num_classes, 0);
    for (const auto& ex : examples) {
        if (ex.y < num_classes) ++counts[ex.y];
    }
    return counts;
}

void write_dataset(const Dataset& data, std::ostream& out) {
    json header{{"format", "citl-dataset"},
                {"version", kDatasetFormatVersion},
                {"rng", std::string(kRngFamily)},
                {"rng_version", kRngVersion},
                {"seed", data.spec.seed},
                {"spec", spec_json(data.spec)},
                {"counts",
                 {{"train", data.train.size()},
                  {"validation", data.validation.size()},
                  {"calibration", data.calibration.size()},
                  {"test", data.test.size()}}}};
    out << header.dump() << '\n';
    auto emit = [&](const char* split, const std::vector<LabeledExample>& xs) {
        for (const auto& ex : xs) {
            json rec{{"split", split},      {"x", ex.x},          {"y", ex.y},
                     {"y_clean", ex.y_clean}, {"noisy", ex.is_noisy}, {"minority", ex.is_minority}};
            out << rec.dump() << '\n';
        }
    };
    emit("train", data.train);
    emit("validation", data.validation);
    emit("calibration", data.calibration);
    emit("test", data.test);
}

Dataset read_dataset(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("dataset file is empty");
    json header;
    try {
        header = json::parse(line);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("dataset header is not valid JSON: ") + e.what());
    }
    if (header.value("format", "") != "citl-dataset") throw ConfigError("not a citl-dataset file");
    if (header.value("version", 0) != kDatasetFormatVersion) throw ConfigError("unsupported dataset version");
    if (header.value("rng", "") != kRngFamily || header.value("rng_version", 0) != kRngVersion) {
        throw ConfigError("dataset was generated with a different RNG stream");
    }
    Dataset data;
    data.spec = spec_from(header.at("spec"));
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const json rec = json::parse(line);
            LabeledExample ex;
            ex.x = rec.at("x").get<std::vector<double>>();
            ex.y = rec.at("y").get<std::size_t>();
            ex.y_clean = rec.at("y_clean").get<std::size_t>();
            ex.is_noisy = rec.at("noisy").get<bool>();
            ex.is_minority = rec.at("minority").get<bool>();
            const std::string split = rec.at("split").get<std::string>();
            if (split == "train") data.train.push_back(std::move(ex));
            else if (split == "validation") data.validation.push_back(std::move(ex));
            else if (split == "calibration") data.calibration.push_back(std::move(ex));
            else if (split == "test") data.test.push_back(std::move(ex));
            else throw ConfigError("unknown split '" + split + "'");
        } catch (const json::exception& e) {
            throw ConfigError("dataset line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return data;
}

void write_dataset(const Dataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open " + path + " for writing");
    write_dataset(data, out);
}

Dataset read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open dataset " + path);
    return read_dataset(in);
}

}  // namespace citl
