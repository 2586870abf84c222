#pragma once

// Seeded synthetic datasets with controlled class imbalance and symmetric label noise.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace citl {

struct LabeledExample {
    std::vector<double> x;
    std::size_t y = 0;        // label the trainer sees
    std::size_t y_clean = 0;  // diagnostic only
    bool is_noisy = false;    // diagnostic only, == (y != y_clean)
    bool is_minority = false; // diagnostic only

    friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

enum class Generator { kGaussianBlobs, kConcentricRings, kDenseGrid };

std::string_view to_string(Generator g) noexcept;
Generator parse_generator(std::string_view name);

struct DatasetSpec {
    std::size_t num_classes = 10;
    std::size_t per_class_n = 600;     // train + validation pool per class, before downsampling
    std::size_t test_per_class = 200;  // balanced, never downsampled
    std::vector<std::size_t> minority_classes;
    double minority_fraction = 1.0;    // kept share of each minority class pool
    double noise_rate = 0.0;           // symmetric flips, training split only
    std::uint64_t seed = 0;
    Generator generator = Generator::kGaussianBlobs;

    double validation_fraction = 0.1;   // of the downsampled pool
    double calibration_fraction = 0.2;  // of the validation split

    // Gaussian blobs: class centres drawn in a cube of half-width center_spread.
    std::size_t feature_dim = 8;
    std::size_t blobs_per_class = 2;
    double center_spread = 2.0;
    double cluster_std = 1.0;

    // Concentric rings: class c sits on ring c / ring_sectors, angular sector c % ring_sectors.
    std::size_t ring_sectors = 2;
    double ring_gap = 1.0;
    double ring_noise = 0.25;
    std::size_t ring_noise_dims = 0;  // extra pure-noise features

    // Dense grid.
    std::size_t grid_height = 16;
    std::size_t grid_width = 16;
    std::size_t grid_block = 4;         // side of the constant-class blocks
    std::size_t grid_items = 60;        // total items, split train / validation / test
    double grid_validation_items = 0.2; // share of items for validation
    double grid_test_items = 0.2;
    double class_skew = 1.0;            // block class probability proportional to skew^c
    double channel_noise = 0.5;
    double dense_calibration_items = 0.1;  // share of validation items sampled for calibration
    double dense_calibration_cells = 0.1;  // share of cells sampled from those items

    // Throws ConfigError naming the offending field.
    void validate() const;

    // Examples kept per class after downsampling.
    std::size_t kept_per_class(std::size_t cls) const;
    bool is_minority(std::size_t cls) const;
};

struct Dataset {
    DatasetSpec spec;
    std::vector<LabeledExample> train;
    std::vector<LabeledExample> validation;   // remainder after the calibration prefix
    std::vector<LabeledExample> calibration;  // carved from the validation split
    std::vector<LabeledExample> test;

    std::size_t feature_dim() const;
    std::size_t num_classes() const { return spec.num_classes; }

    // Calibration examples followed by the validation remainder: the stream a validation
    // epoch walks, with the calibration prefix first.
    std::vector<LabeledExample> validation_stream() const;
};

// One dense item: grid_height x grid_width cells in row-major order.
struct DenseItem {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<LabeledExample> cells;
};

Dataset generate(const DatasetSpec& spec);

// Flips each label independently with probability `rate` to a uniformly chosen other class.
// Keeps y_clean and updates is_noisy. rate must lie in [0, 0.5].
std::vector<LabeledExample> inject_noise(std::vector<LabeledExample> examples, double rate,
                                         std::size_t num_classes, std::uint64_t seed);

// Items for the dense task. Each block of grid_block x grid_block cells shares one class
// drawn from the skewed class distribution; features are normalized coordinates plus one
// noisy channel per class.
std::vector<DenseItem> dense_grid(const DatasetSpec& spec);

// Per-class class-draw probabilities for the dense grid.
std::vector<double> dense_class_probabilities(const DatasetSpec& spec);

// Export format (JSON lines):
//   line 1: {"format":"citl-dataset","version":1,"rng":"mt19937_64","rng_version":1,
//            "seed":...,"spec":{...},"counts":{...}}
//   then one record per example:
//   {"split":"train","x":[...],"y":3,"y_clean":3,"noisy":false,"minority":false}
// Splits appear in the order train, validation, calibration, test.
inline constexpr int kDatasetFormatVersion = 1;

void write_dataset(const Dataset& data, std::ostream& out);
Dataset read_dataset(std::istream& in);
void write_dataset(const Dataset& data, const std::string& path);
Dataset read_dataset(const std::string& path);

// Spec <-> JSON text, used by the CLI and the dataset header.
std::string spec_to_json(const DatasetSpec& spec);
DatasetSpec spec_from_json(std::string_view json_text);

// Per-class counts of y over a split.
std::vector<std::size_t> class_counts(std::span<const LabeledExample> examples, std::size_t num_classes);

}  // namespace citl
