#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "citl/conformal.hpp"

namespace citl {

struct ClassCounts {
    std::size_t tp = 0;
    std::size_t tn = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;

    std::size_t total() const noexcept { return tp + tn + fp + fn; }
};

/// One-vs-rest confusion counts per class.
class ConfusionCounts {
public:
    ConfusionCounts() = default;
    explicit ConfusionCounts(std::vector<ClassCounts> per_class) : classes_(std::move(per_class)) {}

    static ConfusionCounts from_predictions(std::span<const std::size_t> predicted,
                                            std::span<const std::size_t> labels, std::size_t num_classes);

    std::size_t num_classes() const noexcept { return classes_.size(); }
    const ClassCounts& operator[](std::size_t i) const { return classes_[i]; }
    std::span<const ClassCounts> classes() const noexcept { return classes_; }

    // Every class sees the same total, and that total is positive.
    bool consistent() const noexcept;

private:
    std::vector<ClassCounts> classes_;
};

// (1/N) sum_i (TP_i + TN_i) / (TP_i + TN_i + FP_i + FN_i): one-vs-rest accuracy averaged over classes.
double macro_accuracy(const ConfusionCounts& counts);

struct MiouResult {
    double value = 0.0;
    std::vector<std::size_t> excluded_classes;  // zero union over the whole test set
};

// (1/N) sum_i TP_i / (TP_i + FP_i + FN_i) over counts concatenated across the full test set.
// Classes with zero union are dropped from the mean and listed in excluded_classes.
MiouResult miou(const ConfusionCounts& counts);

// Share of correct predictions.
double plain_accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels);

// TP_i / (TP_i + FN_i) per class; NaN for a class with no examples.
std::vector<double> per_class_recall(const ConfusionCounts& counts);

double uncertainty_fraction(std::span<const PredictionSet> sets);
double pruned_fraction(std::span<const PredictionSet> sets);

// Same two rates from set sizes only.
double uncertainty_fraction(std::span<const std::size_t> set_sizes);
double pruned_fraction(std::span<const std::size_t> set_sizes);

// max - min of per-class mean weights.
double weight_range(std::span<const double> per_class_mean_weights);

}  // namespace citl
