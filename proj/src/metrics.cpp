#include "citl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "citl/errors.hpp"

namespace citl {

ConfusionCounts ConfusionCounts::from_predictions(std::span<const std::size_t> predicted,
                                                  std::span<const std::size_t> labels, std::size_t num_classes) {
    if (predicted.size() != labels.size()) throw DomainError("predictions and labels differ in length");
    std::vector<std::size_t> tp(num_classes, 0), pred_count(num_classes, 0), label_count(num_classes, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (predicted[i] >= num_classes || labels[i] >= num_classes) throw DomainError("class index out of range");
        ++pred_count[predicted[i]];
        ++label_count[labels[i]];
        if (predicted[i] == labels[i]) ++tp[labels[i]];
    }
    std::vector<ClassCounts> out(num_classes);
    const std::size_t n = labels.size();
    for (std::size_t c = 0; c < num_classes; ++c) {
        out[c].tp = tp[c];
        out[c].fp = pred_count[c] - tp[c];
        out[c].fn = label_count[c] - tp[c];
        out[c].tn = n - out[c].tp - out[c].fp - out[c].fn;
    }
    return ConfusionCounts(std::move(out));
}

bool ConfusionCounts::consistent() const noexcept {
    if (classes_.empty()) return false;
    const std::size_t total = classes_.front().total();
    return total > 0 && std::all_of(classes_.begin(), classes_.end(),
                                    [&](const ClassCounts& c) { return c.total() == total; });
}

double macro_accuracy(const ConfusionCounts& counts) {
    if (counts.num_classes() == 0) throw DomainError("macro accuracy of zero classes");
    double sum = 0.0;
    for (const auto& c : counts.classes()) {
        if (c.total() == 0) throw DomainError("macro accuracy: class with no counts");
        sum += static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
    }
    return sum / static_cast<double>(counts.num_classes());
}

MiouResult miou(const ConfusionCounts& counts) {
    MiouResult result;
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < counts.num_classes(); ++i) {
        const auto& c = counts[i];
        const std::size_t uni = c.tp + c.fp + c.fn;
        if (uni == 0) {
            result.excluded_classes.push_back(i);
            continue;
        }
        sum += static_cast<double>(c.tp) / static_cast<double>(uni);
        ++used;
    }
    if (used == 0) throw DomainError("mIoU undefined: every class has zero union");
    result.value = sum / static_cast<double>(used);
    return result;
}

double plain_accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
    if (predicted.size() != labels.size() || labels.empty()) throw DomainError("accuracy needs matching, non-empty inputs");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<double> per_class_recall(const ConfusionCounts& counts) {
    std::vector<double> out(counts.num_classes());
    for (std::size_t i = 0; i < counts.num_classes(); ++i) {
        const auto& c = counts[i];
        out[i] = (c.tp + c.fn) == 0 ? std::numeric_limits<double>::quiet_NaN()
                                    : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    }
    return out;
}

double uncertainty_fraction(std::span<const PredictionSet> sets) {
    if (sets.empty()) throw DomainError("uncertainty fraction of no sets");
    const auto n = std::count_if(sets.begin(), sets.end(), [](const PredictionSet& s) { return s.size() > 1; });
    return static_cast<double>(n) / static_cast<double>(sets.size());
}

double pruned_fraction(std::span<const PredictionSet> sets) {
    if (sets.empty()) throw DomainError("pruned fraction of no sets");
    const auto n = std::count_if(sets.begin(), sets.end(), [](const PredictionSet& s) { return s.empty(); });
    return static_cast<double>(n) / static_cast<double>(sets.size());
}

double uncertainty_fraction(std::span<const std::size_t> set_sizes) {
    if (set_sizes.empty()) throw DomainError("uncertainty fraction of no sets");
    const auto n = std::count_if(set_sizes.begin(), set_sizes.end(), [](std::size_t s) { return s > 1; });
    return static_cast<double>(n) / static_cast<double>(set_sizes.size());
}

double pruned_fraction(std::span<const std::size_t> set_sizes) {
    if (set_sizes.empty()) throw DomainError("pruned fraction of no sets");
    const auto n = std::count(set_sizes.begin(), set_sizes.end(), std::size_t{0});
    return static_cast<double>(n) / static_cast<double>(set_sizes.size());
}

double weight_range(std::span<const double> per_class_mean_weights) {
    if (per_class_mean_weights.empty()) throw DomainError("weight range of no classes");
    const auto [lo, hi] = std::minmax_element(per_class_mean_weights.begin(), per_class_mean_weights.end());
    return *hi - *lo;
}

}  // namespace citl
