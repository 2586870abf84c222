#pragma once

// Split-conformal scoring, quantile fitting and prediction-set construction.
//
// Everything here operates on softmax outputs only and knows nothing about the
// model that produced them.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace citl {

enum class ScoreMethod { kLac, kAps };

std::string_view to_string(ScoreMethod method) noexcept;
ScoreMethod parse_score_method(std::string_view name);

// How an APS threshold turns into a set.
//   kThreshold          {y : aps_score(p, y) <= q̂} plus the top-ranked class.
//   kCumulativeCrossing add classes by descending probability until the running sum
//                       reaches q̂, keeping the class that crosses it.
// kCumulativeCrossing covers strictly more than the threshold rule and is kept for
// comparison; the threshold rule is the one that tracks the nominal coverage.
enum class ApsSetRule { kThreshold, kCumulativeCrossing };

inline constexpr double kProbabilityTolerance = 1e-6;

// Throws DomainError unless p has at least two entries in [0, 1] summing to 1 within tol.
void validate_probabilities(std::span<const double> p, double tol = kProbabilityTolerance);

// 1 - p[label].
double lac_score(std::span<const double> p, std::size_t label);

// Probability mass of every class ranked at or above `label` when sorted descending.
// Classes tied with the true class count as ranked at it, so the score does not depend
// on class order.
double aps_score(std::span<const double> p, std::size_t label);

double nonconformity_score(ScoreMethod method, std::span<const double> p, std::size_t label);

/// Fitted conformal threshold.
///
/// `q_hat` is the ⌈(n+1)(1-alpha)⌉-th smallest calibration score, or +infinity when
/// that order statistic does not exist (every class is then admitted).
struct CalibratedQuantile {
    double q_hat = std::numeric_limits<double>::infinity();
    double alpha = 0.1;
    std::size_t n = 0;
    ScoreMethod method = ScoreMethod::kLac;

    bool is_infinite() const noexcept { return q_hat == std::numeric_limits<double>::infinity(); }
};

// 1-based rank of the order statistic used for q̂. May exceed n.
std::size_t quantile_rank(std::size_t n, double alpha);

CalibratedQuantile fit_quantile(std::span<const double> scores, double alpha,
                                ScoreMethod method = ScoreMethod::kLac);

class PredictionSet {
public:
    PredictionSet() = default;
    explicit PredictionSet(std::vector<std::uint32_t> members);

    const std::vector<std::uint32_t>& members() const noexcept { return members_; }
    std::size_t size() const noexcept { return members_.size(); }
    bool empty() const noexcept { return members_.empty(); }
    bool contains(std::size_t label) const noexcept;
    bool is_subset_of(const PredictionSet& other) const noexcept;

    friend bool operator==(const PredictionSet&, const PredictionSet&) = default;

private:
    std::vector<std::uint32_t> members_;  // sorted ascending, unique
};

PredictionSet predict_set_lac(std::span<const double> p, const CalibratedQuantile& q);
PredictionSet predict_set_aps(std::span<const double> p, const CalibratedQuantile& q,
                              ApsSetRule rule = ApsSetRule::kThreshold);
PredictionSet predict_set(std::span<const double> p, const CalibratedQuantile& q,
                          ApsSetRule rule = ApsSetRule::kThreshold);

// |predict_set(p, q)| without materializing the set. This is the training-loop hot path.
std::size_t prediction_set_size(std::span<const double> p, const CalibratedQuantile& q,
                                ApsSetRule rule = ApsSetRule::kThreshold);

double empirical_coverage(std::span<const PredictionSet> sets, std::span<const std::size_t> labels);

struct CoverageBand {
    double lower;
    double upper;
};

// [1 - alpha, 1 - alpha + 1/(n+1)].
CoverageBand coverage_band(double alpha, std::size_t n);

/// Accumulates calibration scores one example at a time and fits a quantile.
class StreamingCalibrator {
public:
    explicit StreamingCalibrator(ScoreMethod method) : method_(method) {}

    void add(std::span<const double> p, std::size_t label) {
        scores_.push_back(nonconformity_score(method_, p, label));
    }

    std::size_t count() const noexcept { return scores_.size(); }
    std::span<const double> scores() const noexcept { return scores_; }

    CalibratedQuantile fit(double alpha) const { return fit_quantile(scores_, alpha, method_); }

private:
    ScoreMethod method_;
    std::vector<double> scores_;
};

}  // namespace citl
