#include "citl/conformal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "citl/errors.hpp"

namespace citl {
namespace {

void check_label(std::span<const double> p, std::size_t label) {
    if (label >= p.size()) {
        throw DomainError("label " + std::to_string(label) + " out of range for " +
                          std::to_string(p.size()) + " classes");
    }
}

// Class indices by descending probability; equal probabilities keep index order.
void rank_descending(std::span<const double> p, std::vector<std::uint32_t>& order) {
    order.resize(p.size());
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return p[a] > p[b]; });
}

// APS score of every class. Tied classes share the cumulative sum at the end of their group.
void aps_scores_all(std::span<const double> p, std::vector<std::uint32_t>& order,
                    std::vector<double>& out) {
    rank_descending(p, order);
    out.assign(p.size(), 0.0);
    double running = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && p[order[j]] == p[order[i]]) {
            running += p[order[j]];
            ++j;
        }
        for (std::size_t k = i; k < j; ++k) out[order[k]] = running;
        i = j;
    }
}

}  // namespace

std::string_view to_string(ScoreMethod method) noexcept {
    return method == ScoreMethod::kLac ? "lac" : "aps";
}

ScoreMethod parse_score_method(std::string_view name) {
    if (name == "lac" || name == "LAC") return ScoreMethod::kLac;
    if (name == "aps" || name == "APS") return ScoreMethod::kAps;
    throw ConfigError("unknown non-conformity method '" + std::string(name) + "' (expected lac or aps)");
}

void validate_probabilities(std::span<const double> p, double tol) {
    if (p.size() < 2) throw DomainError("probability vector needs at least 2 classes");
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!std::isfinite(p[i]) || p[i] < 0.0 || p[i] > 1.0) {
            throw DomainError("probability " + std::to_string(i) + " = " + std::to_string(p[i]) +
                              " outside [0, 1]");
        }
        sum += p[i];
    }
    if (std::abs(sum - 1.0) > tol) {
        throw DomainError("probabilities sum to " + std::to_string(sum) + ", expected 1");
    }
}

double lac_score(std::span<const double> p, std::size_t label) {
    check_label(p, label);
    return 1.0 - p[label];
}

double aps_score(std::span<const double> p, std::size_t label) {
    check_label(p, label);
    std::vector<std::uint32_t> order;
    std::vector<double> scores;
    aps_scores_all(p, order, scores);
    return scores[label];
}

double nonconformity_score(ScoreMethod method, std::span<const double> p, std::size_t label) {
    return method == ScoreMethod::kLac ? lac_score(p, label) : aps_score(p, label);
}

std::size_t quantile_rank(std::size_t n, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) {
        throw DomainError("alpha must lie in (0, 1), got " + std::to_string(alpha));
    }
    const double level = static_cast<double>(n + 1) * (1.0 - alpha);
    // Absorb rounding in the product so that e.g. 10 * 0.9 gives rank 9, not 10.
    const double k = std::ceil(level - 1e-10 * std::max(1.0, level));
    return static_cast<std::size_t>(std::max(1.0, k));
}

CalibratedQuantile fit_quantile(std::span<const double> scores, double alpha, ScoreMethod method) {
    if (scores.empty()) throw CalibrationError("cannot fit a quantile without calibration scores");
    const std::size_t n = scores.size();
    const std::size_t k = quantile_rank(n, alpha);
    for (double s : scores) {
        if (!std::isfinite(s)) throw DomainError("non-finite calibration score");
    }

    CalibratedQuantile q;
    q.alpha = alpha;
    q.n = n;
    q.method = method;
    if (k > n) {
        q.q_hat = std::numeric_limits<double>::infinity();
        return q;
    }
    std::vector<double> sorted(scores.begin(), scores.end());
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k - 1), sorted.end());
    q.q_hat = sorted[k - 1];
    return q;
}

PredictionSet::PredictionSet(std::vector<std::uint32_t> members) : members_(std::move(members)) {
    std::sort(members_.begin(), members_.end());
    members_.erase(std::unique(members_.begin(), members_.end()), members_.end());
}

bool PredictionSet::contains(std::size_t label) const noexcept {
    return std::binary_search(members_.begin(), members_.end(), static_cast<std::uint32_t>(label));
}

bool PredictionSet::is_subset_of(const PredictionSet& other) const noexcept {
    return std::includes(other.members_.begin(), other.members_.end(), members_.begin(), members_.end());
}

PredictionSet predict_set_lac(std::span<const double> p, const CalibratedQuantile& q) {
    std::vector<std::uint32_t> members;
    for (std::size_t y = 0; y < p.size(); ++y) {
        if (1.0 - p[y] <= q.q_hat) members.push_back(static_cast<std::uint32_t>(y));
    }
    return PredictionSet(std::move(members));
}

PredictionSet predict_set_aps(std::span<const double> p, const CalibratedQuantile& q, ApsSetRule rule) {
    std::vector<std::uint32_t> order;
    std::vector<std::uint32_t> members;
    if (rule == ApsSetRule::kCumulativeCrossing) {
        rank_descending(p, order);
        double running = 0.0;
        for (std::uint32_t y : order) {
            members.push_back(y);
            running += p[y];
            if (running >= q.q_hat) break;
        }
        return PredictionSet(std::move(members));
    }

    std::vector<double> scores;
    aps_scores_all(p, order, scores);
    for (std::size_t y = 0; y < p.size(); ++y) {
        if (scores[y] <= q.q_hat) members.push_back(static_cast<std::uint32_t>(y));
    }
    if (!p.empty()) members.push_back(order.front());
    return PredictionSet(std::move(members));
}

PredictionSet predict_set(std::span<const double> p, const CalibratedQuantile& q, ApsSetRule rule) {
    return q.method == ScoreMethod::kLac ? predict_set_lac(p, q) : predict_set_aps(p, q, rule);
}

std::size_t prediction_set_size(std::span<const double> p, const CalibratedQuantile& q, ApsSetRule rule) {
    if (q.method == ScoreMethod::kLac) {
        std::size_t count = 0;
        for (double v : p) count += (1.0 - v <= q.q_hat) ? 1 : 0;
        return count;
    }
    if (q.is_infinite()) return p.size();
    return predict_set_aps(p, q, rule).size();
}

double empirical_coverage(std::span<const PredictionSet> sets, std::span<const std::size_t> labels) {
    if (sets.size() != labels.size()) {
        throw DomainError("coverage: " + std::to_string(sets.size()) + " sets but " +
                          std::to_string(labels.size()) + " labels");
    }
    if (sets.empty()) throw DomainError("coverage of an empty set list");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < sets.size(); ++i) hits += sets[i].contains(labels[i]) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(sets.size());
}

CoverageBand coverage_band(double alpha, std::size_t n) {
    return {1.0 - alpha, 1.0 - alpha + 1.0 / static_cast<double>(n + 1)};
}

}  // namespace citl
