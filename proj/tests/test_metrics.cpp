#include "catch_amalgamated.hpp"

#include <cmath>
#include <vector>

#include "citl/metrics.hpp"
#include "citl/rng.hpp"

using namespace citl;
using Catch::Approx;

namespace {

ConfusionCounts counts(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& y, std::size_t c) {
    return ConfusionCounts::from_predictions(pred, y, c);
}

}  // namespace

TEST_CASE("perfect predictions") {
    for (std::size_t c = 2; c < 8; ++c) {
        std::vector<std::size_t> y;
        for (std::size_t i = 0; i < 5 * c; ++i) y.push_back(i % c);
        const auto cc = counts(y, y, c);
        CHECK(macro_accuracy(cc) == 1.0);
        CHECK(miou(cc).value == 1.0);
    }
}

TEST_CASE("two classes, every prediction class 0") {
    const auto cc = counts({0, 0, 0, 0}, {0, 1, 0, 1}, 2);
    CHECK(cc[0].tp == 2);
    CHECK(cc[0].fp == 2);
    CHECK(cc[1].fn == 2);
    CHECK(cc[1].tn == 2);
    CHECK(macro_accuracy(cc) == 0.5);
}

TEST_CASE("iou term from hand counts") {
    ConfusionCounts cc({ClassCounts{49, 900, 30, 21}, ClassCounts{49, 900, 30, 21}});
    CHECK(miou(cc).value == Approx(0.49));
}

TEST_CASE("classes absent from predictions and labels are excluded from miou") {
    const auto cc = counts({0, 1, 0}, {0, 1, 1}, 3);
    const auto r = miou(cc);
    CHECK(r.excluded_classes == std::vector<std::size_t>{2});
    CHECK(r.value == Approx((1.0 / 2.0 + 1.0 / 2.0) / 2.0));
}

TEST_CASE("confusion counts are consistent") {
    Rng rng(4);
    std::vector<std::size_t> p, y;
    for (int i = 0; i < 200; ++i) {
        p.push_back(rng.index(5));
        y.push_back(rng.index(5));
    }
    const auto cc = counts(p, y, 5);
    CHECK(cc.consistent());
    for (const auto& k : cc.classes()) CHECK(k.total() == 200);
}

TEST_CASE("random three-class macro accuracy against a direct count") {
    Rng rng(21);
    for (int t = 0; t < 100; ++t) {
        std::vector<std::size_t> p, y;
        const std::size_t n = 1 + rng.index(50);
        for (std::size_t i = 0; i < n; ++i) {
            p.push_back(rng.index(3));
            y.push_back(rng.index(3));
        }
        double sum = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            std::size_t right = 0;
            for (std::size_t i = 0; i < n; ++i) right += (p[i] == c) == (y[i] == c);
            sum += static_cast<double>(right) / static_cast<double>(n);
        }
        CHECK(macro_accuracy(counts(p, y, 3)) == Approx(sum / 3.0).epsilon(1e-14));
    }
}

TEST_CASE("plain accuracy and recall") {
    CHECK(plain_accuracy(std::vector<std::size_t>{0, 1, 1}, std::vector<std::size_t>{0, 1, 0}) == Approx(2.0 / 3.0));
    const auto r = per_class_recall(counts({0, 1, 1}, {0, 1, 0}, 3));
    CHECK(r[0] == 0.5);
    CHECK(r[1] == 1.0);
    CHECK(std::isnan(r[2]));
}

TEST_CASE("uncertainty fraction") {
    CHECK(uncertainty_fraction(std::vector<PredictionSet>{PredictionSet({0}), PredictionSet({1})}) == 0.0);
    CHECK(uncertainty_fraction(std::vector<PredictionSet>{PredictionSet({0, 1}), PredictionSet({0, 1})}) == 1.0);
    const std::vector<PredictionSet> mixed{PredictionSet(), PredictionSet({0}), PredictionSet({0, 1})};
    CHECK(uncertainty_fraction(mixed) == Approx(1.0 / 3.0));
    CHECK(pruned_fraction(mixed) == Approx(1.0 / 3.0));
    CHECK(pruned_fraction(std::vector<std::size_t>{1, 2, 3}) == 0.0);
    CHECK(uncertainty_fraction(std::vector<std::size_t>{0, 1, 2}) == Approx(1.0 / 3.0));
}

TEST_CASE("weight range") {
    CHECK(weight_range(std::vector<double>{2.0, 2.0, 2.0}) == 0.0);
    CHECK(weight_range(std::vector<double>{3.5, 1.0, 2.0}) == 2.5);
}
