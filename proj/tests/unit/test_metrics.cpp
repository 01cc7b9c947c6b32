#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "../support/metric_oracles.hpp"
#include "ptbn/error.hpp"
#include "ptbn/metrics.hpp"
#include "test_util.hpp"

using namespace ptbn;

TEST(ConfidenceBin, EdgesGoUp) {
    EXPECT_EQ(confidence_bin(0.0, 10), 0u);
    EXPECT_EQ(confidence_bin(0.1, 10), 1u);
    EXPECT_EQ(confidence_bin(0.3, 10), 3u);
    EXPECT_EQ(confidence_bin(0.7, 10), 7u);
    EXPECT_EQ(confidence_bin(0.29999999, 10), 2u);
    EXPECT_EQ(confidence_bin(1.0, 10), 9u);
    EXPECT_EQ(confidence_bin(0.5, 1), 0u);
    for (std::size_t B = 1; B <= 40; ++B)
        for (std::size_t b = 0; b < B; ++b)
            EXPECT_EQ(confidence_bin(static_cast<double>(b) / static_cast<double>(B), B), b) << b << "/" << B;
}

TEST(Ece, Examples) {
    const auto onehot = Tensor::from_rows({{1, 0, 0}, {0, 0, 1}});
    EXPECT_EQ(ece(onehot, std::vector<int>{0, 2}), 0.0);
    const auto two = Tensor::from_rows({{0.9, 0.1}, {0.4, 0.6}});
    EXPECT_NEAR(ece(two, std::vector<int>{0, 0}, 10), 0.35, 1e-12);
    // uniform predictions, accuracy exactly 1/K
    const auto uniform = Tensor({4, 4}, 0.25);
    EXPECT_NEAR(ece(uniform, std::vector<int>{0, 1, 2, 3}, 10), 0.0, 1e-15);
}

TEST(Ece, BinCountsSumToN) {
    Rng rng(3);
    const auto c = oracle::random_case(rng, 2000);
    const auto bins = CalibrationBins::compute(c.probs, c.labels, c.bins);
    EXPECT_EQ(bins.total(), c.labels.size());
}

TEST(Metrics, MatchBruteForceOracles) {
    Rng rng(20240601);
    for (int t = 0; t < 200; ++t) {
        const auto c = oracle::random_case(rng, 3000);
        ASSERT_EQ(ece(c.probs, c.labels, c.bins), oracle::ece(c.probs, c.labels, c.bins)) << "case " << t;
        ASSERT_EQ(accuracy(c.probs, c.labels), oracle::accuracy(c.probs, c.labels)) << "case " << t;
        ASSERT_NEAR(brier(c.probs, c.labels), oracle::brier(c.probs, c.labels), 1e-9) << "case " << t;
        ASSERT_NEAR(nll(c.probs, c.labels), oracle::nll(c.probs, c.labels), 1e-9) << "case " << t;
    }
}

TEST(Metrics, Ranges) {
    Rng rng(5);
    for (int t = 0; t < 50; ++t) {
        const auto c = oracle::random_case(rng, 500);
        const double e = ece(c.probs, c.labels, c.bins), a = accuracy(c.probs, c.labels);
        EXPECT_GE(e, 0.0);
        EXPECT_LE(e, 1.0);
        EXPECT_GE(a, 0.0);
        EXPECT_LE(a, 1.0);
        EXPECT_GE(brier(c.probs, c.labels), 0.0);
    }
}

TEST(Metrics, InvariantToExampleOrder) {
    Rng rng(6);
    const auto c = oracle::random_case(rng, 1000);
    const std::size_t n = c.labels.size();
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm.begin(), perm.end());
    const auto p2 = c.probs.gather_rows(perm);
    std::vector<int> l2(n);
    for (std::size_t i = 0; i < n; ++i) l2[i] = c.labels[perm[i]];
    EXPECT_NEAR(ece(c.probs, c.labels, c.bins), ece(p2, l2, c.bins), 1e-12);
    EXPECT_EQ(accuracy(c.probs, c.labels), accuracy(p2, l2));
    EXPECT_NEAR(brier(c.probs, c.labels), brier(p2, l2), 1e-12);
    EXPECT_NEAR(nll(c.probs, c.labels), nll(p2, l2), 1e-12);
}

TEST(Brier, Examples) {
    EXPECT_EQ(brier(Tensor::from_rows({{0, 1, 0}}), std::vector<int>{1}), 0.0);
    for (int y = 0; y < 3; ++y) EXPECT_NEAR(brier(Tensor({1, 3}, 1.0 / 3.0), std::vector<int>{y}), 2.0 / 3.0, 1e-15);
    EXPECT_EQ(brier(Tensor({1, 2}, 0.5), std::vector<int>{1}), 0.5);
    EXPECT_NEAR(brier_per_class(Tensor({1, 3}, 1.0 / 3.0), std::vector<int>{0}), 2.0 / 9.0, 1e-15);
}

TEST(Brier, ProperScoringOnSimplexGrid) {
    Rng rng(7);
    const std::size_t n = 10000;
    for (double pi : {0.2, 0.5, 0.8}) {
        std::vector<int> labels(n);
        for (auto& y : labels) y = rng.bernoulli(pi) ? 1 : 0;
        double freq = 0;
        for (int y : labels) freq += y;
        freq /= n;
        double best_q = -1, best = 1e9;
        for (int g = 0; g <= 100; ++g) {
            const double q = g / 100.0;
            const double s = brier(Tensor({n, 2}, [&] {
                                       std::vector<Scalar> d(2 * n);
                                       for (std::size_t i = 0; i < n; ++i) d[2 * i] = 1 - q, d[2 * i + 1] = q;
                                       return d;
                                   }()),
                                   labels);
            if (s < best) best = s, best_q = q;
        }
        EXPECT_NEAR(best_q, freq, 0.0051);
        EXPECT_NEAR(best_q, pi, 0.03);
    }
}

TEST(Nll, Examples) {
    EXPECT_EQ(nll(Tensor::from_rows({{0, 1}, {1, 0}}), std::vector<int>{1, 0}), 0.0);
    EXPECT_EQ(accuracy(Tensor::from_rows({{0, 1}, {1, 0}}), std::vector<int>{1, 0}), 1.0);
    EXPECT_NEAR(nll(Tensor({3, 4}, 0.25), std::vector<int>{0, 3, 1}), std::log(4.0), 1e-15);
    // clamped rather than infinite
    EXPECT_NEAR(nll(Tensor::from_rows({{1, 0}}), std::vector<int>{1}), -std::log(1e-12), 1e-9);
}

TEST(Accuracy, FixedPredictionCountsLabelFrequency) {
    Rng rng(8);
    const std::size_t n = 997;
    std::vector<int> labels(n);
    std::size_t zeros = 0;
    for (auto& y : labels) zeros += (y = static_cast<int>(rng.below(3))) == 0;
    const auto p = Tensor({n, 3}, [&] {
        std::vector<Scalar> d(3 * n);
        for (std::size_t i = 0; i < n; ++i) d[3 * i] = 0.5, d[3 * i + 1] = 0.3, d[3 * i + 2] = 0.2;
        return d;
    }());
    EXPECT_EQ(accuracy(p, labels), static_cast<double>(zeros) / n);
}

TEST(Argmax, TiesGoToLowestIndex) {
    EXPECT_EQ(argmax_rows(Tensor::from_rows({{0.4, 0.4, 0.2}, {0.1, 0.45, 0.45}})), (std::vector<int>{0, 1}));
}

TEST(Validation, RejectsMalformedPredictions) {
    EXPECT_THROW(brier(Tensor::from_rows({{0.5, 0.6}}), std::vector<int>{0}), ShapeError);
    EXPECT_THROW(brier(Tensor::from_rows({{0.5, 0.5}}), std::vector<int>{2}), ShapeError);
    EXPECT_THROW(brier(Tensor::from_rows({{0.5, 0.5}}), std::vector<int>{0, 1}), ShapeError);
    EXPECT_THROW(ece(Tensor::from_rows({{1.5, -0.5}}), std::vector<int>{0}), ShapeError);
}

TEST(Auc, Examples) {
    const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
    EXPECT_DOUBLE_EQ(auc(s, std::vector<int>{0, 0, 1, 1}), 0.75);
    EXPECT_DOUBLE_EQ(auc(s, std::vector<int>{0, 1, 0, 1}), 1.0);
    EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 1}), 0.5);
    EXPECT_THROW(auc(s, std::vector<int>{1, 1, 1, 1}), ShapeError);
}

TEST(Auc, MatchesPairCounting) {
    Rng rng(9);
    std::vector<double> s(300);
    std::vector<int> y(300);
    for (std::size_t i = 0; i < 300; ++i) {
        y[i] = rng.bernoulli(0.4);
        s[i] = std::round((rng.normal() + y[i]) * 4) / 4;  // coarse grid to force ties
    }
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < 300; ++i)
        for (std::size_t j = 0; j < 300; ++j)
            if (y[i] == 1 && y[j] == 0) {
                pairs += 1;
                wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
            }
    EXPECT_NEAR(auc(s, y), wins / pairs, 1e-12);
}

namespace {

// Logits z and labels drawn from softmax(z): calibrated by construction.
void calibrated(std::size_t n, std::size_t K, std::uint64_t seed, Tensor& z, std::vector<int>& labels) {
    Rng rng(seed);
    z = ptbn::testing::random_tensor({n, K}, seed + 1, 2.0);
    const auto p = softmax(z);
    labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double u = rng.uniform(), acc = 0;
        int y = static_cast<int>(K) - 1;
        for (std::size_t k = 0; k < K; ++k) {
            acc += p.at(i, k);
            if (u < acc) {
                y = static_cast<int>(k);
                break;
            }
        }
        labels[i] = y;
    }
}

}  // namespace

TEST(Temperature, RecoversCalibrationAndScaling) {
    Tensor z;
    std::vector<int> labels;
    calibrated(20000, 5, 11, z, labels);
    const auto fit1 = fit_temperature(z, labels);
    EXPECT_NEAR(fit1.temperature, 1.0, 0.05);
    EXPECT_FALSE(fit1.degenerate);
    const auto fit3 = fit_temperature(scale(z, 3.0), labels);
    EXPECT_NEAR(fit3.temperature, 3.0, 0.15);
    EXPECT_LE(fit3.nll, nll_from_logits(scale(z, 3.0), labels) + 1e-12);
}

TEST(Temperature, MinimizesNll) {
    Tensor z;
    std::vector<int> labels;
    calibrated(3000, 4, 12, z, labels);
    const auto zs = scale(z, 0.4);
    const auto fit = fit_temperature(zs, labels);
    for (double f : {0.9, 0.97, 1.03, 1.1}) {
        EXPECT_LE(fit.nll, nll_from_logits(zs, labels, fit.temperature * f) + 1e-12);
    }
    EXPECT_NEAR(fit.nll, nll_from_logits(zs, labels, fit.temperature), 1e-12);
}

TEST(Temperature, NeverChangesArgmax) {
    const auto z = ptbn::testing::random_tensor({500, 6}, 13, 3.0);
    const auto base = argmax_rows(z);
    for (double t : {0.05, 0.3, 1.0, 7.0, 20.0}) EXPECT_EQ(argmax_rows(softmax(scale(z, 1.0 / t))), base);
}

TEST(Temperature, SingleClassIsDegenerate) {
    const auto z = ptbn::testing::random_tensor({50, 3}, 14);
    const auto fit = fit_temperature(z, std::vector<int>(50, 2));
    EXPECT_TRUE(fit.degenerate);
    EXPECT_EQ(fit.temperature, 1.0);
}

TEST(Temperature, StaysInRange) {
    // perfectly separable logits want T -> 0
    const auto z = Tensor::from_rows({{5, 0}, {0, 5}, {5, 0}});
    const auto fit = fit_temperature(z, std::vector<int>{0, 1, 0});
    EXPECT_GE(fit.temperature, kMinTemperature);
    EXPECT_LE(fit.temperature, kMaxTemperature);
}

TEST(Histogram, CountsAndCorrect) {
    const auto p = Tensor::from_rows({{0.9, 0.1}, {0.55, 0.45}, {0.2, 0.8}, {1.0, 0.0}});
    const auto h = confidence_histogram(p, std::vector<int>{0, 1, 1, 0});
    ASSERT_EQ(h.count.size(), 100u);
    EXPECT_EQ(h.count[90], 1u);
    EXPECT_EQ(h.count[55], 1u);
    EXPECT_EQ(h.count[80], 1u);
    EXPECT_EQ(h.count[99], 1u);
    EXPECT_EQ(h.correct[55], 0u);
    EXPECT_EQ(h.correct[80], 1u);
}

TEST(ScorePredictions, FillsRecord) {
    Rng rng(15);
    const auto c = oracle::random_case(rng, 400);
    EvalRecord r;
    score_predictions(r, c.probs, c.labels, 10);
    EXPECT_EQ(r.count, c.labels.size());
    EXPECT_EQ(r.accuracy, accuracy(c.probs, c.labels));
    EXPECT_EQ(r.ece, ece(c.probs, c.labels, 10));
    EXPECT_EQ(r.brier, brier(c.probs, c.labels));
    EXPECT_EQ(r.brier_per_class, brier_per_class(c.probs, c.labels));
    EXPECT_EQ(r.nll, nll(c.probs, c.labels));
}
