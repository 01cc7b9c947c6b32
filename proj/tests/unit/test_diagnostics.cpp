#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "ptbn/diagnostics.hpp"
#include "ptbn/error.hpp"
#include "test_util.hpp"

using namespace ptbn;

namespace {

Tensor normal_rows(std::size_t n, std::vector<double> mean, std::vector<double> sd, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t C = mean.size();
    Tensor t({n, C});
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < C; ++c) d[i * C + c] = mean[c] + sd[c] * rng.normal();
    return t;
}

ActivationSummary with_covariance(std::vector<Scalar> cov, std::size_t C) {
    ActivationSummary s;
    s.mean.assign(C, 0.0);
    s.var.resize(C);
    for (std::size_t c = 0; c < C; ++c) s.var[c] = cov[c * C + c];
    s.covariance = std::move(cov);
    return s;
}

// Largest eigenvalues by power iteration with Hotelling deflation.
std::vector<double> power_eigenvalues(std::vector<double> a, std::size_t n) {
    std::vector<double> out;
    for (std::size_t k = 0; k < n; ++k) {
        std::vector<double> v(n, 1.0), w(n);
        v[k % n] += 0.5;
        double lambda = 0;
        for (int it = 0; it < 20000; ++it) {
            for (std::size_t i = 0; i < n; ++i) {
                w[i] = 0;
                for (std::size_t j = 0; j < n; ++j) w[i] += a[i * n + j] * v[j];
            }
            double norm = 0;
            for (double x : w) norm += x * x;
            norm = std::sqrt(norm);
            if (norm == 0) break;
            double next = 0;
            for (std::size_t i = 0; i < n; ++i) next += v[i] * w[i];
            double vv = 0;
            for (double x : v) vv += x * x;
            next /= vv;
            for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / norm;
            if (std::abs(next - lambda) < 1e-15 * std::max(1.0, std::abs(next)) && it > 50) {
                lambda = next;
                break;
            }
            lambda = next;
        }
        out.push_back(lambda);
        double vv = 0;
        for (double x : v) vv += x * x;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) a[i * n + j] -= lambda * v[i] * v[j] / vv;
    }
    std::sort(out.rbegin(), out.rend());
    return out;
}

double normal_logpdf(double x, double m, double sd) {
    const double z = (x - m) / sd;
    return -0.5 * z * z - std::log(sd) - 0.5 * std::log(2 * std::numbers::pi);
}

}  // namespace

TEST(Summarize, MomentsAndCovariance) {
    const auto rows = normal_rows(500, {1.0, -2.0, 0.5}, {1.0, 0.5, 2.0}, 1);
    const auto s = summarize_activations(rows, "penultimate", true, 100, 3);
    EXPECT_EQ(s.count, 500u);
    EXPECT_EQ(s.sample_rows, 100u);
    for (std::size_t a = 0; a < 3; ++a) {
        double m = 0;
        for (std::size_t i = 0; i < 500; ++i) m += rows.at(i, a);
        m /= 500;
        EXPECT_NEAR(s.mean[a], m, 1e-12);
        for (std::size_t b = 0; b < 3; ++b) {
            double mb = 0, c = 0;
            for (std::size_t i = 0; i < 500; ++i) mb += rows.at(i, b);
            mb /= 500;
            for (std::size_t i = 0; i < 500; ++i) c += (rows.at(i, a) - m) * (rows.at(i, b) - mb);
            EXPECT_NEAR(s.covariance[a * 3 + b], c / 500, 1e-10);
            EXPECT_EQ(s.covariance[a * 3 + b], s.covariance[b * 3 + a]);
        }
        EXPECT_NEAR(s.var[a], s.covariance[a * 3 + a], 1e-12);
    }
    const auto diag = summarize_activations(rows, "norm0", false);
    EXPECT_FALSE(diag.has_covariance());
    EXPECT_EQ(diag.sample_rows, 500u);
}

TEST(Summarize, ReservoirKeepsRealRowsDeterministically) {
    const auto rows = normal_rows(1000, {0, 0}, {1, 1}, 2);
    const auto a = summarize_activations(rows, "x", false, 64, 9);
    const auto b = summarize_activations(rows, "x", false, 64, 9);
    const auto c = summarize_activations(rows, "x", false, 64, 10);
    EXPECT_EQ(a.samples, b.samples);
    EXPECT_NE(a.samples, c.samples);
    for (std::size_t r = 0; r < 64; ++r) {
        bool found = false;
        for (std::size_t i = 0; i < 1000 && !found; ++i)
            found = rows.at(i, 0) == a.samples[2 * r] && rows.at(i, 1) == a.samples[2 * r + 1];
        EXPECT_TRUE(found);
    }
}

TEST(Discrepancy, OneDimensionalClosedForm) {
    const auto p = summarize_activations(normal_rows(10000, {0.0}, {1.0}, 3), "x", true);
    const auto qrows = normal_rows(10000, {1.0}, {1.0}, 4);
    const auto q = summarize_activations(qrows, "x", true);
    EXPECT_NEAR(gaussian_kl_discrepancy(p, q, qrows), 0.5, 0.05);
    const auto pd = summarize_activations(normal_rows(10000, {0.0}, {1.0}, 3), "x", false);
    const auto qd = summarize_activations(qrows, "x", false);
    EXPECT_NEAR(gaussian_kl_discrepancy(pd, qd, qrows), 0.5, 0.05);
}

TEST(Discrepancy, IdenticalSummariesGiveZero) {
    const auto rows = normal_rows(4000, {0.3, -1.0}, {1.0, 2.0}, 5);
    const auto s = summarize_activations(rows, "x", true);
    EXPECT_NEAR(gaussian_kl_discrepancy(s, s, rows), 0.0, 1e-12);
}

TEST(Discrepancy, SameDistributionWithinMonteCarloError) {
    const auto a = normal_rows(5000, {0.0}, {1.0}, 6);
    const auto b = normal_rows(5000, {0.0}, {1.0}, 7);
    const auto sa = summarize_activations(a, "x", false);
    const auto sb = summarize_activations(b, "x", false);
    const double est = gaussian_kl_discrepancy(sa, sb, b);
    std::vector<double> ratio;
    for (std::size_t i = 0; i < 5000; ++i) {
        const double x = b.at(i, 0);
        ratio.push_back(normal_logpdf(x, sb.mean[0], std::sqrt(sb.var[0])) -
                        normal_logpdf(x, sa.mean[0], std::sqrt(sa.var[0])));
    }
    double m = 0, q = 0;
    for (double r : ratio) m += r;
    m /= ratio.size();
    for (double r : ratio) q += (r - m) * (r - m);
    const double stderr_ = std::sqrt(q / (ratio.size() - 1) / ratio.size());
    EXPECT_NEAR(est, m, 1e-6);  // the independent estimate (ridge is negligible at unit variance)
    EXPECT_LE(std::abs(est), 3 * stderr_ + 1e-3);
}

TEST(Discrepancy, FullCovarianceMatchesClosedFormKl) {
    // q = N(mq, Sq), p = N(0, I) with correlated q
    Rng rng(8);
    const std::size_t n = 40000;
    Tensor qr({n, 2});
    auto d = qr.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
        const double z1 = rng.normal(), z2 = rng.normal();
        d[2 * i] = 0.5 + 1.2 * z1;
        d[2 * i + 1] = -0.3 + 0.6 * z1 + 0.8 * z2;
    }
    const auto p = summarize_activations(normal_rows(n, {0, 0}, {1, 1}, 9), "x", true);
    const auto q = summarize_activations(qr, "x", true);
    // closed form KL(q || p) between the two moment-matched normals
    const double* Sq = q.covariance.data();
    const double* Sp = p.covariance.data();
    const double detp = Sp[0] * Sp[3] - Sp[1] * Sp[2], detq = Sq[0] * Sq[3] - Sq[1] * Sq[2];
    const double ip[4] = {Sp[3] / detp, -Sp[1] / detp, -Sp[2] / detp, Sp[0] / detp};
    const double tr = ip[0] * Sq[0] + ip[1] * Sq[2] + ip[2] * Sq[1] + ip[3] * Sq[3];
    const double dm[2] = {p.mean[0] - q.mean[0], p.mean[1] - q.mean[1]};
    const double maha = dm[0] * (ip[0] * dm[0] + ip[1] * dm[1]) + dm[1] * (ip[2] * dm[0] + ip[3] * dm[1]);
    const double kl = 0.5 * (tr + maha - 2 + std::log(detp / detq));
    EXPECT_NEAR(gaussian_kl_discrepancy(p, q, qr), kl, 0.02);
    EXPECT_GT(kl, 0.2);
}

TEST(Discrepancy, ShapeChecks) {
    const auto a = summarize_activations(normal_rows(10, {0, 0}, {1, 1}, 1), "x", true);
    const auto b = summarize_activations(normal_rows(10, {0, 0, 0}, {1, 1, 1}, 1), "x", true);
    EXPECT_THROW(gaussian_kl_discrepancy(a, b, normal_rows(5, {0, 0, 0}, {1, 1, 1}, 1)), ShapeError);
    EXPECT_THROW(gaussian_kl_discrepancy(a, a, normal_rows(5, {0, 0, 0}, {1, 1, 1}, 1)), ShapeError);
}

TEST(Eigenspectrum, Examples) {
    std::vector<Scalar> id(25, 0.0);
    for (std::size_t i = 0; i < 5; ++i) id[i * 6] = 1.0;
    for (Scalar v : covariance_eigenspectrum(with_covariance(id, 5))) EXPECT_NEAR(v, 1.0, 1e-12);
    const auto d = covariance_eigenspectrum(with_covariance({1, 0, 0, 3}, 2));
    EXPECT_NEAR(d[0], 3.0, 1e-12);
    EXPECT_NEAR(d[1], 1.0, 1e-12);
}

TEST(Eigenspectrum, MatchesPowerIterationAndTrace) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto a = ptbn::testing::random_tensor({4, 6}, 100 + seed);
        std::vector<Scalar> cov(16, 0.0);
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 4; ++j)
                for (std::size_t k = 0; k < 6; ++k) cov[i * 4 + j] += a.at(i, k) * a.at(j, k) / 6.0;
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < i; ++j) cov[i * 4 + j] = cov[j * 4 + i];
        const auto eig = covariance_eigenspectrum(with_covariance(cov, 4));
        const auto ref = power_eigenvalues(cov, 4);
        double trace = 0, sum = 0;
        for (std::size_t i = 0; i < 4; ++i) {
            EXPECT_NEAR(eig[i], ref[i], 1e-6) << "seed " << seed << " index " << i;
            EXPECT_GE(eig[i], 0.0);
            trace += cov[i * 5];
            sum += eig[i];
        }
        EXPECT_NEAR(sum, trace, 1e-8);
        EXPECT_TRUE(std::is_sorted(eig.rbegin(), eig.rend()));
    }
}

TEST(Eigenspectrum, RankDeficientAndErrors) {
    // rank one: one positive eigenvalue, the rest clamped to zero
    const auto r1 = covariance_eigenspectrum(with_covariance({1, 2, 2, 4}, 2));
    EXPECT_NEAR(r1[0], 5.0, 1e-12);
    EXPECT_EQ(r1[1], 0.0);
    EXPECT_THROW(covariance_eigenspectrum(with_covariance({1, 0.5, 0.4, 1}, 2)), NumericalError);
    EXPECT_THROW(covariance_eigenspectrum(with_covariance({1, 2, 2, 1}, 2)), NumericalError);
    ActivationSummary diag;
    diag.mean = {0.0};
    diag.var = {1.0};
    EXPECT_THROW(covariance_eigenspectrum(diag), ShapeError);
}

TEST(Histogram, Examples) {
    const auto eq = summarize_activations(Tensor({50, 2}, 0.7), "x", false);
    const std::vector<std::size_t> ch{0, 1};
    const auto h = histogram_dump(eq, ch, 10);
    for (const auto& row : h.counts) EXPECT_EQ(std::count_if(row.begin(), row.end(), [](auto c) { return c > 0; }), 1);

    Rng rng(11);
    const std::size_t n = 20000;
    Tensor u({n, 1});
    for (auto& v : u.mutable_data()) v = rng.uniform(-2.0, 3.0);
    const auto su = summarize_activations(u, "x", false, n);
    const std::vector<std::size_t> c0{0};
    const auto hu = histogram_dump(su, c0, 25, std::pair{-2.0, 3.0});
    std::size_t total = 0;
    for (auto c : hu.counts[0]) {
        total += c;
        EXPECT_NEAR(static_cast<double>(c), n / 25.0, 4 * std::sqrt(n / 25.0));
    }
    EXPECT_EQ(total, n);
    EXPECT_DOUBLE_EQ(hu.bin_width(), 0.2);
}

TEST(Histogram, TopValueInLastBinAndSharedRange) {
    const auto a = summarize_activations(Tensor::from_rows({{0.0}, {1.0}, {0.5}}), "x", false);
    const auto b = summarize_activations(Tensor::from_rows({{-1.0}, {4.0}}), "x", false);
    const std::vector<std::size_t> c0{0};
    const auto h = histogram_dump(a, c0, 4);
    EXPECT_EQ(h.counts[0], (std::vector<std::size_t>{1, 0, 1, 1}));
    const ActivationSummary* both[] = {&a, &b};
    const auto r = shared_range(both, c0);
    EXPECT_EQ(r.first, -1.0);
    EXPECT_EQ(r.second, 4.0);
    const auto ha = histogram_dump(a, c0, 5, r);
    EXPECT_EQ(ha.counts[0], (std::vector<std::size_t>{0, 2, 1, 0, 0}));  // 1.0 sits on an edge
    const std::vector<std::size_t> bad{3};
    EXPECT_THROW(histogram_dump(a, bad, 4), ShapeError);
}

TEST(Spearman, Properties) {
    const std::vector<double> x{1, 2, 3, 4, 5};
    EXPECT_NEAR(spearman(x, std::vector<double>{2, 4, 9, 16, 100}), 1.0, 1e-12);
    EXPECT_NEAR(spearman(x, std::vector<double>{5, 4, 3, 2, 1}), -1.0, 1e-12);
    // ties take average ranks: ranks of b are 1.5, 1.5, 3, 4, 5
    const std::vector<double> b{1, 1, 2, 3, 4};
    const double rb[] = {1.5, 1.5, 3, 4, 5}, ra[] = {1, 2, 3, 4, 5};
    double mb = 3, ma = 3, sab = 0, saa = 0, sbb = 0;
    for (int i = 0; i < 5; ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    EXPECT_NEAR(spearman(x, b), sab / std::sqrt(saa * sbb), 1e-12);
    EXPECT_THROW(spearman(x, std::vector<double>{1, 2}), ShapeError);
}
