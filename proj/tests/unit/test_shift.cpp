#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "ptbn/data.hpp"
#include "ptbn/error.hpp"
#include "ptbn/shift.hpp"
#include "test_util.hpp"

using namespace ptbn;

namespace {

Dataset small_images(std::size_t n = 64, std::uint64_t seed = 1) {
    ImageSpec s;
    s.n_train = n;
    s.n_val = 2;
    s.n_test = 2;
    s.seed = seed;
    return make_images(s).train;
}

DataSplits small_tabular() {
    TabularSpec s;
    s.n_train = 2000;
    s.n_val = 10;
    s.n_test = 4000;
    return make_tabular(s);
}

Tensor zeros_image(std::size_t n) { return Tensor({n, 3, 16, 16}, 0.0); }

double stddev(std::span<const Scalar> v) {
    double m = 0, q = 0;
    for (Scalar x : v) m += x;
    m /= static_cast<double>(v.size());
    for (Scalar x : v) q += (x - m) * (x - m);
    return std::sqrt(q / static_cast<double>(v.size()));
}

}  // namespace

TEST(ShiftSpec, Validation) {
    EXPECT_NO_THROW((ShiftSpec{ShiftKind::Identity, 0.0, 1}.validate()));
    EXPECT_NO_THROW((ShiftSpec{ShiftKind::GaussianBlur, 5, 1}.validate()));
    EXPECT_THROW((ShiftSpec{ShiftKind::GaussianBlur, 6, 1}.validate()), ConfigError);
    EXPECT_THROW((ShiftSpec{ShiftKind::GaussianBlur, 2.5, 1}.validate()), ConfigError);
    EXPECT_THROW((ShiftSpec{ShiftKind::Pixelate, 0, 1}.validate()), ConfigError);
    EXPECT_NO_THROW((ShiftSpec{ShiftKind::FeatureRandomize, 1.0, 1}.validate()));
    EXPECT_THROW((ShiftSpec{ShiftKind::FeatureRandomize, 0.0, 1}.validate()), ConfigError);
    EXPECT_THROW((ShiftSpec{ShiftKind::FeatureRandomize, 1.5, 1}.validate()), ConfigError);
    EXPECT_THROW(parse_shift_kind("fog"), ConfigError);
    for (auto k : {ShiftKind::Identity, ShiftKind::GaussianNoise, ShiftKind::ImpulseNoise, ShiftKind::GaussianBlur,
                   ShiftKind::ContrastScale, ShiftKind::Pixelate, ShiftKind::FeatureRandomize})
        EXPECT_EQ(parse_shift_kind(to_string(k)), k);
}

TEST(SeverityTables, MonotoneInSeverity) {
    for (int s = 1; s < 5; ++s) {
        EXPECT_LT(severity_parameter(ShiftKind::GaussianNoise, s), severity_parameter(ShiftKind::GaussianNoise, s + 1));
        EXPECT_LT(severity_parameter(ShiftKind::ImpulseNoise, s), severity_parameter(ShiftKind::ImpulseNoise, s + 1));
        EXPECT_LT(severity_parameter(ShiftKind::GaussianBlur, s), severity_parameter(ShiftKind::GaussianBlur, s + 1));
        EXPECT_GT(severity_parameter(ShiftKind::ContrastScale, s), severity_parameter(ShiftKind::ContrastScale, s + 1));
        EXPECT_GT(severity_parameter(ShiftKind::Pixelate, s), severity_parameter(ShiftKind::Pixelate, s + 1));
    }
}

TEST(ApplyShift, IdentityIsUnchanged) {
    const auto d = small_images(8);
    EXPECT_EQ(apply_shift(d.features, {ShiftKind::Identity, 0, 3}).values(), d.features.values());
}

TEST(ApplyShift, PureAndDeterministic) {
    const auto d = small_images(8);
    const auto before = d.features.values();
    for (auto k : {ShiftKind::GaussianNoise, ShiftKind::ImpulseNoise, ShiftKind::GaussianBlur, ShiftKind::ContrastScale,
                   ShiftKind::Pixelate}) {
        const ShiftSpec spec{k, 3, 42};
        const auto a = apply_shift(d.features, spec);
        const auto b = apply_shift(d.features, spec);
        EXPECT_EQ(a.values(), b.values()) << to_string(k);
        EXPECT_EQ(d.features.values(), before) << to_string(k);
        for (Scalar v : a.data()) {
            EXPECT_GE(v, -1.0);
            EXPECT_LE(v, 1.0);
        }
    }
    const auto s1 = apply_shift(d.features, {ShiftKind::GaussianNoise, 3, 1});
    const auto s2 = apply_shift(d.features, {ShiftKind::GaussianNoise, 3, 2});
    EXPECT_NE(s1.values(), s2.values());
}

TEST(ApplyShift, GaussianNoiseStd) {
    for (int s = 1; s <= 3; ++s) {
        const auto y = apply_shift(zeros_image(40), {ShiftKind::GaussianNoise, static_cast<double>(s), 5});
        const double target = 2.0 * severity_parameter(ShiftKind::GaussianNoise, s);
        EXPECT_NEAR(stddev(y.data()), target, 0.05 * target) << "severity " << s;
    }
}

TEST(ApplyShift, ImpulseFraction) {
    const std::size_t n = 40;
    for (int s = 1; s <= 5; ++s) {
        const auto y = apply_shift(zeros_image(n), {ShiftKind::ImpulseNoise, static_cast<double>(s), 6});
        double hit = 0;
        for (Scalar v : y.data()) hit += v != 0.0;
        const double p = severity_parameter(ShiftKind::ImpulseNoise, s);
        const double total = static_cast<double>(y.numel());
        EXPECT_NEAR(hit / total, p, 4 * std::sqrt(p * (1 - p) / total));
    }
}

TEST(ApplyShift, BlurMatchesDirect2dKernel) {
    const auto d = small_images(3);
    const double sigma = severity_parameter(ShiftKind::GaussianBlur, 4);
    const auto y = apply_shift(d.features, {ShiftKind::GaussianBlur, 4, 0});
    const int R = static_cast<int>(std::ceil(3 * sigma));
    double norm = 0;
    for (int i = -R; i <= R; ++i) norm += std::exp(-0.5 * i * i / (sigma * sigma));
    auto refl = [](int i, int n) {
        if (i < 0) return -i - 1;
        if (i >= n) return 2 * n - i - 1;
        return i;
    };
    double worst = 0;
    for (std::size_t img = 0; img < 3; ++img)
        for (std::size_t c = 0; c < 3; ++c)
            for (int r = 0; r < 16; ++r)
                for (int q = 0; q < 16; ++q) {
                    double acc = 0;
                    for (int a = -R; a <= R; ++a)
                        for (int b = -R; b <= R; ++b) {
                            const double w = std::exp(-0.5 * (a * a + b * b) / (sigma * sigma)) / (norm * norm);
                            acc += w * d.features[((img * 3 + c) * 16 + refl(r + a, 16)) * 16 + refl(q + b, 16)];
                        }
                    acc = std::clamp(acc, -1.0, 1.0);
                    worst = std::max(worst, std::abs(acc - y[((img * 3 + c) * 16 + r) * 16 + q]));
                }
    EXPECT_LT(worst, 1e-12);
}

TEST(ApplyShift, BlurKeepsConstantImages) {
    const auto y = apply_shift(Tensor({2, 3, 16, 16}, 0.4), {ShiftKind::GaussianBlur, 5, 0});
    for (Scalar v : y.data()) EXPECT_NEAR(v, 0.4, 1e-12);
}

TEST(ApplyShift, ContrastScalesDeviations) {
    const auto d = small_images(4);
    for (int s = 1; s <= 5; ++s) {
        const double f = severity_parameter(ShiftKind::ContrastScale, s);
        const auto y = apply_shift(d.features, {ShiftKind::ContrastScale, static_cast<double>(s), 0});
        const std::size_t per = 3 * 16 * 16;
        for (std::size_t n = 0; n < 4; ++n) {
            double m = 0;
            for (std::size_t i = 0; i < per; ++i) m += d.features[n * per + i];
            m /= per;
            for (std::size_t i = 0; i < per; ++i)
                EXPECT_NEAR(y[n * per + i] - m, f * (d.features[n * per + i] - m), 1e-12);
        }
    }
}

TEST(ApplyShift, PixelateBlocksAreAverages) {
    // severity 3: ratio 0.5, so 16x16 becomes 2x2 blocks
    const auto d = small_images(2);
    const auto y = apply_shift(d.features, {ShiftKind::Pixelate, 3, 0});
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t br = 0; br < 8; ++br)
                for (std::size_t bc = 0; bc < 8; ++bc) {
                    const std::size_t base = (n * 3 + c) * 256;
                    double m = 0;
                    for (std::size_t i = 0; i < 2; ++i)
                        for (std::size_t j = 0; j < 2; ++j) m += d.features[base + (2 * br + i) * 16 + 2 * bc + j];
                    m /= 4;
                    for (std::size_t i = 0; i < 2; ++i)
                        for (std::size_t j = 0; j < 2; ++j)
                            EXPECT_NEAR(y[base + (2 * br + i) * 16 + 2 * bc + j], m, 1e-12);
                }
}

TEST(ApplyShift, ModalityChecks) {
    const auto tab = small_tabular();
    const FeatureMarginals marg(tab.train);
    EXPECT_THROW(apply_shift(tab.test.features, {ShiftKind::GaussianBlur, 1, 0}), ShapeError);
    EXPECT_THROW(apply_shift(tab.test.features, {ShiftKind::FeatureRandomize, 0.5, 0}), ShapeError);
    EXPECT_THROW(build_split(small_images(4), {ShiftKind::FeatureRandomize, 0.5, 0}, &marg), ShapeError);
    EXPECT_THROW(build_split(tab.test, {ShiftKind::ContrastScale, 1, 0}), ShapeError);
}

TEST(FeatureRandomize, ReplacementRateAndSource) {
    const auto tab = small_tabular();
    const FeatureMarginals marg(tab.train);
    const std::size_t F = tab.test.features.dim(1);
    for (double p : kRandomizeGrid) {
        const auto y = apply_shift(tab.test.features, {ShiftKind::FeatureRandomize, p, 9}, &marg);
        double changed = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) {
            if (y[i] == tab.test.features[i]) continue;
            changed += 1;
            const auto col = marg.column(i % F);
            ASSERT_NE(std::find(col.begin(), col.end(), y[i]), col.end());
        }
        // a replacement equal to the original value is invisible, which continuous features make negligible
        EXPECT_NEAR(changed / static_cast<double>(y.numel()), p, 0.01) << "p " << p;
    }
}

TEST(FeatureRandomize, MarginalsMatchTrainingAtFullRate) {
    const auto tab = small_tabular();
    const FeatureMarginals marg(tab.train);
    const auto y = apply_shift(tab.test.features, {ShiftKind::FeatureRandomize, 1.0, 10}, &marg);
    const std::size_t n = y.dim(0), F = y.dim(1);
    // chi-square against the training column's deciles
    for (std::size_t j = 0; j < F; ++j) {
        std::vector<Scalar> col(marg.column(j).begin(), marg.column(j).end());
        std::sort(col.begin(), col.end());
        std::vector<Scalar> edges;
        for (std::size_t q = 1; q < 10; ++q) edges.push_back(col[q * col.size() / 10]);
        std::vector<double> obs(10, 0), expect(10, 0);
        for (std::size_t i = 0; i < n; ++i)
            obs[std::upper_bound(edges.begin(), edges.end(), y[i * F + j]) - edges.begin()] += 1;
        for (Scalar v : col) expect[std::upper_bound(edges.begin(), edges.end(), v) - edges.begin()] += 1;
        double chi = 0;
        for (std::size_t b = 0; b < 10; ++b) {
            const double e = expect[b] * n / col.size();
            chi += (obs[b] - e) * (obs[b] - e) / e;
        }
        EXPECT_LT(chi, 27.88) << "feature " << j;  // 9 dof, p = 0.001
    }
}

TEST(BuildSplit, LabelsAndMetadata) {
    const auto d = small_images(16);
    const auto s = build_split(d, {ShiftKind::ContrastScale, 4, 77});
    EXPECT_EQ(s.labels, d.labels);
    EXPECT_EQ(s.split.kind, "contrast");
    EXPECT_EQ(s.split.severity, 4.0);
    EXPECT_EQ(s.split.seed, 77u);
    const auto id = build_split(d, {ShiftKind::Identity, 0, 1});
    EXPECT_EQ(id.features.values(), d.features.values());
    EXPECT_EQ(id.labels, d.labels);
    const auto again = build_split(d, {ShiftKind::ContrastScale, 4, 77});
    EXPECT_EQ(again.features.values(), s.features.values());
}

TEST(MixedBatch, SingleSplitIsOrdinaryBatch) {
    const auto d = small_images(20);
    const std::vector<Dataset> one{d};
    const auto mb = build_mixed_batch(one, 10, 3);
    EXPECT_EQ(mb.batch.size(), 10u);
    EXPECT_EQ(mb.composition, (std::vector<std::size_t>{10}));
    for (std::size_t i = 0; i < 10; ++i) {
        bool found = false;
        for (std::size_t j = 0; j < 20 && !found; ++j)
            found = mb.batch.labels[i] == d.labels[j] &&
                    std::equal(d.features.data().begin() + j * 768, d.features.data().begin() + (j + 1) * 768,
                               mb.batch.features.data().begin() + i * 768);
        EXPECT_TRUE(found);
    }
}

TEST(MixedBatch, TwoSplitProportions) {
    const auto d = small_images(30);
    const std::vector<Dataset> two{build_split(d, {ShiftKind::GaussianNoise, 5, 1}), build_split(d, {ShiftKind::Pixelate, 5, 1})};
    double total0 = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto mb = build_mixed_batch(two, 100, seed);
        EXPECT_EQ(mb.composition[0] + mb.composition[1], 100u);
        total0 += mb.composition[0];
    }
    EXPECT_NEAR(total0 / 10000.0, 0.5, 0.15 * 0.5);
    EXPECT_THROW(build_mixed_batch(two, 1, 0), ShapeError);
}

TEST(MixSplits, RowsComeFromTheirSplits) {
    const auto d = small_images(200);
    std::vector<Dataset> splits;
    for (auto k : {ShiftKind::GaussianNoise, ShiftKind::ImpulseNoise, ShiftKind::GaussianBlur, ShiftKind::ContrastScale,
                   ShiftKind::Pixelate})
        splits.push_back(build_split(d, {k, 5, 4}));
    const auto m = mix_splits(splits, 8);
    EXPECT_EQ(m.labels, d.labels);
    EXPECT_EQ(m.split.kind, "mixed");
    std::vector<std::size_t> used(5, 0);
    for (std::size_t i = 0; i < 200; ++i) {
        std::size_t match = 5;
        for (std::size_t s = 0; s < 5 && match == 5; ++s)
            if (std::equal(splits[s].features.data().begin() + i * 768,
                           splits[s].features.data().begin() + (i + 1) * 768, m.features.data().begin() + i * 768))
                match = s;
        ASSERT_LT(match, 5u) << "row " << i;
        ++used[match];
    }
    for (auto u : used) EXPECT_GT(u, 20u);
    EXPECT_EQ(mix_splits(splits, 8).features.values(), m.features.values());
}
