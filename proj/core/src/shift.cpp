#include "ptbn/shift.hpp"

#include <algorithm>
#include <cmath>

#include "ptbn/error.hpp"
#include "ptbn/rng.hpp"

namespace ptbn {

std::string_view to_string(ShiftKind k) {
    switch (k) {
        case ShiftKind::Identity: return "identity";
        case ShiftKind::GaussianNoise: return "gaussian_noise";
        case ShiftKind::ImpulseNoise: return "impulse_noise";
        case ShiftKind::GaussianBlur: return "gaussian_blur";
        case ShiftKind::ContrastScale: return "contrast";
        case ShiftKind::Pixelate: return "pixelate";
        case ShiftKind::FeatureRandomize: return "feature_randomize";
    }
    return "?";
}

ShiftKind parse_shift_kind(std::string_view s) {
    for (auto k : {ShiftKind::Identity, ShiftKind::GaussianNoise, ShiftKind::ImpulseNoise, ShiftKind::GaussianBlur,
                   ShiftKind::ContrastScale, ShiftKind::Pixelate, ShiftKind::FeatureRandomize}) {
        if (to_string(k) == s) return k;
    }
    throw ConfigError("unknown shift kind '" + std::string(s) + "'");
}

bool is_image_kind(ShiftKind k) {
    return k != ShiftKind::Identity && k != ShiftKind::FeatureRandomize;
}

void ShiftSpec::validate() const {
    if (kind == ShiftKind::Identity) return;
    if (kind == ShiftKind::FeatureRandomize) {
        if (!(severity > 0.0 && severity <= 1.0)) {
            throw ConfigError("feature_randomize probability must lie in (0, 1]");
        }
        return;
    }
    if (severity < 1.0 || severity > 5.0 || severity != std::floor(severity)) {
        throw ConfigError(std::string(to_string(kind)) + " severity must be an integer in 1..5");
    }
}

double severity_parameter(ShiftKind kind, int severity) {
    static constexpr double noise[] = {0.04, 0.08, 0.12, 0.18, 0.26};
    static constexpr double impulse[] = {0.03, 0.06, 0.09, 0.17, 0.27};
    static constexpr double blur[] = {0.5, 0.75, 1.0, 1.5, 2.0};
    static constexpr double contrast[] = {0.4, 0.3, 0.2, 0.1, 0.05};
    static constexpr double pixelate[] = {0.75, 0.6, 0.5, 0.4, 0.3};
    if (severity < 1 || severity > 5) throw ConfigError("severity must lie in 1..5");
    const auto i = static_cast<std::size_t>(severity - 1);
    switch (kind) {
        case ShiftKind::GaussianNoise: return noise[i];
        case ShiftKind::ImpulseNoise: return impulse[i];
        case ShiftKind::GaussianBlur: return blur[i];
        case ShiftKind::ContrastScale: return contrast[i];
        case ShiftKind::Pixelate: return pixelate[i];
        default: break;
    }
    throw ConfigError(std::string(to_string(kind)) + " has no severity table");
}

namespace {

Scalar clamp1(Scalar v) { return std::clamp(v, -1.0, 1.0); }

void gaussian_blur(std::span<Scalar> img, std::size_t C, std::size_t H, std::size_t W, double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        total += k[static_cast<std::size_t>(i + radius)];
    }
    for (auto& v : k) v /= total;
    auto at = [](int i, std::size_t n) {
        // reflect at the border
        const int m = static_cast<int>(n);
        while (i < 0 || i >= m) i = i < 0 ? -i - 1 : 2 * m - i - 1;
        return static_cast<std::size_t>(i);
    };
    std::vector<Scalar> tmp(H * W);
    for (std::size_t c = 0; c < C; ++c) {
        Scalar* p = img.data() + c * H * W;
        for (std::size_t r = 0; r < H; ++r)
            for (std::size_t col = 0; col < W; ++col) {
                double acc = 0.0;
                for (int d = -radius; d <= radius; ++d) {
                    acc += k[static_cast<std::size_t>(d + radius)] * p[r * W + at(static_cast<int>(col) + d, W)];
                }
                tmp[r * W + col] = acc;
            }
        for (std::size_t r = 0; r < H; ++r)
            for (std::size_t col = 0; col < W; ++col) {
                double acc = 0.0;
                for (int d = -radius; d <= radius; ++d) {
                    acc += k[static_cast<std::size_t>(d + radius)] * tmp[at(static_cast<int>(r) + d, H) * W + col];
                }
                p[r * W + col] = acc;
            }
    }
}

void pixelate(std::span<Scalar> img, std::size_t C, std::size_t H, std::size_t W, double ratio) {
    const std::size_t sh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(ratio * H)));
    const std::size_t sw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(ratio * W)));
    std::vector<Scalar> small(sh * sw);
    for (std::size_t c = 0; c < C; ++c) {
        Scalar* p = img.data() + c * H * W;
        for (std::size_t i = 0; i < sh; ++i)
            for (std::size_t j = 0; j < sw; ++j) {
                const std::size_t r0 = i * H / sh, r1 = std::max(r0 + 1, (i + 1) * H / sh);
                const std::size_t c0 = j * W / sw, c1 = std::max(c0 + 1, (j + 1) * W / sw);
                double acc = 0.0;
                for (std::size_t r = r0; r < r1; ++r)
                    for (std::size_t col = c0; col < c1; ++col) acc += p[r * W + col];
                small[i * sw + j] = acc / static_cast<double>((r1 - r0) * (c1 - c0));
            }
        for (std::size_t r = 0; r < H; ++r)
            for (std::size_t col = 0; col < W; ++col) p[r * W + col] = small[(r * sh / H) * sw + col * sw / W];
    }
}

}  // namespace

Tensor apply_shift(const Tensor& x, const ShiftSpec& spec, const FeatureMarginals* marginals) {
    spec.validate();
    if (spec.kind == ShiftKind::Identity) return x.detach();
    Rng rng(derive_seed(spec.seed, hash_string(to_string(spec.kind))));
    std::vector<Scalar> out(x.data().begin(), x.data().end());

    if (spec.kind == ShiftKind::FeatureRandomize) {
        if (x.rank() != 2) throw ShapeError("feature_randomize applies to tabular inputs [N, F]");
        if (!marginals) throw ShapeError("feature_randomize needs training marginals");
        const std::size_t N = x.dim(0), F = x.dim(1);
        if (marginals->num_features() != F) throw ShapeError("feature_randomize: marginals have the wrong width");
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < F; ++j) {
                if (rng.bernoulli(spec.severity)) {
                    const auto col = marginals->column(j);
                    out[i * F + j] = col[rng.below(col.size())];
                }
            }
        return Tensor(x.shape(), std::move(out));
    }

    if (x.rank() != 4) throw ShapeError(std::string(to_string(spec.kind)) + " applies to image inputs [N, C, H, W]");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t per = C * H * W;
    const double param = severity_parameter(spec.kind, static_cast<int>(spec.severity));
    for (std::size_t n = 0; n < N; ++n) {
        std::span<Scalar> img(out.data() + n * per, per);
        switch (spec.kind) {
            case ShiftKind::GaussianNoise: {
                const double sd = 2.0 * param;
                for (auto& v : img) v += sd * rng.normal();
                break;
            }
            case ShiftKind::ImpulseNoise:
                for (auto& v : img) {
                    if (rng.bernoulli(param)) v = rng.bernoulli(0.5) ? 1.0 : -1.0;
                }
                break;
            case ShiftKind::GaussianBlur:
                gaussian_blur(img, C, H, W, param);
                break;
            case ShiftKind::ContrastScale: {
                double mean = 0.0;
                for (auto v : img) mean += v;
                mean /= static_cast<double>(per);
                for (auto& v : img) v = mean + param * (v - mean);
                break;
            }
            case ShiftKind::Pixelate:
                pixelate(img, C, H, W, param);
                break;
            default:
                break;
        }
        for (auto& v : img) v = clamp1(v);
    }
    return Tensor(x.shape(), std::move(out));
}

Dataset build_split(const Dataset& data, const ShiftSpec& spec, const FeatureMarginals* marginals) {
    if (data.size() == 0) throw ShapeError("build_split: empty dataset");
    if (is_image_kind(spec.kind) && data.modality != Modality::Image) {
        throw ShapeError(std::string(to_string(spec.kind)) + " needs an image dataset");
    }
    if (spec.kind == ShiftKind::FeatureRandomize && data.modality != Modality::Tabular) {
        throw ShapeError("feature_randomize needs a tabular dataset");
    }
    Dataset out = data;
    out.features = apply_shift(data.features, spec, marginals);
    out.split.kind = std::string(to_string(spec.kind));
    out.split.severity = spec.kind == ShiftKind::Identity ? 0.0 : spec.severity;
    out.split.seed = spec.seed;
    return out;
}

MixedBatch build_mixed_batch(std::span<const Dataset> splits, std::size_t t, std::uint64_t seed) {
    if (splits.empty()) throw ShapeError("build_mixed_batch: no splits");
    if (t < splits.size()) throw ShapeError("build_mixed_batch: batch size smaller than the number of splits");
    for (const auto& s : splits) {
        if (s.size() == 0) throw ShapeError("build_mixed_batch: empty split");
        if (s.input_shape() != splits.front().input_shape()) throw ShapeError("build_mixed_batch: input shapes differ");
    }
    Rng rng(derive_seed(seed, hash_string("mixed_batch")));
    MixedBatch mb;
    mb.composition.assign(splits.size(), 0);
    std::vector<Tensor> rows;
    std::vector<int> labels;
    for (std::size_t i = 0; i < t; ++i) {
        const auto s = static_cast<std::size_t>(rng.below(splits.size()));
        const auto j = static_cast<std::size_t>(rng.below(splits[s].size()));
        rows.push_back(splits[s].features.slice_rows(j, j + 1));
        labels.push_back(splits[s].labels[j]);
        mb.source.push_back(s);
        ++mb.composition[s];
    }
    mb.batch.features = concat_rows(rows);
    mb.batch.labels = std::move(labels);
    mb.batch.num_classes = splits.front().num_classes;
    mb.batch.modality = splits.front().modality;
    mb.batch.split.kind = "mixed";
    mb.batch.split.seed = seed;
    return mb;
}

Dataset mix_splits(std::span<const Dataset> splits, std::uint64_t seed) {
    if (splits.empty()) throw ShapeError("mix_splits: no splits");
    const Dataset& ref = splits.front();
    for (const auto& s : splits) {
        if (s.labels != ref.labels || s.features.shape() != ref.features.shape()) {
            throw ShapeError("mix_splits: splits must be shifted copies of one dataset");
        }
    }
    Rng rng(derive_seed(seed, hash_string("mix_splits")));
    const std::size_t per = ref.features.numel() / ref.size();
    std::vector<Scalar> out(ref.features.numel());
    double severity = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const auto& src = splits[rng.below(splits.size())].features.data();
        std::copy(src.begin() + i * per, src.begin() + (i + 1) * per, out.begin() + i * per);
    }
    for (const auto& s : splits) severity = std::max(severity, s.split.severity);
    Dataset mixed = ref;
    mixed.features = Tensor(ref.features.shape(), std::move(out));
    mixed.split.kind = "mixed";
    mixed.split.severity = severity;
    mixed.split.seed = seed;
    return mixed;
}

}  // namespace ptbn
