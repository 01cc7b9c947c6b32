#include "ptbn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ptbn/error.hpp"
#include "ptbn/rng.hpp"

namespace ptbn {

std::string_view to_string(Modality m) { return m == Modality::Image ? "image" : "tabular"; }

Shape Dataset::input_shape() const {
    Shape s = features.shape();
    s.erase(s.begin());
    return s;
}

Dataset Dataset::subset(std::span<const std::size_t> index) const {
    Dataset d;
    d.features = features.gather_rows(index);
    d.labels.reserve(index.size());
    for (auto i : index) d.labels.push_back(labels.at(i));
    d.num_classes = num_classes;
    d.modality = modality;
    d.split = split;
    return d;
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
    Dataset d;
    d.features = features.slice_rows(begin, end);
    d.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    labels.begin() + static_cast<std::ptrdiff_t>(end));
    d.num_classes = num_classes;
    d.modality = modality;
    d.split = split;
    return d;
}

void Dataset::validate() const {
    if (labels.empty()) throw ShapeError("dataset is empty");
    if (features.dim(0) != labels.size()) throw ShapeError("dataset: feature rows and labels differ");
    if (modality == Modality::Image && features.rank() != 4) throw ShapeError("image dataset must be rank 4");
    if (modality == Modality::Tabular && features.rank() != 2) throw ShapeError("tabular dataset must be rank 2");
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
            throw ShapeError("label " + std::to_string(y) + " out of range [0, " + std::to_string(num_classes) + ")");
        }
    }
}

namespace {

Dataset take(const Tensor& x, const std::vector<int>& y, std::size_t begin, std::size_t end, std::size_t k,
             Modality m) {
    Dataset d;
    d.features = x.slice_rows(begin, end);
    d.labels.assign(y.begin() + static_cast<std::ptrdiff_t>(begin), y.begin() + static_cast<std::ptrdiff_t>(end));
    d.num_classes = k;
    d.modality = m;
    return d;
}

DataSplits partition(const Tensor& x, const std::vector<int>& y, std::size_t n_train, std::size_t n_val,
                     std::size_t n_test, std::size_t k, Modality m) {
    DataSplits s;
    s.train = take(x, y, 0, n_train, k, m);
    s.val = take(x, y, n_train, n_train + n_val, k, m);
    s.test = take(x, y, n_train + n_val, n_train + n_val + n_test, k, m);
    return s;
}

}  // namespace

DataSplits make_tabular(const TabularSpec& spec) {
    if (spec.num_classes < 2 || spec.num_features < 1 || spec.n_train == 0 || spec.n_val == 0 || spec.n_test == 0) {
        throw ConfigError("tabular spec: need >= 2 classes, >= 1 feature and nonempty splits");
    }
    Rng rng(derive_seed(spec.seed, hash_string("tabular")));
    const std::size_t D = spec.num_features, R = spec.latent_factors, K = spec.num_classes;

    std::vector<Scalar> means(K * D);
    for (auto& v : means) v = spec.class_separation * rng.normal();
    std::vector<Scalar> loadings(D * R);
    const double load_scale = R ? spec.nuisance_scale / std::sqrt(static_cast<double>(R)) : 0.0;
    for (auto& v : loadings) v = load_scale * rng.normal();

    const std::size_t n = spec.n_train + spec.n_val + spec.n_test;
    std::vector<Scalar> x(n * D);
    std::vector<int> y(n);
    std::vector<Scalar> z(R);
    for (std::size_t i = 0; i < n; ++i) {
        const auto label = static_cast<int>(rng.below(K));
        y[i] = label;
        for (auto& v : z) v = rng.normal();
        for (std::size_t j = 0; j < D; ++j) {
            Scalar v = means[static_cast<std::size_t>(label) * D + j];
            for (std::size_t r = 0; r < R; ++r) v += loadings[j * R + r] * z[r];
            x[i * D + j] = v + spec.noise * rng.normal();
        }
    }
    return partition(Tensor(Shape{n, D}, std::move(x)), y, spec.n_train, spec.n_val, spec.n_test, K,
                     Modality::Tabular);
}

namespace {

// Pattern membership in [0, 1] for pixel (r, c) of a patch centred at (cy, cx)
// with half-size s; `period` controls texture classes.
double pattern_value(int cls, double r, double c, double cy, double cx, double s, double period, double phase) {
    const double dy = r - cy, dx = c - cx;
    const bool inside_square = std::abs(dy) <= s && std::abs(dx) <= s;
    const double rad = std::sqrt(dy * dy + dx * dx);
    auto stripe = [&](double t) { return std::fmod(std::floor((t + phase) / period), 2.0) == 0.0 ? 1.0 : 0.0; };
    switch (cls) {
        case 0: return rad <= s ? 1.0 : 0.0;                                     // disk
        case 1: return inside_square ? 1.0 : 0.0;                                // square
        case 2: return (rad <= s && rad >= 0.55 * s) ? 1.0 : 0.0;                // ring
        case 3: return inside_square ? stripe(r + 64.0) : 0.0;                   // horizontal stripes
        case 4: return inside_square ? stripe(c + 64.0) : 0.0;                   // vertical stripes
        case 5: return inside_square ? stripe(r + c + 64.0) : 0.0;               // diagonal stripes
        case 6: return inside_square ? std::abs(stripe(r + 64.0) - stripe(c + 64.0)) : 0.0;  // checker
        case 7: return ((std::abs(dy) <= 0.3 * s && std::abs(dx) <= s) || (std::abs(dx) <= 0.3 * s && std::abs(dy) <= s)) ? 1.0 : 0.0;  // plus
        case 8: return (dy <= s && dy >= -s && std::abs(dx) <= (dy + s) * 0.5) ? 1.0 : 0.0;  // triangle
        case 9: {                                                                  // dot grid
            if (!inside_square) return 0.0;
            const double a = std::fmod(r + 64.0 + phase, period), b = std::fmod(c + 64.0 + phase, period);
            return (a < 1.0 && b < 1.0) ? 1.0 : 0.0;
        }
        default: return 0.0;
    }
}

}  // namespace

DataSplits make_images(const ImageSpec& spec) {
    if (spec.num_classes < 2 || spec.num_classes > 10) throw ConfigError("image spec: num_classes must be in [2, 10]");
    if (spec.size < 8 || spec.channels == 0) throw ConfigError("image spec: size must be >= 8");
    if (spec.n_train == 0 || spec.n_val == 0 || spec.n_test == 0) throw ConfigError("image spec: empty split");
    Rng rng(derive_seed(spec.seed, hash_string("images")));
    const std::size_t S = spec.size, C = spec.channels, K = spec.num_classes;
    const std::size_t n = spec.n_train + spec.n_val + spec.n_test;
    std::vector<Scalar> x(n * C * S * S);
    std::vector<int> y(n);
    const double half = static_cast<double>(S) / 2.0;
    std::vector<double> bg(C), fg(C);
    for (std::size_t i = 0; i < n; ++i) {
        const auto cls = static_cast<int>(rng.below(K));
        y[i] = cls;
        for (std::size_t c = 0; c < C; ++c) bg[c] = rng.uniform(-0.7, 0.7);
        // Foreground differs from background by at least 0.5 in luminance direction.
        const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
        const double contrast = rng.uniform(0.5, 1.0);
        for (std::size_t c = 0; c < C; ++c) fg[c] = bg[c] + sign * contrast + rng.uniform(-0.25, 0.25);
        const double s = rng.uniform(0.28, 0.42) * static_cast<double>(S);
        const double cy = half - 0.5 + rng.uniform(-1.5, 1.5);
        const double cx = half - 0.5 + rng.uniform(-1.5, 1.5);
        const double period = rng.bernoulli(0.5) ? 2.0 : 3.0;
        const double phase = std::floor(rng.uniform(0.0, period));
        Scalar* img = x.data() + i * C * S * S;
        for (std::size_t r = 0; r < S; ++r)
            for (std::size_t col = 0; col < S; ++col) {
                const double m = pattern_value(cls, static_cast<double>(r), static_cast<double>(col), cy, cx, s, period, phase);
                for (std::size_t c = 0; c < C; ++c) {
                    const double v = bg[c] + m * (fg[c] - bg[c]) + spec.pixel_noise * rng.normal();
                    img[(c * S + r) * S + col] = std::clamp(v, -1.0, 1.0);
                }
            }
    }
    return partition(Tensor(Shape{n, C, S, S}, std::move(x)), y, spec.n_train, spec.n_val, spec.n_test, K,
                     Modality::Image);
}

Dataset load_csv(const std::filesystem::path& path, std::size_t num_classes, std::optional<Shape> image_shape) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("cannot open dataset file " + path.string());
    std::vector<Scalar> values;
    std::vector<int> labels;
    std::size_t width = 0;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                row.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": not a number: '" + cell + "'");
            }
        }
        if (row.size() < 2) throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": need features and a label");
        if (width == 0) width = row.size();
        if (row.size() != width) throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": ragged row");
        labels.push_back(static_cast<int>(row.back()));
        values.insert(values.end(), row.begin(), row.end() - 1);
    }
    if (labels.empty()) throw ConfigError("dataset file " + path.string() + " has no rows");
    Dataset d;
    d.num_classes = num_classes;
    const std::size_t D = width - 1;
    if (image_shape) {
        if (image_shape->size() != 3 || shape_numel(*image_shape) != D) {
            throw ConfigError("image shape does not match the CSV row width");
        }
        d.features = Tensor(Shape{labels.size(), (*image_shape)[0], (*image_shape)[1], (*image_shape)[2]}, std::move(values));
        d.modality = Modality::Image;
    } else {
        d.features = Tensor(Shape{labels.size(), D}, std::move(values));
        d.modality = Modality::Tabular;
    }
    d.labels = std::move(labels);
    d.validate();
    return d;
}

FeatureMarginals::FeatureMarginals(const Dataset& train) {
    if (train.modality != Modality::Tabular) throw ShapeError("feature marginals need a tabular dataset");
    const std::size_t N = train.features.dim(0), D = train.features.dim(1);
    columns_.assign(D, std::vector<Scalar>(N));
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < D; ++j) columns_[j][i] = train.features[i * D + j];
}

}  // namespace ptbn
