#include "ptbn/diagnostics.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "ptbn/error.hpp"
#include "ptbn/rng.hpp"

namespace ptbn {

Tensor ActivationSummary::sample_tensor() const {
    if (sample_rows == 0) throw ShapeError("activation summary has no retained samples");
    return Tensor(Shape{sample_rows, channels()}, samples);
}

ActivationSummary summarize_activations(const Tensor& rows, std::string layer, bool full_covariance,
                                        std::size_t n_keep, std::uint64_t seed) {
    if (rows.rank() != 2) throw ShapeError("summarize_activations: need rows[n, C]");
    const std::size_t n = rows.dim(0), C = rows.dim(1);
    ActivationSummary s;
    s.layer = std::move(layer);
    s.count = n;
    s.mean.assign(C, 0.0);
    s.var.assign(C, 0.0);
    const auto d = rows.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < C; ++c) s.mean[c] += d[i * C + c];
    for (auto& m : s.mean) m /= static_cast<Scalar>(n);
    if (full_covariance) s.covariance.assign(C * C, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < C; ++a) {
            const Scalar da = d[i * C + a] - s.mean[a];
            s.var[a] += da * da;
            if (full_covariance) {
                for (std::size_t b = a; b < C; ++b) s.covariance[a * C + b] += da * (d[i * C + b] - s.mean[b]);
            }
        }
    }
    for (auto& v : s.var) v /= static_cast<Scalar>(n);
    if (full_covariance) {
        for (std::size_t a = 0; a < C; ++a) {
            for (std::size_t b = a; b < C; ++b) {
                s.covariance[a * C + b] /= static_cast<Scalar>(n);
                s.covariance[b * C + a] = s.covariance[a * C + b];
            }
        }
    }

    // Reservoir sample of row indices.
    const std::size_t keep = std::min(n, n_keep);
    std::vector<std::size_t> chosen(keep);
    std::iota(chosen.begin(), chosen.end(), std::size_t{0});
    Rng rng(derive_seed(seed, hash_string("reservoir")));
    for (std::size_t i = keep; i < n && keep > 0; ++i) {
        const auto j = rng.below(i + 1);
        if (j < keep) chosen[j] = i;
    }
    std::sort(chosen.begin(), chosen.end());
    s.samples.reserve(keep * C);
    for (auto i : chosen) s.samples.insert(s.samples.end(), d.begin() + i * C, d.begin() + (i + 1) * C);
    s.sample_rows = keep;
    return s;
}

namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Log density of a moment-matched normal, either full or diagonal.
class GaussianDensity {
   public:
    GaussianDensity(const ActivationSummary& s, bool full) : mean_(Eigen::Map<const Vector>(s.mean.data(), s.mean.size())) {
        const std::size_t C = s.channels();
        const double dim = static_cast<double>(C);
        if (full) {
            Matrix cov = Eigen::Map<const Matrix>(s.covariance.data(), C, C);
            const double ridge = 1e-6 * cov.diagonal().mean();
            if (!(ridge > 0.0)) throw NumericalError("discrepancy: covariance is zero");
            cov.diagonal().array() += ridge;
            llt_.compute(cov);
            if (llt_.info() != Eigen::Success) throw NumericalError("discrepancy: covariance not positive definite");
            const auto L = llt_.matrixL();
            double logdet = 0.0;
            for (std::size_t i = 0; i < C; ++i) logdet += 2.0 * std::log(L(i, i));
            if (!std::isfinite(logdet)) throw NumericalError("discrepancy: singular covariance");
            norm_const_ = -0.5 * (dim * std::log(2.0 * std::numbers::pi) + logdet);
            full_ = true;
        } else {
            diag_ = Eigen::Map<const Vector>(s.var.data(), s.var.size());
            const double ridge = 1e-6 * diag_.mean();
            if (!(ridge > 0.0)) throw NumericalError("discrepancy: variance is zero");
            diag_.array() += ridge;
            norm_const_ = -0.5 * (dim * std::log(2.0 * std::numbers::pi) + diag_.array().log().sum());
        }
    }

    double log_density(const Vector& h) const {
        const Vector d = h - mean_;
        double quad = 0.0;
        if (full_) {
            const Vector z = llt_.matrixL().solve(d);
            quad = z.squaredNorm();
        } else {
            quad = (d.array().square() / diag_.array()).sum();
        }
        return norm_const_ - 0.5 * quad;
    }

   private:
    Vector mean_;
    Vector diag_;
    Eigen::LLT<Matrix> llt_;
    double norm_const_ = 0.0;
    bool full_ = false;
};

}  // namespace

double gaussian_kl_discrepancy(const ActivationSummary& train, const ActivationSummary& test, const Tensor& samples) {
    const std::size_t C = train.channels();
    if (C == 0 || test.channels() != C) throw ShapeError("discrepancy: summaries disagree on channel count");
    if (samples.rank() != 2 || samples.dim(1) != C) throw ShapeError("discrepancy: samples must be [n, C]");
    const bool full = train.has_covariance() && test.has_covariance();
    const GaussianDensity p(train, full);
    const GaussianDensity q(test, full);
    const std::size_t n = samples.dim(0);
    double total = 0.0;
    Vector h(C);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < C; ++c) h[c] = samples[i * C + c];
        total += q.log_density(h) - p.log_density(h);
    }
    const double out = total / static_cast<double>(n);
    if (!std::isfinite(out)) throw NumericalError("discrepancy: non-finite estimate");
    return out;
}

std::vector<Scalar> covariance_eigenspectrum(const ActivationSummary& summary) {
    if (!summary.has_covariance()) throw ShapeError("eigenspectrum: summary has no covariance");
    const std::size_t C = summary.channels();
    const Matrix cov = Eigen::Map<const Matrix>(summary.covariance.data(), C, C);
    if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-8) {
        throw NumericalError("eigenspectrum: covariance is not symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Matrix> solver(cov, Eigen::EigenvaluesOnly);
    if (solver.info() != Eigen::Success) throw NumericalError("eigenspectrum: solver failed");
    std::vector<Scalar> ev(solver.eigenvalues().data(), solver.eigenvalues().data() + C);
    for (auto& v : ev) {
        if (v < -1e-8) throw NumericalError("eigenspectrum: covariance has a negative eigenvalue");
        if (v < 0.0) v = 0.0;
    }
    std::sort(ev.begin(), ev.end(), std::greater<>());
    return ev;
}

std::pair<double, double> shared_range(std::span<const ActivationSummary* const> summaries,
                                       std::span<const std::size_t> channels) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (const auto* s : summaries) {
        for (std::size_t r = 0; r < s->sample_rows; ++r)
            for (auto c : channels) {
                const double v = s->samples.at(r * s->channels() + c);
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
    }
    if (lo > hi) throw ShapeError("shared_range: no samples");
    return {lo, hi};
}

HistogramTable histogram_dump(const ActivationSummary& summary, std::span<const std::size_t> channels,
                              std::size_t bins, std::optional<std::pair<double, double>> range) {
    if (summary.sample_rows == 0) throw ShapeError("histogram_dump: summary has no samples");
    if (bins == 0) throw ShapeError("histogram_dump: need at least one bin");
    for (auto c : channels) {
        if (c >= summary.channels()) throw ShapeError("histogram_dump: channel out of range");
    }
    HistogramTable t;
    const ActivationSummary* self = &summary;
    std::tie(t.lo, t.hi) = range ? *range : shared_range(std::span(&self, 1), channels);
    t.bins = bins;
    t.channels.assign(channels.begin(), channels.end());
    t.counts.assign(channels.size(), std::vector<std::size_t>(bins, 0));
    const double width = t.hi - t.lo;
    for (std::size_t k = 0; k < channels.size(); ++k) {
        for (std::size_t r = 0; r < summary.sample_rows; ++r) {
            const double v = summary.samples[r * summary.channels() + channels[k]];
            std::size_t b = 0;
            if (width > 0.0) {
                const double pos = (v - t.lo) / width * static_cast<double>(bins);
                b = pos <= 0.0 ? 0 : std::min(bins - 1, static_cast<std::size_t>(pos));
            }
            ++t.counts[k][b];
        }
    }
    return t;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> rank(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
        i = j + 1;
    }
    return rank;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2) throw ShapeError("spearman: need two equal-length series");
    const auto ra = average_ranks(a), rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

}  // namespace ptbn
