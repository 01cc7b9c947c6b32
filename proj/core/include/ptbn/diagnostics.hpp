#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ptbn/tensor.hpp"

namespace ptbn {

/// Moment summary of one layer's activations (one row per example, one
/// column per channel, spatial dimensions already averaged out).
struct ActivationSummary {
    std::string layer;
    std::string source;  // "train" or a split id
    std::string mode;    // normalization mode used when capturing
    std::size_t count = 0;
    std::vector<Scalar> mean;
    std::vector<Scalar> var;
    /// Row-major channels x channels; empty when only the diagonal is kept.
    std::vector<Scalar> covariance;
    /// Retained sample rows (reservoir of at most n_keep), row-major.
    std::vector<Scalar> samples;
    std::size_t sample_rows = 0;

    std::size_t channels() const { return mean.size(); }
    bool has_covariance() const { return !covariance.empty(); }
    Tensor sample_tensor() const;
};

inline constexpr std::size_t kDefaultKeep = 4096;

/// Exact mean/variance (and covariance if requested, divisor n) of rows[n, C],
/// plus a seeded reservoir sample of up to n_keep rows.
ActivationSummary summarize_activations(const Tensor& rows, std::string layer, bool full_covariance,
                                        std::size_t n_keep = kDefaultKeep, std::uint64_t seed = 0);

/// Mean over `samples` of ln q(h) - ln p(h), where p and q are normals moment
/// matched to `train` and `test`. Full covariances are used when both
/// summaries carry them, the diagonal otherwise. Each covariance gets a ridge
/// of 1e-6 times its mean diagonal.
///
/// The estimator is a sample average of the log ratio over test activations,
/// i.e. it estimates KL(q || p) when samples come from q.
double gaussian_kl_discrepancy(const ActivationSummary& train, const ActivationSummary& test,
                               const Tensor& samples);

/// Eigenvalues of the summary covariance, descending. Values in (-1e-8, 0)
/// are clamped to zero; throws NumericalError if the matrix is asymmetric
/// beyond 1e-8 or has a more negative eigenvalue.
std::vector<Scalar> covariance_eigenspectrum(const ActivationSummary& summary);

struct HistogramTable {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t bins = 0;
    std::vector<std::size_t> channels;
    std::vector<std::vector<std::size_t>> counts;  // [channel][bin]

    double bin_width() const { return bins ? (hi - lo) / static_cast<double>(bins) : 0.0; }
};

/// Common [min, max] over the retained samples of several summaries.
std::pair<double, double> shared_range(std::span<const ActivationSummary* const> summaries,
                                       std::span<const std::size_t> channels);

/// Equal-width per-channel histograms of the retained samples. Without an
/// explicit range the summary's own min/max is used. Values equal to `hi`
/// land in the last bin.
HistogramTable histogram_dump(const ActivationSummary& summary, std::span<const std::size_t> channels,
                              std::size_t bins, std::optional<std::pair<double, double>> range = std::nullopt);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace ptbn
