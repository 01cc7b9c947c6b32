#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ptbn/tensor.hpp"

namespace ptbn {

/// Probabilities below this are clamped before taking logs in nll().
inline constexpr double kNllClamp = 1e-12;

/// Throws ShapeError unless probs is [n, K] with n >= 1, rows on the simplex
/// (sum within 1e-6) and labels in [0, K).
void validate_predictions(const Tensor& probs, std::span<const int> labels);

/// Row argmax; ties go to the lowest index.
std::vector<int> argmax_rows(const Tensor& m);

/// Equal-width bin of a confidence in [0, 1]. A value on an interior edge
/// belongs to the upper bin; 1.0 belongs to the last bin.
std::size_t confidence_bin(double confidence, std::size_t num_bins);

struct CalibrationBins {
    std::size_t num_bins = 10;
    std::vector<std::size_t> count;
    std::vector<double> confidence_sum;
    std::vector<std::size_t> correct;

    static CalibrationBins compute(const Tensor& probs, std::span<const int> labels, std::size_t num_bins);
    std::size_t total() const;
    double accuracy(std::size_t b) const;
    double confidence(std::size_t b) const;
    double ece() const;
};

double ece(const Tensor& probs, std::span<const int> labels, std::size_t num_bins = 10);
/// Mean over examples of sum_k (p_k - onehot_k)^2.
double brier(const Tensor& probs, std::span<const int> labels);
/// brier() divided by the number of classes.
double brier_per_class(const Tensor& probs, std::span<const int> labels);
double nll(const Tensor& probs, std::span<const int> labels);
double accuracy(const Tensor& probs, std::span<const int> labels);

/// Rank-sum ROC AUC for binary labels (0/1); tied scores get average ranks.
double auc(std::span<const double> scores, std::span<const int> labels);

/// Mean NLL of softmax(logits / temperature).
double nll_from_logits(const Tensor& logits, std::span<const int> labels, double temperature = 1.0);

struct TemperatureFit {
    double temperature = 1.0;
    double nll = 0.0;
    /// True when the labels hold a single class; the temperature is then 1.
    bool degenerate = false;
};

inline constexpr double kMinTemperature = 0.05;
inline constexpr double kMaxTemperature = 20.0;

/// Golden-section search over the inverse temperature, on which the NLL is
/// convex, restricted to T in [0.05, 20].
TemperatureFit fit_temperature(const Tensor& logits, std::span<const int> labels);

/// Confidence histogram with per-bin accuracy (100 bins by default).
struct ConfidenceHistogram {
    std::vector<std::size_t> count;
    std::vector<std::size_t> correct;
};

ConfidenceHistogram confidence_histogram(const Tensor& probs, std::span<const int> labels, std::size_t bins = 100);

/// Metrics for one (method, split, batch size) evaluation.
struct EvalRecord {
    std::string method;
    std::string shift_kind = "identity";
    double severity = 0.0;
    std::size_t batch_size = 0;
    std::optional<double> eps;  // prediction-time override, if any
    double temperature = 1.0;
    double accuracy = 0.0;
    double ece = 0.0;
    double brier = 0.0;
    double brier_per_class = 0.0;
    double nll = 0.0;
    std::size_t count = 0;
    std::size_t num_batches = 0;
    std::size_t last_batch_size = 0;
    std::uint64_t seed = 0;
    ConfidenceHistogram histogram;
};

/// Fills the metric fields of `record` from per-example predictions.
void score_predictions(EvalRecord& record, const Tensor& probs, std::span<const int> labels,
                       std::size_t ece_bins = 10);

}  // namespace ptbn
