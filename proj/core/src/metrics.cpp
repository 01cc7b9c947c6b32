#include "ptbn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ptbn/error.hpp"

namespace ptbn {

void validate_predictions(const Tensor& probs, std::span<const int> labels) {
    if (probs.rank() != 2) throw ShapeError("predictions must be [n, K]");
    const std::size_t n = probs.dim(0), K = probs.dim(1);
    if (labels.size() != n) throw ShapeError("predictions and labels disagree on n");
    const auto d = probs.data();
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            const double p = d[i * K + k];
            if (!(p >= 0.0 && p <= 1.0)) throw ShapeError("prediction row " + std::to_string(i) + " leaves [0, 1]");
            s += p;
        }
        if (std::abs(s - 1.0) > 1e-6) throw ShapeError("prediction row " + std::to_string(i) + " does not sum to 1");
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= K) {
            throw ShapeError("label " + std::to_string(labels[i]) + " out of range");
        }
    }
}

std::vector<int> argmax_rows(const Tensor& m) {
    if (m.rank() != 2) throw ShapeError("argmax_rows: need [n, K]");
    const std::size_t n = m.dim(0), K = m.dim(1);
    const auto d = m.data();
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k) {
            if (d[i * K + k] > d[i * K + best]) best = k;
        }
        out[i] = static_cast<int>(best);
    }
    return out;
}

std::size_t confidence_bin(double confidence, std::size_t num_bins) {
    if (num_bins == 0) throw ShapeError("need at least one bin");
    const double B = static_cast<double>(num_bins);
    if (!(confidence > 0.0)) return 0;
    if (confidence >= 1.0) return num_bins - 1;
    auto b = std::min(num_bins - 1, static_cast<std::size_t>(std::floor(confidence * B)));
    // floor(c * B) can be off by one near an edge; settle against the edge b / B itself
    while (b + 1 < num_bins && confidence >= static_cast<double>(b + 1) / B) ++b;
    while (b > 0 && confidence < static_cast<double>(b) / B) --b;
    return b;
}

CalibrationBins CalibrationBins::compute(const Tensor& probs, std::span<const int> labels, std::size_t num_bins) {
    validate_predictions(probs, labels);
    CalibrationBins cb;
    cb.num_bins = num_bins;
    cb.count.assign(num_bins, 0);
    cb.confidence_sum.assign(num_bins, 0.0);
    cb.correct.assign(num_bins, 0);
    const std::size_t K = probs.dim(1);
    const auto pred = argmax_rows(probs);
    const auto d = probs.data();
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double conf = d[i * K + static_cast<std::size_t>(pred[i])];
        const auto b = confidence_bin(conf, num_bins);
        ++cb.count[b];
        cb.confidence_sum[b] += conf;
        if (pred[i] == labels[i]) ++cb.correct[b];
    }
    return cb;
}

std::size_t CalibrationBins::total() const { return std::accumulate(count.begin(), count.end(), std::size_t{0}); }

double CalibrationBins::accuracy(std::size_t b) const {
    return count[b] ? static_cast<double>(correct[b]) / static_cast<double>(count[b]) : 0.0;
}

double CalibrationBins::confidence(std::size_t b) const {
    return count[b] ? confidence_sum[b] / static_cast<double>(count[b]) : 0.0;
}

double CalibrationBins::ece() const {
    const double n = static_cast<double>(total());
    double e = 0.0;
    for (std::size_t b = 0; b < num_bins; ++b) {
        if (count[b] == 0) continue;
        e += static_cast<double>(count[b]) / n * std::abs(accuracy(b) - confidence(b));
    }
    return e;
}

double ece(const Tensor& probs, std::span<const int> labels, std::size_t num_bins) {
    return CalibrationBins::compute(probs, labels, num_bins).ece();
}

double brier(const Tensor& probs, std::span<const int> labels) {
    validate_predictions(probs, labels);
    const std::size_t n = probs.dim(0), K = probs.dim(1);
    const auto d = probs.data();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            const double diff = d[i * K + k] - (static_cast<int>(k) == labels[i] ? 1.0 : 0.0);
            s += diff * diff;
        }
        total += s;
    }
    return total / static_cast<double>(n);
}

double brier_per_class(const Tensor& probs, std::span<const int> labels) {
    return brier(probs, labels) / static_cast<double>(probs.dim(1));
}

double nll(const Tensor& probs, std::span<const int> labels) {
    validate_predictions(probs, labels);
    const std::size_t n = probs.dim(0), K = probs.dim(1);
    const auto d = probs.data();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        total -= std::log(std::max(kNllClamp, d[i * K + static_cast<std::size_t>(labels[i])]));
    }
    return total / static_cast<double>(n);
}

double accuracy(const Tensor& probs, std::span<const int> labels) {
    validate_predictions(probs, labels);
    const auto pred = argmax_rows(probs);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size() || scores.empty()) throw ShapeError("auc: scores and labels disagree");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
    double rank_sum = 0.0;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            const int y = labels[order[k]];
            if (y != 0 && y != 1) throw ShapeError("auc: labels must be 0 or 1");
            if (y == 1) {
                rank_sum += r;
                ++pos;
            }
        }
        i = j + 1;
    }
    const std::size_t neg = scores.size() - pos;
    if (pos == 0 || neg == 0) throw ShapeError("auc: need both classes");
    const double p = static_cast<double>(pos), q = static_cast<double>(neg);
    return (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

namespace {

double nll_at_beta(const Tensor& logits, std::span<const int> labels, double beta) {
    const std::size_t n = logits.dim(0), K = logits.dim(1);
    const auto d = logits.data();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* z = d.data() + i * K;
        double m = z[0];
        for (std::size_t k = 1; k < K; ++k) m = std::max(m, z[k]);
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += std::exp(beta * (z[k] - m));
        total += std::log(s) - beta * (z[static_cast<std::size_t>(labels[i])] - m);
    }
    return total / static_cast<double>(n);
}

void check_logits(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || logits.dim(0) == 0) throw ShapeError("logits must be [n, K] with n >= 1");
    if (labels.size() != logits.dim(0)) throw ShapeError("logits and labels disagree on n");
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= logits.dim(1)) throw ShapeError("label out of range");
    }
}

}  // namespace

double nll_from_logits(const Tensor& logits, std::span<const int> labels, double temperature) {
    check_logits(logits, labels);
    if (!(temperature > 0.0)) throw ShapeError("temperature must be positive");
    return nll_at_beta(logits, labels, 1.0 / temperature);
}

TemperatureFit fit_temperature(const Tensor& logits, std::span<const int> labels) {
    check_logits(logits, labels);
    TemperatureFit fit;
    if (std::all_of(labels.begin(), labels.end(), [&](int y) { return y == labels.front(); })) {
        fit.degenerate = true;
        fit.nll = nll_at_beta(logits, labels, 1.0);
        return fit;
    }
    const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
    double lo = 1.0 / kMaxTemperature, hi = 1.0 / kMinTemperature;
    double a = hi - phi * (hi - lo), b = lo + phi * (hi - lo);
    double fa = nll_at_beta(logits, labels, a), fb = nll_at_beta(logits, labels, b);
    for (int it = 0; it < 200 && hi - lo > 1e-10; ++it) {
        if (fa <= fb) {
            hi = b;
            b = a;
            fb = fa;
            a = hi - phi * (hi - lo);
            fa = nll_at_beta(logits, labels, a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + phi * (hi - lo);
            fb = nll_at_beta(logits, labels, b);
        }
    }
    const double beta = 0.5 * (lo + hi);
    fit.temperature = std::clamp(1.0 / beta, kMinTemperature, kMaxTemperature);
    fit.nll = nll_at_beta(logits, labels, 1.0 / fit.temperature);
    return fit;
}

ConfidenceHistogram confidence_histogram(const Tensor& probs, std::span<const int> labels, std::size_t bins) {
    const auto cb = CalibrationBins::compute(probs, labels, bins);
    return ConfidenceHistogram{cb.count, cb.correct};
}

void score_predictions(EvalRecord& record, const Tensor& probs, std::span<const int> labels, std::size_t ece_bins) {
    record.accuracy = accuracy(probs, labels);
    record.ece = ece(probs, labels, ece_bins);
    record.brier = brier(probs, labels);
    record.brier_per_class = record.brier / static_cast<double>(probs.dim(1));
    record.nll = nll(probs, labels);
    record.count = labels.size();
    record.histogram = confidence_histogram(probs, labels, 100);
}

}  // namespace ptbn
