#pragma once

// Brute-force metric implementations used as test oracles. They share no code
// with the library: bins are found by scanning edges, and sums use long double.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "ptbn/rng.hpp"
#include "ptbn/tensor.hpp"

namespace ptbn::oracle {

inline std::size_t predicted_class(std::span<const double> row) {
    std::size_t best = 0;
    for (std::size_t k = 0; k < row.size(); ++k)
        if (row[k] > row[best]) best = k;
    return best;
}

inline std::span<const double> row(const Tensor& p, std::size_t i) { return p.data().subspan(i * p.dim(1), p.dim(1)); }

// Linear scan over edges b / B; an interior edge belongs to the upper bin.
inline std::size_t scan_bin(double c, std::size_t bins) {
    std::size_t found = 0;
    for (std::size_t b = 0; b < bins; ++b) {
        const double lo = static_cast<double>(b) / static_cast<double>(bins);
        if (c >= lo) found = b;
    }
    return found;
}

// Visits examples bin by bin, in example order within each bin.
inline double ece(const Tensor& p, std::span<const int> labels, std::size_t bins) {
    const std::size_t n = labels.size();
    double e = 0.0;
    for (std::size_t b = 0; b < bins; ++b) {
        std::size_t count = 0, correct = 0;
        double conf_sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto r = row(p, i);
            const std::size_t k = predicted_class(r);
            if (scan_bin(r[k], bins) != b) continue;
            ++count;
            conf_sum += r[k];
            if (static_cast<int>(k) == labels[i]) ++correct;
        }
        if (count == 0) continue;
        const double acc = static_cast<double>(correct) / static_cast<double>(count);
        const double conf = conf_sum / static_cast<double>(count);
        e += static_cast<double>(count) / static_cast<double>(n) * std::abs(acc - conf);
    }
    return e;
}

inline double accuracy(const Tensor& p, std::span<const int> labels) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (static_cast<int>(predicted_class(row(p, i))) == labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

inline double brier(const Tensor& p, std::span<const int> labels) {
    long double total = 0.0L;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto r = row(p, i);
        for (std::size_t k = 0; k < r.size(); ++k) {
            const long double t = static_cast<int>(k) == labels[i] ? 1.0L : 0.0L;
            total += (r[k] - t) * (r[k] - t);
        }
    }
    return static_cast<double>(total / labels.size());
}

inline double nll(const Tensor& p, std::span<const int> labels) {
    long double total = 0.0L;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double q = row(p, i)[static_cast<std::size_t>(labels[i])];
        total -= std::log(static_cast<long double>(q < 1e-12 ? 1e-12 : q));
    }
    return static_cast<double>(total / labels.size());
}

struct Case {
    Tensor probs;
    std::vector<int> labels;
    std::size_t bins = 10;
};

// Random prediction set: softmax rows of varied sharpness, some one-hot rows,
// some rows whose confidence sits exactly on a bin edge.
inline Case random_case(Rng& rng, std::size_t max_n = 10000, std::size_t max_k = 10) {
    Case c;
    const std::size_t n = 1 + rng.below(max_n);
    const std::size_t K = 2 + rng.below(max_k - 1);
    c.bins = 1 + rng.below(20);
    const double sharp = rng.uniform(0.1, 6.0);
    std::vector<double> d(n * K);
    for (std::size_t i = 0; i < n; ++i) {
        double* r = d.data() + i * K;
        const double u = rng.uniform();
        if (u < 0.05) {
            for (std::size_t k = 0; k < K; ++k) r[k] = 0.0;
            r[rng.below(K)] = 1.0;
        } else if (u < 0.15) {
            // confidence exactly on an edge b / bins with b / bins >= 1 / K
            const std::size_t lo_b = static_cast<std::size_t>(std::ceil(static_cast<double>(c.bins) / K));
            const std::size_t b = lo_b + rng.below(c.bins - std::min(lo_b, c.bins) + 1);
            const double top = std::min(1.0, static_cast<double>(b) / static_cast<double>(c.bins));
            const std::size_t at = rng.below(K);
            for (std::size_t k = 0; k < K; ++k) r[k] = k == at ? top : (1.0 - top) / static_cast<double>(K - 1);
        } else {
            double m = -1e300;
            for (std::size_t k = 0; k < K; ++k) m = std::max(m, r[k] = sharp * rng.normal());
            double s = 0.0;
            for (std::size_t k = 0; k < K; ++k) s += (r[k] = std::exp(r[k] - m));
            for (std::size_t k = 0; k < K; ++k) r[k] /= s;
        }
    }
    c.probs = Tensor({n, K}, std::move(d));
    c.labels.resize(n);
    for (auto& y : c.labels) y = static_cast<int>(rng.below(K));
    return c;
}

}  // namespace ptbn::oracle
