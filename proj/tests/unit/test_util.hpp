#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ptbn/rng.hpp"
#include "ptbn/tensor.hpp"

namespace ptbn::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (auto& v : t.mutable_data()) v = scale * rng.normal();
    return t;
}

inline Tensor random_probs(std::size_t n, std::size_t k, Rng& rng, double sharpness = 1.0) {
    Tensor z({n, k});
    for (auto& v : z.mutable_data()) v = sharpness * rng.normal();
    return softmax(z);
}

/// Analytic gradients of f at `inputs` versus central differences.
/// Relative error |a - n| / max(|a|, |n|, floor) must stay below `tol`.
inline void expect_gradients_match(const std::function<Tensor(std::span<const Tensor>)>& f,
                                   std::vector<Tensor> inputs, double tol = 1e-4, double h = 1e-5,
                                   double floor = 1e-3) {
    std::vector<std::vector<Scalar>> analytic;
    {
        GradTape tape;
        std::vector<Tensor> leaves;
        for (const auto& x : inputs) leaves.push_back(tape.watch(x));
        const Tensor loss = f(leaves);
        tape.backward(loss);
        for (const auto& l : leaves) analytic.emplace_back(l.grad().begin(), l.grad().end());
    }
    auto eval = [&](std::vector<Tensor>& xs) { return f(xs).item(); };
    for (std::size_t a = 0; a < inputs.size(); ++a) {
        ASSERT_EQ(analytic[a].size(), inputs[a].numel());
        for (std::size_t i = 0; i < inputs[a].numel(); ++i) {
            std::vector<Tensor> plus, minus;
            for (const auto& x : inputs) {
                plus.push_back(x.detach());
                minus.push_back(x.detach());
            }
            plus[a].mutable_data()[i] += h;
            minus[a].mutable_data()[i] -= h;
            const double numeric = (eval(plus) - eval(minus)) / (2 * h);
            const double err = std::abs(analytic[a][i] - numeric) /
                               std::max({std::abs(analytic[a][i]), std::abs(numeric), floor});
            EXPECT_LT(err, tol) << "input " << a << " element " << i << ": analytic " << analytic[a][i]
                                << " numeric " << numeric;
        }
    }
}

}  // namespace ptbn::testing
