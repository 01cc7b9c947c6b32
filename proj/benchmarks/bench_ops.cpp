#include <benchmark/benchmark.h>

#include <vector>

#include "ptbn/metrics.hpp"
#include "ptbn/normalization.hpp"
#include "ptbn/rng.hpp"
#include "ptbn/tensor.hpp"

namespace {

ptbn::Tensor random_tensor(ptbn::Shape shape, std::uint64_t seed) {
    ptbn::Rng rng(seed);
    ptbn::Tensor t(std::move(shape));
    for (auto& v : t.mutable_data()) v = rng.normal();
    return t;
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_tensor({n, n}, 1);
    const auto b = random_tensor({n, n}, 2);
    for (auto _ : state) benchmark::DoNotOptimize(ptbn::matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_Conv2d(benchmark::State& state) {
    const auto batch = static_cast<std::size_t>(state.range(0));
    const auto x = random_tensor({batch, 16, 16, 16}, 3);
    const auto w = random_tensor({32, 16, 3, 3}, 4);
    for (auto _ : state) benchmark::DoNotOptimize(ptbn::conv2d(x, w, 1, 1));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_Conv2d)->Arg(10)->Arg(100);

void BM_BatchNormEval(benchmark::State& state) {
    const auto batch = static_cast<std::size_t>(state.range(0));
    const auto x = random_tensor({batch, 32, 8, 8}, 5);
    auto st = ptbn::NormState::init(32, 1e-3, 0.99);
    ptbn::NormCall call;
    call.mode = state.range(1) ? ptbn::NormMode::EvalBatch : ptbn::NormMode::EvalEMA;
    for (auto _ : state) benchmark::DoNotOptimize(ptbn::bn_forward(x, st, st.gamma, st.beta, call));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_BatchNormEval)->Args({100, 0})->Args({100, 1})->Args({500, 1});

void BM_Ece(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto p = ptbn::softmax(random_tensor({n, 10}, 6));
    ptbn::Rng rng(7);
    std::vector<int> labels(n);
    for (auto& y : labels) y = static_cast<int>(rng.below(10));
    for (auto _ : state) benchmark::DoNotOptimize(ptbn::ece(p, labels, 10));
}
BENCHMARK(BM_Ece)->Arg(10000);

}  // namespace

BENCHMARK_MAIN();
