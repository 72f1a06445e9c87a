#include <benchmark/benchmark.h>

#include "attnstyle/attention.hpp"
#include "attnstyle/sample.hpp"

using namespace attnstyle;

static void BM_Attention(benchmark::State& state) {
    int64_t n = state.range(0);
    std::mt19937_64 rng(7);
    auto Q = ag::constant(Tensor::randn({2, n, 16}, rng));
    auto K = ag::constant(Tensor::randn({2, n, 16}, rng));
    auto V = ag::constant(Tensor::randn({2, n, 16}, rng));
    for (auto _ : state) {
        auto out = attention(Q, K, V);
        benchmark::DoNotOptimize(out->value.data());
    }
}
BENCHMARK(BM_Attention)->Arg(64)->Arg(256)->Arg(1024);

static void BM_DdimStep(benchmark::State& state) {
    auto sched = DiffusionSchedule::scaled_linear(100);
    std::mt19937_64 rng(8);
    Tensor z = Tensor::randn({4, 32, 32}, rng);
    Tensor eps = Tensor::randn({4, 32, 32}, rng);
    for (auto _ : state) {
        Tensor out = ddim_step(z, 50, 48, eps, sched);
        benchmark::DoNotOptimize(out.data());
    }
}
BENCHMARK(BM_DdimStep);

BENCHMARK_MAIN();
