#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "cora/kernels.hpp"

namespace {

std::vector<double> random_values(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> dist;
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

void BM_GemmReference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    cora::kernels::reference::gemm(n, n, n, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}

void BM_GemmParallel(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    cora::kernels::gemm(n, n, n, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}

// 64 -> 128 channels, 3x3, 14x14 input with padding 1.
template <bool Parallel>
void BM_Conv(benchmark::State& state) {
  const std::size_t m = 128, n = 64, k = 3, hw = static_cast<std::size_t>(state.range(0));
  const cora::ConvGeometry g{1, 1, 1, 1};
  const auto w = random_values(m * n * k * k, 3), x = random_values(n * hw * hw, 4);
  std::vector<double> y(m * hw * hw);
  for (auto _ : state) {
    if constexpr (Parallel)
      cora::kernels::conv2d(w.data(), m, n, k, k, x.data(), hw, hw, g, y.data());
    else
      cora::kernels::reference::conv2d(w.data(), m, n, k, k, x.data(), hw, hw, g, y.data());
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * m * n * k * k * hw * hw);
}

}  // namespace

BENCHMARK(BM_GemmReference)->Arg(64)->Arg(256);
BENCHMARK(BM_GemmParallel)->Arg(64)->Arg(256);
BENCHMARK(BM_Conv<false>)->Name("BM_ConvReference")->Arg(7)->Arg(14)->Arg(28);
BENCHMARK(BM_Conv<true>)->Name("BM_ConvParallel")->Arg(7)->Arg(14)->Arg(28);

BENCHMARK_MAIN();
