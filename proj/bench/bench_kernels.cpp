// Serial-reference vs OpenMP kernel throughput. Run with
//   ./bench/bench_kernels --benchmark_filter=matmul
#include <benchmark/benchmark.h>

#include <vector>

#include "dermfoundry/kernels.hpp"
#include "dermfoundry/rng.hpp"

namespace k = dermfoundry::kernels;

namespace {

std::vector<double> random_vec(std::size_t n) {
  dermfoundry::Rng rng(12345);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

void bm_matmul_serial(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto a = random_vec(static_cast<std::size_t>(n) * n);
  const auto b = random_vec(static_cast<std::size_t>(n) * n);
  std::vector<double> c(static_cast<std::size_t>(n) * n);
  for (auto _ : state) {
    k::serial::matmul(a.data(), b.data(), c.data(), n, n, n);
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * 2L * n * n * n);
}

void bm_matmul_omp(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto a = random_vec(static_cast<std::size_t>(n) * n);
  const auto b = random_vec(static_cast<std::size_t>(n) * n);
  std::vector<double> c(static_cast<std::size_t>(n) * n);
  for (auto _ : state) {
    k::par::matmul(a.data(), b.data(), c.data(), n, n, n);
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * 2L * n * n * n);
}

void bm_softmax_serial(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto x = random_vec(static_cast<std::size_t>(n) * n);
  std::vector<double> y(static_cast<std::size_t>(n) * n);
  for (auto _ : state) {
    k::serial::row_softmax(x.data(), y.data(), n, n);
    benchmark::ClobberMemory();
  }
}

void bm_softmax_omp(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto x = random_vec(static_cast<std::size_t>(n) * n);
  std::vector<double> y(static_cast<std::size_t>(n) * n);
  for (auto _ : state) {
    k::par::row_softmax(x.data(), y.data(), n, n);
    benchmark::ClobberMemory();
  }
}

void bm_layernorm_serial(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto x = random_vec(static_cast<std::size_t>(n) * n);
  std::vector<double> y(static_cast<std::size_t>(n) * n), mu(n), is(n);
  for (auto _ : state) {
    k::serial::layer_norm_rows(x.data(), y.data(), mu.data(), is.data(), n, n, 1e-6);
    benchmark::ClobberMemory();
  }
}

void bm_layernorm_omp(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto x = random_vec(static_cast<std::size_t>(n) * n);
  std::vector<double> y(static_cast<std::size_t>(n) * n), mu(n), is(n);
  for (auto _ : state) {
    k::par::layer_norm_rows(x.data(), y.data(), mu.data(), is.data(), n, n, 1e-6);
    benchmark::ClobberMemory();
  }
}

}  // namespace

BENCHMARK(bm_matmul_serial)->Arg(64)->Arg(128)->Arg(256)->Arg(512);
BENCHMARK(bm_matmul_omp)->Arg(64)->Arg(128)->Arg(256)->Arg(512);
BENCHMARK(bm_softmax_serial)->Arg(256)->Arg(1024);
BENCHMARK(bm_softmax_omp)->Arg(256)->Arg(1024);
BENCHMARK(bm_layernorm_serial)->Arg(256)->Arg(1024);
BENCHMARK(bm_layernorm_omp)->Arg(256)->Arg(1024);

BENCHMARK_MAIN();
