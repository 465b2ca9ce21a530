// Serial reference vs OpenMP kernels at the shapes the training loop
// actually hits (packed-batch linears) plus square sizes.

#include <benchmark/benchmark.h>

#include <vector>

#include "panfm/kernels.hpp"
#include "panfm/rng.hpp"

namespace {

struct MatmulCase {
  int m, k, n;
};

void fill(std::vector<double>& v, panfm::RngStream& rng) {
  for (auto& x : v) x = rng.normal();
}

void bm_matmul_serial(benchmark::State& state) {
  const MatmulCase c{static_cast<int>(state.range(0)), static_cast<int>(state.range(1)),
                     static_cast<int>(state.range(2))};
  panfm::RngStream rng(1);
  std::vector<double> a(static_cast<size_t>(c.m) * c.k), b(static_cast<size_t>(c.k) * c.n),
      out(static_cast<size_t>(c.m) * c.n);
  fill(a, rng);
  fill(b, rng);
  for (auto _ : state) {
    panfm::kernels::matmul_serial(a.data(), b.data(), out.data(), c.m, c.k, c.n);
    benchmark::DoNotOptimize(out.data());
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(c.m) * c.k * c.n);
}

void bm_matmul_omp(benchmark::State& state) {
  const MatmulCase c{static_cast<int>(state.range(0)), static_cast<int>(state.range(1)),
                     static_cast<int>(state.range(2))};
  panfm::RngStream rng(1);
  std::vector<double> a(static_cast<size_t>(c.m) * c.k), b(static_cast<size_t>(c.k) * c.n),
      out(static_cast<size_t>(c.m) * c.n);
  fill(a, rng);
  fill(b, rng);
  for (auto _ : state) {
    panfm::kernels::matmul_omp(a.data(), b.data(), out.data(), c.m, c.k, c.n);
    benchmark::DoNotOptimize(out.data());
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(c.m) * c.k * c.n);
}

}  // namespace

// packed desk-scale batch (64 sequences x 19 tokens), MLP widths
BENCHMARK(bm_matmul_serial)->Args({1216, 32, 128})->Args({1216, 128, 32})->Args({256, 256, 256})->Args({512, 512, 512});
BENCHMARK(bm_matmul_omp)->Args({1216, 32, 128})->Args({1216, 128, 32})->Args({256, 256, 256})->Args({512, 512, 512});

BENCHMARK_MAIN();
