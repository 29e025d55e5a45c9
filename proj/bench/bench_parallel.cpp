#include <benchmark/benchmark.h>

#include <random>
#include <string>

#include "dynconn/kernels.hpp"
#include "dynconn/sliding_window.hpp"
#include "dynconn/surrogate.hpp"

using namespace dynconn;

namespace {

TimeSeries random_series(Index n, Index d) {
  auto rng = rng::make_engine(7, {});
  std::normal_distribution<double> normal;
  TimeSeries ts;
  ts.x = unit_grid(n);
  ts.values.resize(n, d);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j) ts.values(i, j) = normal(rng);
  }
  for (Index j = 0; j < d; ++j) ts.channel_names.push_back("c" + std::to_string(j));
  return ts;
}

void BM_window_parallel(benchmark::State& state) {
  const auto ts = random_series(state.range(0), 4);
  const auto cfg = WindowConfig::fraction(0.1);
  for (auto _ : state) benchmark::DoNotOptimize(estimate(ts, cfg));
}

void BM_window_serial(benchmark::State& state) {
  const auto ts = random_series(state.range(0), 4);
  const auto cfg = WindowConfig::fraction(0.1);
  for (auto _ : state) benchmark::DoNotOptimize(reference::estimate_serial(ts, cfg));
}

void BM_cholesky_toeplitz(benchmark::State& state) {
  const auto x = unit_grid(state.range(0));
  const auto spec = kernel_preset("periodic");
  for (auto _ : state) benchmark::DoNotOptimize(kernel_cholesky(spec, x));
}

void BM_cholesky_dense(benchmark::State& state) {
  const auto x = unit_grid(state.range(0));
  const auto spec = kernel_preset("periodic");
  for (auto _ : state) benchmark::DoNotOptimize(reference::kernel_cholesky_dense(spec, x));
}

void BM_surrogate_fft(benchmark::State& state) {
  const auto ts = random_series(state.range(0), 2);
  auto rng = rng::make_engine(11, {});
  const auto draw = draw_phases(ts.n(), rng);
  for (auto _ : state) benchmark::DoNotOptimize(apply_phases(ts, draw));
}

void BM_surrogate_dft(benchmark::State& state) {
  const auto ts = random_series(state.range(0), 2);
  auto rng = rng::make_engine(11, {});
  const auto draw = draw_phases(ts.n(), rng);
  for (auto _ : state) benchmark::DoNotOptimize(reference::apply_phases_dft(ts, draw));
}

}  // namespace

BENCHMARK(BM_window_parallel)->Arg(150)->Arg(600)->Arg(2400);
BENCHMARK(BM_window_serial)->Arg(150)->Arg(600)->Arg(2400);
BENCHMARK(BM_cholesky_toeplitz)->Arg(150)->Arg(300)->Arg(600);
BENCHMARK(BM_cholesky_dense)->Arg(150)->Arg(300)->Arg(600);
BENCHMARK(BM_surrogate_fft)->Arg(150)->Arg(600)->Arg(2400);
BENCHMARK(BM_surrogate_dft)->Arg(150)->Arg(600)->Arg(2400);

BENCHMARK_MAIN();
