// Parallel kernels against their serial references.
#include <benchmark/benchmark.h>

#include "qsde/dyson.hpp"
#include "qsde/estimator.hpp"
#include "qsde/linalg.hpp"
#include "qsde/model.hpp"

namespace {

qsde::Mat filled(std::size_t n) {
  qsde::Mat m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m(i, j) = 1.0 / (1.0 + i + 2.0 * j);
  return m;
}

void BM_matmul(benchmark::State& st) {
  qsde::Mat a = filled(st.range(0));
  for (auto _ : st) benchmark::DoNotOptimize(qsde::matmul(a, a));
}
void BM_matmul_serial(benchmark::State& st) {
  qsde::Mat a = filled(st.range(0));
  for (auto _ : st) benchmark::DoNotOptimize(qsde::matmul_serial(a, a));
}
BENCHMARK(BM_matmul)->Arg(64)->Arg(256);
BENCHMARK(BM_matmul_serial)->Arg(64)->Arg(256);

void BM_dyson_blocks(benchmark::State& st) {
  qsde::SdeProblem p = qsde::builtin_model("rotating");
  qsde::TimeGrid g(p.T(), 8, static_cast<int>(st.range(0)));
  for (auto _ : st) benchmark::DoNotOptimize(qsde::dyson_blocks(p, g, 12, false));
}
void BM_dyson_blocks_serial(benchmark::State& st) {
  qsde::SdeProblem p = qsde::builtin_model("rotating");
  qsde::TimeGrid g(p.T(), 8, static_cast<int>(st.range(0)));
  for (auto _ : st) benchmark::DoNotOptimize(qsde::dyson_blocks_serial(p, g, 12, false));
}
BENCHMARK(BM_dyson_blocks)->Arg(256);
BENCHMARK(BM_dyson_blocks_serial)->Arg(256);

void BM_sample_sums(benchmark::State& st) {
  qsde::SdeProblem p = qsde::builtin_model("ou-diag");
  qsde::PathSampler s = qsde::exact_sampler(p, 8, 0, qsde::PcgStream(1, 2));
  auto c = qsde::ObservableTensor::terminal_sum(2, p.N()).resolve(8);
  for (auto _ : st) benchmark::DoNotOptimize(qsde::sample_sums(s, c, 0, 1.0, 1, st.range(0)));
}
void BM_sample_sums_serial(benchmark::State& st) {
  qsde::SdeProblem p = qsde::builtin_model("ou-diag");
  qsde::PathSampler s = qsde::exact_sampler(p, 8, 0, qsde::PcgStream(1, 2));
  auto c = qsde::ObservableTensor::terminal_sum(2, p.N()).resolve(8);
  for (auto _ : st) benchmark::DoNotOptimize(qsde::sample_sums_serial(s, c, 0, 1.0, 1, st.range(0)));
}
BENCHMARK(BM_sample_sums)->Arg(1 << 16);
BENCHMARK(BM_sample_sums_serial)->Arg(1 << 16);

}  // namespace

BENCHMARK_MAIN();
