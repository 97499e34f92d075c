#include <cstdint>
#include <vector>

#include <benchmark/benchmark.h>

#include "permanence/kernels.hpp"
#include "permanence/rng.hpp"

using namespace permanence;

namespace {

struct Problem {
  Eigen::MatrixXd X;
  Eigen::MatrixXd Z;
  Eigen::VectorXd y;
  std::vector<int> group;
  int n_groups = 0;
};

// Study-scale mixed-model design: subjects x comparisons, 10 fixed columns.
const Problem& problem() {
  static const Problem p = [] {
    Problem out;
    out.n_groups = 276;
    const int per = 150;
    const Eigen::Index n = static_cast<Eigen::Index>(out.n_groups) * per;
    Rng rng(1);
    out.X.resize(n, 10);
    out.Z.resize(n, 2);
    out.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int g = static_cast<int>(i / per);
      const double t = 6.0 * static_cast<double>(1 + i % 17);
      out.group.push_back(g);
      out.X(i, 0) = 1.0;
      for (Eigen::Index c = 1; c < 10; ++c) out.X(i, c) = rng.normal();
      out.Z(i, 0) = 1.0;
      out.Z(i, 1) = t;
      out.y(i) = rng.normal();
    }
    return out;
  }();
  return p;
}

Eigen::MatrixXd lambda() {
  Eigen::MatrixXd L(2, 2);
  L << 1.2, 0.0, 0.1, 0.05;
  return L;
}

std::vector<kernels::DrawSpec> draw_specs() {
  std::vector<kernels::DrawSpec> specs;
  for (std::uint64_t i = 0; i < 4000; ++i) specs.push_back({mix_seed(7, i), 40000, 10});
  return specs;
}

template <auto Fn>
void subject_blocks(benchmark::State& state) {
  const auto& p = problem();
  for (auto _ : state) benchmark::DoNotOptimize(Fn(p.X, p.Z, p.y, p.group, p.n_groups));
}

template <auto Fn>
void reml_terms(benchmark::State& state) {
  const auto& p = problem();
  const auto blocks = kernels::serial::subject_blocks(p.X, p.Z, p.y, p.group, p.n_groups);
  const auto L = lambda();
  for (auto _ : state) benchmark::DoNotOptimize(Fn(blocks, L));
}

template <auto Fn>
void impostor_draws(benchmark::State& state) {
  const auto specs = draw_specs();
  for (auto _ : state) benchmark::DoNotOptimize(Fn(specs));
}

template <auto Fn>
void wilson_coverage(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(Fn(0.01, 1000, 2000, 0.95, 3));
}

template <auto Fn>
void vif_columns(benchmark::State& state) {
  const auto& p = problem();
  const Eigen::MatrixXd X = p.X.rightCols(9);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(X, false));
}

}  // namespace

BENCHMARK(subject_blocks<kernels::serial::subject_blocks>)->Name("subject_blocks/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(subject_blocks<kernels::parallel::subject_blocks>)->Name("subject_blocks/parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(reml_terms<kernels::serial::reml_terms>)->Name("reml_terms/serial")->Unit(benchmark::kMicrosecond);
BENCHMARK(reml_terms<kernels::parallel::reml_terms>)->Name("reml_terms/parallel")->Unit(benchmark::kMicrosecond);
BENCHMARK(impostor_draws<kernels::serial::impostor_draws>)->Name("impostor_draws/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(impostor_draws<kernels::parallel::impostor_draws>)->Name("impostor_draws/parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(wilson_coverage<kernels::serial::wilson_coverage>)->Name("wilson_coverage/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(wilson_coverage<kernels::parallel::wilson_coverage>)->Name("wilson_coverage/parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(vif_columns<kernels::serial::vif_columns>)->Name("vif_columns/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(vif_columns<kernels::parallel::vif_columns>)->Name("vif_columns/parallel")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
