#include <benchmark/benchmark.h>

#include <cmath>

#include "bench_util.hpp"
#include "tsca/transport.hpp"

namespace {

using namespace tsca;

// n patches against m compositions at d = 32.
void BM_CtDistance(benchmark::State& state) {
  std::mt19937_64 rng(1);
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto m = static_cast<std::size_t>(state.range(1));
  const DiscreteDistribution p{bench::uniform(rng, 32, n), bench::simplex(rng, n)};
  const DiscreteDistribution q{bench::uniform(rng, 32, m), bench::simplex(rng, m)};
  for (auto _ : state) benchmark::DoNotOptimize(ct_distance(p, q, {std::log(0.1)}).distance);
  state.SetComplexityN(static_cast<benchmark::IterationCount>(n * m));
}
BENCHMARK(BM_CtDistance)->ArgsProduct({{8, 64, 256}, {16, 192}})->Complexity();

void BM_TotalCtAndCycle(benchmark::State& state) {
  std::mt19937_64 rng(2);
  const auto m = static_cast<std::size_t>(state.range(0));
  TriSet t;
  t.patches = {bench::uniform(rng, 16, 8), bench::simplex(rng, 8)};
  t.compositions = {bench::uniform(rng, 16, m), bench::simplex(rng, m)};
  t.primitives = {bench::uniform(rng, 16, 12), bench::simplex(rng, 12)};
  t.beta_state = bench::simplex(rng, 6);
  t.beta_object = bench::simplex(rng, 6);
  t.num_states = 6;
  for (auto _ : state) {
    const TotalCtResult r = total_ct(t, {0.0});
    benchmark::DoNotOptimize(
        cycle_matrix(r.patch_comp.backward, r.patch_prim.forward, r.comp_prim.backward));
  }
}
BENCHMARK(BM_TotalCtAndCycle)->Arg(16)->Arg(36)->Arg(192);

void BM_FeasibilityFilter(benchmark::State& state) {
  std::mt19937_64 rng(3);
  const auto c = static_cast<std::size_t>(state.range(0));
  std::vector<double> scores(c);
  std::vector<bool> seen(c);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < c; ++i) {
    scores[i] = u(rng);
    seen[i] = i % 3 == 0;
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(filter_compositions(scores, seen, FilterThreshold::at_quantile(0.5)));
  }
}
BENCHMARK(BM_FeasibilityFilter)->Arg(192)->Arg(28175);

}  // namespace
