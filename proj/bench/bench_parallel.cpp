// Serial reference versus OpenMP path for each parallel kernel.
// The second benchmark argument selects the path: 0 serial, 1 parallel.

#include <benchmark/benchmark.h>

#include "robloc/cli_eval.hpp"
#include "robloc/nlos_learn.hpp"
#include "robloc/random.hpp"
#include "robloc/simkit.hpp"
#include "robloc/vb_noise.hpp"

using namespace robloc;

namespace {

Execution exec_of(const benchmark::State& state) {
  return state.range(1) == 0 ? Execution::serial : Execution::parallel;
}

void BM_Generate(benchmark::State& state) {
  auto sc = urban_scenario(1);
  sc.duration_s = static_cast<double>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(generate(sc, exec_of(state)));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Generate)->ArgsProduct({{300, 1200}, {0, 1}})->Unit(benchmark::kMillisecond);

void BM_BankRefit(benchmark::State& state) {
  const auto n_sats = static_cast<SatId>(state.range(0));
  NestedUpdateConfig cfg;
  NoiseModelBank bank(cfg);
  CounterRng rng(7, 0, 0, StreamTag::synthetic);
  std::vector<ResidualSample> samples;
  for (int e = 0; e < cfg.window_epochs; ++e)
    for (SatId s = 1; s <= n_sats; ++s) {
      const bool nlos = rng.uniform() < 0.3;
      samples.push_back({s, Epoch{static_cast<double>(e), e}, nlos ? 15.0 + 3.0 * rng.normal() : rng.normal(), 2.2e7});
    }
  bank.add_residuals(samples);
  const Epoch now{static_cast<double>(cfg.window_epochs - 1), cfg.window_epochs - 1};
  for (auto _ : state) benchmark::DoNotOptimize(bank.refit(now, exec_of(state)));
}
BENCHMARK(BM_BankRefit)->ArgsProduct({{8, 16}, {0, 1}})->Unit(benchmark::kMillisecond);

void BM_PermutationImportance(benchmark::State& state) {
  SyntheticSetConfig sc;
  sc.n = 2000;
  sc.nlos_fraction = 0.5;
  sc.features = {{"noise", 0.0, 0.0, 1.0}, {"cn0", 40.0, 34.0, 3.0}, {"elevation", 45.0, 42.0, 10.0}};
  sc.seed = 5;
  const auto set = synthetic_sample_set(sc);
  const auto model = train_classifier(set, ClassifierConfig{});
  for (auto _ : state)
    benchmark::DoNotOptimize(permutation_importance(model, set, static_cast<int>(state.range(0)), 11, exec_of(state)));
}
BENCHMARK(BM_PermutationImportance)->ArgsProduct({{4, 16}, {0, 1}})->Unit(benchmark::kMillisecond);

void BM_SweepCells(benchmark::State& state) {
  auto sc = urban_scenario(2);
  sc.duration_s = 60.0;
  const auto ds = generate(sc);
  SweepConfig cfg;
  cfg.run.deterministic = true;
  cfg.families = {KernelFamily::cauchy, KernelFamily::huber};
  cfg.efficiencies = {EfficiencyLevel::e80, EfficiencyLevel::e95};
  for (auto _ : state) benchmark::DoNotOptimize(run_sweep(ds, cfg, exec_of(state)));
}
BENCHMARK(BM_SweepCells)->ArgsProduct({{0}, {0, 1}})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
