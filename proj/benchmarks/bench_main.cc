#include <benchmark/benchmark.h>

#include <span>

#include "ranktuner/adapter.h"
#include "ranktuner/pruner.h"
#include "ranktuner/random.h"
#include "ranktuner/surrogate.h"
#include "ranktuner/task.h"

namespace rt = ranktuner;

namespace {

// Experiment-sized model: 6 blocks, d_model 32, 4 heads, d_ff 64.
rt::ModelSpec bench_spec() {
  rt::ModelSpec s;
  s.vocab_size = 32;
  return s;
}

const rt::Task& bench_task() {
  static const rt::Task task =
      rt::make_task(rt::TaskKind::kSortedOrder, 3, rt::TaskSizes{256, 64, 64, 6}, 32);
  return task;
}

std::span<const rt::Example> batch_of(std::size_t n) {
  return std::span(bench_task().split(rt::Split::kTrain)).first(n);
}

void BM_Forward(benchmark::State& state) {
  const rt::ModelGraph m = rt::build_model(bench_spec(), 1);
  const auto batch = batch_of(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(rt::forward(m, batch).loss);
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(1)->Arg(16)->Arg(64);

void BM_ForwardBackward(benchmark::State& state) {
  const rt::ModelGraph m = rt::build_model(bench_spec(), 1);
  const auto batch = batch_of(static_cast<std::size_t>(state.range(0)));
  double loss = 0.0;
  for (auto _ : state) {
    auto g = rt::forward_backward(m, batch, nullptr, {}, &loss);
    benchmark::DoNotOptimize(g);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBackward)->Arg(16)->Arg(64);

// Adapter-only gradients, the inner loop of every recovery run.
void BM_AdapterStep(benchmark::State& state) {
  const rt::ModelGraph m = rt::build_model(bench_spec(), 1);
  const rt::RankSpace space;
  const auto tunable = rt::tunable_mask(6, {0, 5});
  const rt::AdaptedModel a = rt::attach_adapters(
      m, rt::uniform_config(tunable, static_cast<int>(state.range(0)), 8), space, 1);
  const auto batch = batch_of(16);
  double loss = 0.0;
  for (auto _ : state) {
    auto g = rt::forward_backward(a.base, batch, &a.adapters, {.base_params = false}, &loss);
    benchmark::DoNotOptimize(g);
  }
}
BENCHMARK(BM_AdapterStep)->Arg(2)->Arg(8)->Arg(12);

void BM_Importance(benchmark::State& state) {
  const rt::ModelGraph m = rt::build_model(bench_spec(), 1);
  const auto groups = rt::build_dependency_groups(m);
  const auto order =
      state.range(0) == 1 ? rt::ImportanceOrder::kElement1 : rt::ImportanceOrder::kElement2;
  for (auto _ : state) {
    auto r = rt::estimate_importance(m, groups, bench_task(), 10, order, 1);
    benchmark::DoNotOptimize(r.scores);
  }
}
BENCHMARK(BM_Importance)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

std::vector<rt::RankConfig> random_configs(std::size_t n) {
  const auto tunable = rt::tunable_mask(6, {0, 5});
  const rt::RankSpace space;
  rt::Rng rng(5, "bench/configs");
  std::vector<rt::RankConfig> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> ranks(6, 8);
    for (std::size_t b = 1; b < 5; ++b) ranks[b] = space.candidates[rng.below(space.candidates.size())];
    out.push_back(rt::make_config(ranks, tunable));
  }
  return out;
}

void BM_SurrogatePredict(benchmark::State& state) {
  const rt::Surrogate s = rt::init_surrogate(4, {32, 32, 32, 1}, 1);
  const auto configs = random_configs(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(rt::predict(s, std::span(configs)));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SurrogatePredict)->Arg(1)->Arg(512);

void BM_SurrogateFit(benchmark::State& state) {
  const auto configs = random_configs(64);
  std::vector<rt::EvalRecord> recs;
  for (const auto& c : configs) {
    recs.push_back({c, "t", 0.5 + 0.01 * c.ranks[1], rt::RecordPhase::kOffline});
  }
  for (auto _ : state) {
    rt::Surrogate s = rt::init_surrogate(4, {32, 32, 32, 1}, 1);
    benchmark::DoNotOptimize(rt::fit(s, recs, {static_cast<std::size_t>(state.range(0)), 1e-2}));
  }
}
BENCHMARK(BM_SurrogateFit)->Arg(200)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
