#include <benchmark/benchmark.h>

#include <vector>

#include "groupaudit/bootstrap.hpp"
#include "groupaudit/groups.hpp"
#include "groupaudit/rkhs.hpp"
#include "groupaudit/synth.hpp"

using namespace groupaudit;

namespace {

SyntheticData synth(SynthModel model, std::size_t n, std::uint64_t seed) {
  SyntheticSpec s;
  s.model = model;
  s.audit_n = n;
  s.seed = seed;
  return generate(s);
}

struct GridFixture {
  SyntheticData data;
  GroupCollection groups;
  ResolvedTarget target;
  PreparedGroups prepared;
  ProcessInputs inputs;

  explicit GridFixture(std::size_t n, std::size_t cells)
      : data(synth(SynthModel::kHeteroskedastic, n, 1)),
        groups(interval_grid(data.trail, "x", endpoints(cells))),
        target(resolve_target(data.trail, FixedTarget{0.0})),
        prepared(prepare_groups(groups)),
        inputs(make_inputs(data.trail, target, prepared)) {}

  static std::vector<double> endpoints(std::size_t cells) {
    std::vector<double> e(cells + 1);
    for (std::size_t i = 0; i <= cells; ++i) e[i] = static_cast<double>(i) / static_cast<double>(cells);
    return e;
  }
};

BootstrapConfig config(std::size_t replicates) {
  BootstrapConfig c;
  c.replicates = replicates;
  c.seed = 7;
  return c;
}

// args: n, cells, engine (0 parallel, 1 serial), fast path
void BM_ReplicateMaxima(benchmark::State& state) {
  GridFixture f(static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)));
  ProcessSpec spec;
  spec.kind = StatisticKind::kBoolean;
  spec.tolerance = 0.5;
  spec.fast_path = state.range(3) != 0;
  const Engine engine = state.range(2) == 0 ? Engine::kParallel : Engine::kSerial;
  const auto cfg = config(200);
  for (auto _ : state) benchmark::DoNotOptimize(replicate_maxima(f.inputs, spec, cfg, engine));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(cfg.replicates));
}
BENCHMARK(BM_ReplicateMaxima)
    ->ArgNames({"n", "cells", "serial", "fast"})
    ->Args({1600, 20, 0, 0})
    ->Args({1600, 20, 1, 0})
    ->Args({1600, 20, 0, 1})
    ->Args({1600, 50, 0, 0})
    ->Args({1600, 50, 0, 1})
    ->Unit(benchmark::kMillisecond);

void BM_GroupDeltas(benchmark::State& state) {
  GridFixture f(1600, 20);
  const Engine engine = state.range(0) == 0 ? Engine::kParallel : Engine::kSerial;
  const auto cfg = config(200);
  for (auto _ : state) benchmark::DoNotOptimize(replicate_group_deltas(f.inputs, cfg, engine));
}
BENCHMARK(BM_GroupDeltas)->ArgName("serial")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

struct RkhsFixture {
  SyntheticData data;
  KernelSpec spec;
  Eigen::MatrixXd points;
  std::vector<std::uint32_t> w;

  explicit RkhsFixture(std::size_t n, SynthModel model)
      : data(synth(model, n, 3)) {
    spec.bandwidth = 0.3;
    spec.columns = {"x"};
    points = kernel_points(data.trail, spec);
    w = resample_weights(11, 0, n);
  }
};

void BM_RkhsDense(benchmark::State& state) {
  RkhsFixture f(static_cast<std::size_t>(state.range(0)), SynthModel::kHeteroskedastic);
  const auto factor = factor_kernel(gram(f.spec, f.points, f.points));
  for (auto _ : state) benchmark::DoNotOptimize(rkhs_replicate_dense(factor, f.data.trail.loss(), f.w, 0.0));
}
BENCHMARK(BM_RkhsDense)->ArgName("n")->Arg(100)->Arg(400)->Unit(benchmark::kMillisecond);

// args: n, discrete covariate
void BM_RkhsLowRank(benchmark::State& state) {
  RkhsFixture f(static_cast<std::size_t>(state.range(0)),
                state.range(1) != 0 ? SynthModel::kDiscrete : SynthModel::kHeteroskedastic);
  const auto anchors = anchor_kernel(f.points, f.spec);
  for (auto _ : state) benchmark::DoNotOptimize(rkhs_replicate_lowrank(anchors, f.data.trail.loss(), f.w, 0.0));
}
BENCHMARK(BM_RkhsLowRank)
    ->ArgNames({"n", "discrete"})
    ->Args({100, 0})
    ->Args({400, 0})
    ->Args({1600, 1})
    ->Unit(benchmark::kMillisecond);

void BM_RkhsCriticalValue(benchmark::State& state) {
  RkhsFixture f(400, SynthModel::kDiscrete);
  RkhsOptions opt;
  opt.engine = state.range(0) == 0 ? Engine::kParallel : Engine::kSerial;
  const auto cfg = config(100);
  for (auto _ : state) {
    benchmark::DoNotOptimize(rkhs_critical_value(f.data.trail, FixedTarget{0.0}, f.spec, cfg, opt));
  }
}
BENCHMARK(BM_RkhsCriticalValue)->ArgName("serial")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
