#include <gtest/gtest.h>
#include <omp.h>

#include <random>

#include "groupaudit/bootstrap.hpp"
#include "groupaudit/error.hpp"
#include "groupaudit/groups.hpp"
#include "oracle.hpp"

using namespace groupaudit;

namespace {

struct Fixture {
  AuditTrail trail;
  TargetSpec spec;
  ResolvedTarget target;
  GroupCollection collection;
  PreparedGroups prepared;
  ProcessInputs in;
  oracle::Problem problem;

  Fixture(AuditTrail t, TargetSpec s, GroupCollection c)
      : trail(std::move(t)),
        spec(std::move(s)),
        target(resolve_target(trail, spec)),
        collection(std::move(c)),
        prepared(prepare_groups(collection)),
        in(make_inputs(trail, target, prepared)) {
    problem.loss.assign(trail.loss().begin(), trail.loss().end());
    for (const auto& m : prepared.members) problem.groups.emplace_back(m.indices().begin(), m.indices().end());
    if (const auto* f = std::get_if<FixedTarget>(&spec)) {
      problem.theta_kind = oracle::Theta::kFixed;
      problem.theta = f->theta;
    } else if (std::holds_alternative<PooledMeanTarget>(spec)) {
      problem.theta_kind = oracle::Theta::kPooled;
    } else {
      const auto& r = std::get<ReferenceMeanTarget>(spec).reference;
      problem.theta_kind = oracle::Theta::kReference;
      problem.reference.assign(r.indices().begin(), r.indices().end());
    }
  }
  Fixture(const Fixture&) = delete;
};

AuditTrail random_trail(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd(1.0, 1.0);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> loss(n), x(n);
  std::vector<std::int32_t> g(n);
  for (std::size_t i = 0; i < n; ++i) {
    loss[i] = nd(gen);
    x[i] = u(gen);
    g[i] = static_cast<std::int32_t>(i % 3);
  }
  return AuditTrail(loss, {Covariate::numeric("x", x), Covariate::categorical("g", g)});
}

std::vector<double> regular_grid(int cells) {
  std::vector<double> e;
  for (int i = 0; i <= cells; ++i) e.push_back(static_cast<double>(i) / cells);
  return e;
}

}  // namespace

TEST(Quantile, InfConventionCases) {
  EXPECT_DOUBLE_EQ(quantile(0.5, std::vector<double>{1, 2, 3, 4}), 2.0);
  std::vector<double> t{10, 3, 7, 1, 9, 4, 2, 8, 6, 5};
  EXPECT_DOUBLE_EQ(quantile(0.9, t), 9.0);
  EXPECT_DOUBLE_EQ(quantile(1.0, t), 10.0);
  EXPECT_DOUBLE_EQ(quantile(0.0, t), 1.0);
  EXPECT_THROW(quantile(0.5, std::vector<double>{}), InputError);
}

TEST(Quantile, MatchesCdfScanOnRandomMultisets) {
  std::mt19937_64 gen(21);
  std::uniform_int_distribution<int> small(0, 40);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> s(500);
    for (auto& v : s) v = small(gen) / 4.0;  // ties on purpose
    EXPECT_DOUBLE_EQ(quantile(0.95, s), oracle::quantile_scan(0.95, s));
    std::vector<double> sorted = s;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_DOUBLE_EQ(quantile(0.95, s), sorted[474]);
  }
}

TEST(Quantile, MonotoneAndShiftEquivariant) {
  std::mt19937_64 gen(4);
  std::normal_distribution<double> nd;
  std::vector<double> s(123);
  for (auto& v : s) v = nd(gen);
  double prev = -INFINITY;
  for (double a = 0.01; a < 1.0; a += 0.01) {
    const double q = quantile(a, s);
    EXPECT_GE(q, prev);
    prev = q;
    std::vector<double> shifted = s;
    for (auto& v : shifted) v += 2.5;
    EXPECT_DOUBLE_EQ(quantile(a, shifted), q + 2.5);
  }
}

TEST(Weights, MultinomialBasics) {
  for (std::uint64_t b = 0; b < 20; ++b) EXPECT_EQ(resample_weights(9, b, 1), std::vector<std::uint32_t>{1});
  for (std::uint64_t b = 0; b < 50; ++b) {
    const auto w = resample_weights(3, b, 37);
    EXPECT_EQ(std::accumulate(w.begin(), w.end(), 0u), 37u);
  }
  EXPECT_EQ(resample_weights(3, 7, 100), resample_weights(3, 7, 100));
  EXPECT_NE(resample_weights(3, 7, 100), resample_weights(3, 8, 100));
  EXPECT_NE(resample_weights(3, 7, 100), resample_weights(4, 7, 100));
}

TEST(Weights, SameAcrossWorkerCounts) {
  std::vector<std::vector<std::uint32_t>> a(16), b(16);
  omp_set_num_threads(1);
#pragma omp parallel for
  for (int r = 0; r < 16; ++r) a[r] = resample_weights(77, static_cast<std::uint64_t>(r), 64);
  omp_set_num_threads(4);
#pragma omp parallel for
  for (int r = 0; r < 16; ++r) b[r] = resample_weights(77, static_cast<std::uint64_t>(r), 64);
  EXPECT_EQ(a, b);
}

TEST(Weights, CellMarginalsAreUniform) {
  const std::size_t n = 5, B = 20000;
  std::vector<double> mean(n, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const auto w = resample_weights(1, b, n);
    for (std::size_t i = 0; i < n; ++i) mean[i] += w[i];
  }
  // Var(w_i) = n (1/n)(1 - 1/n) = 0.8.
  for (double m : mean) EXPECT_NEAR(m / B, 1.0, 5 * std::sqrt(0.8 / B));
}

TEST(ReplicateStatistic, IdentityResampleIsZero) {
  Fixture f(random_trail(40, 1), PooledMeanTarget{}, groups_from_labels(random_trail(40, 1), "g"));
  const std::vector<std::uint32_t> ones(40, 1);
  for (auto tail : {Tail::kUpper, Tail::kLower, Tail::kAbsolute}) {
    ProcessSpec bound{StatisticKind::kBound, tail, 0.0, {}, false};
    EXPECT_NEAR(replicate_statistic(f.in, bound, ones), 0.0, 1e-15);
    ProcessSpec boolean{StatisticKind::kBoolean, tail, 0.3, {}, false};
    EXPECT_NEAR(replicate_statistic(f.in, boolean, ones), 0.0, 1e-15);
  }
}

TEST(ReplicateStatistic, TwoRecordHandCases) {
  Fixture f(AuditTrail({0.0, 1.0}), FixedTarget{0.0}, make_explicit(2, {{"G", Membership(2, {1})}}));
  const std::vector<std::uint32_t> w02{0, 2}, w20{2, 0};
  ProcessSpec bound{StatisticKind::kBound, Tail::kUpper, 0.0, {}, false};
  EXPECT_DOUBLE_EQ(replicate_statistic(f.in, bound, w02), 0.0);
  ProcessSpec boolean{StatisticKind::kBoolean, Tail::kUpper, 0.0, {}, false};
  EXPECT_DOUBLE_EQ(replicate_statistic(f.in, boolean, w20), -0.5);
}

TEST(ReplicateStatistic, MatchesOracleOnRandomProblems) {
  std::mt19937_64 gen(99);
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t n = 12 + static_cast<std::size_t>(rep);
    auto trail = random_trail(n, 100 + static_cast<std::uint64_t>(rep));
    TargetSpec spec;
    if (rep % 3 == 0) spec = FixedTarget{0.7};
    if (rep % 3 == 1) spec = PooledMeanTarget{};
    if (rep % 3 == 2) spec = ReferenceMeanTarget{Membership(n, {0, 3, 5})};
    Fixture f(trail, spec, interval_grid(trail, "x", regular_grid(4)));
    for (int b = 0; b < 20; ++b) {
      const auto w = resample_weights(static_cast<std::uint64_t>(rep), static_cast<std::uint64_t>(b), n);
      for (auto tail : {Tail::kUpper, Tail::kLower, Tail::kAbsolute}) {
        const auto os = tail == Tail::kUpper   ? oracle::Side::kUpper
                        : tail == Tail::kLower ? oracle::Side::kLower
                                               : oracle::Side::kAbsolute;
        ProcessSpec bound{StatisticKind::kBound, tail, 0.0, {}, false};
        EXPECT_NEAR(replicate_statistic(f.in, bound, w),
                    oracle::statistic(f.problem, w, oracle::Stat::kBound, os), 1e-12);
        ProcessSpec boolean{StatisticKind::kBoolean, tail, 0.4, {}, false};
        EXPECT_NEAR(replicate_statistic(f.in, boolean, w),
                    oracle::statistic(f.problem, w, oracle::Stat::kBoolean, os, 0.4), 1e-12);
      }
    }
  }
}

TEST(ReplicateMaxima, SerialReferenceAgreesToRounding) {
  auto trail = random_trail(300, 5);
  for (int k = 0; k < 3; ++k) {
    TargetSpec spec = k == 0 ? TargetSpec{FixedTarget{1.0}}
                      : k == 1 ? TargetSpec{PooledMeanTarget{}}
                               : TargetSpec{ReferenceMeanTarget{Membership(300, {1, 2, 3, 50, 60})}};
    Fixture grid(trail, spec, interval_grid(trail, "x", regular_grid(10)));
    Fixture labels(trail, spec, groups_from_labels(trail, "g"));
    BootstrapConfig cfg;
    cfg.replicates = 64;
    cfg.seed = 12;
    for (const Fixture* f : {&grid, &labels}) {
      std::vector<double> inv(f->prepared.size());
      for (std::size_t g = 0; g < inv.size(); ++g) inv[g] = 1.0 + 0.1 * static_cast<double>(g);
      for (auto kind : {StatisticKind::kBound, StatisticKind::kBoolean}) {
        for (auto tail : {Tail::kUpper, Tail::kLower, Tail::kAbsolute}) {
          for (bool scaled : {false, true}) {
            ProcessSpec ps{kind, tail, 0.2, scaled ? inv : std::vector<double>{}, false};
            const auto a = replicate_maxima(f->in, ps, cfg, Engine::kSerial);
            const auto b = replicate_maxima(f->in, ps, cfg, Engine::kParallel);
            ASSERT_EQ(a.values.size(), b.values.size());
            for (std::size_t r = 0; r < a.values.size(); ++r) {
              EXPECT_NEAR(a.values[r], b.values[r], 1e-12 * (1 + std::abs(a.values[r])));
            }
            EXPECT_EQ(a.theta_fallbacks, b.theta_fallbacks);
          }
        }
      }
    }
  }
}

TEST(ReplicateMaxima, IndependentOfWorkerCount) {
  auto trail = random_trail(500, 6);
  Fixture f(trail, PooledMeanTarget{}, interval_grid(trail, "x", regular_grid(20)));
  BootstrapConfig cfg;
  cfg.replicates = 100;
  cfg.seed = 3;
  ProcessSpec ps{StatisticKind::kBound, Tail::kUpper, 0.0, {}, false};
  omp_set_num_threads(1);
  const auto a = replicate_maxima(f.in, ps, cfg);
  omp_set_num_threads(4);
  const auto b = replicate_maxima(f.in, ps, cfg);
  EXPECT_EQ(a.values, b.values);
}

TEST(ReplicateMaxima, ExhaustiveDistributionForThreeRecords) {
  AuditTrail trail({0.0, 1.0, 3.0});
  Fixture f(trail, PooledMeanTarget{},
            make_explicit(3, {{"a", Membership(3, {0})}, {"b", Membership(3, {1, 2})}}));
  std::map<double, double> exact;
  for (const auto& o : oracle::multinomial_outcomes(3)) {
    double v = oracle::statistic(f.problem, o.w, oracle::Stat::kBound, oracle::Side::kUpper);
    exact[std::round(v * 1e9) / 1e9] += o.prob;
  }
  BootstrapConfig cfg;
  cfg.replicates = 20000;
  cfg.seed = 8;
  const auto r = replicate_maxima(f.in, {StatisticKind::kBound, Tail::kUpper, 0.0, {}, false}, cfg);
  std::map<double, double> emp;
  for (double v : r.values) emp[std::round(v * 1e9) / 1e9] += 1.0 / cfg.replicates;
  EXPECT_LT(oracle::total_variation(exact, emp), 0.03);
}

TEST(ResampledTheta, ReferenceFallback) {
  AuditTrail trail({1.0, 2.0, 3.0, 4.0});
  const auto t = resolve_target(trail, ReferenceMeanTarget{Membership(4, {0})});
  bool fb = false;
  const std::vector<std::uint32_t> miss{0, 2, 1, 1};
  EXPECT_DOUBLE_EQ(resampled_theta(t, trail.loss(), miss, &fb), t.theta);
  EXPECT_TRUE(fb);
  const auto c = resolve_target(trail, CustomTarget{0.5, {1.0, -1.0, 0.0, 0.0}});
  EXPECT_DOUBLE_EQ(resampled_theta(c, trail.loss(), std::vector<std::uint32_t>{2, 0, 1, 1}), 0.5 + 0.5);
}

TEST(GroupDeltas, MissingReplicatesCounted) {
  auto trail = random_trail(30, 7);
  Fixture f(trail, FixedTarget{0.0},
            make_explicit(30, {{"single", Membership(30, {4})}, {"all", Membership::all(30)}}));
  BootstrapConfig cfg;
  cfg.replicates = 2000;
  cfg.seed = 1;
  const auto d = replicate_group_deltas(f.in, cfg);
  EXPECT_EQ(d.missing[1], 0u);
  EXPECT_EQ(d.values[1].size(), 2000u);
  EXPECT_EQ(d.values[0].size() + d.missing[0], 2000u);
  const double expected = 2000 * std::pow(29.0 / 30.0, 30);
  EXPECT_NEAR(static_cast<double>(d.missing[0]), expected, 5 * std::sqrt(expected));
  for (double v : d.values[0]) EXPECT_DOUBLE_EQ(v, 0.0);  // a singleton resample reproduces its value
  const auto serial = replicate_group_deltas(f.in, cfg, Engine::kSerial);
  EXPECT_EQ(serial.values, d.values);
}

TEST(BootstrapConfig, Validation) {
  BootstrapConfig c;
  c.replicates = 0;
  EXPECT_THROW(c.validate(), InputError);
  c.replicates = 10;
  c.alpha = 1.0;
  EXPECT_THROW(c.validate(), InputError);
  c.alpha = 0.1;
  c.p_star = 0;
  EXPECT_THROW(c.validate(), InputError);
}
