#include <gtest/gtest.h>

#include <random>

#include "groupaudit/certify.hpp"
#include "groupaudit/error.hpp"
#include "oracle.hpp"

using namespace groupaudit;

namespace {

AuditTrail grid_trail(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> nd;
  std::vector<double> loss(n), x(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = u(gen);
    loss[i] = x[i] + std::sqrt(x[i]) * nd(gen);
  }
  return AuditTrail(loss, {Covariate::numeric("x", x)});
}

std::vector<double> regular_grid(int cells) {
  std::vector<double> e;
  for (int i = 0; i <= cells; ++i) e.push_back(static_cast<double>(i) / cells);
  return e;
}

// Same intervals as an explicit collection.
GroupCollection explicit_copy(const GroupCollection& grid) {
  return make_explicit(grid.records(), grid.enumerate());
}

struct OracleRun {
  double t_star;
  std::vector<double> eps_hat, p_n;
};

OracleRun oracle_run(const oracle::Problem& p, std::uint64_t seed, std::size_t B, double level,
                     oracle::Stat stat, oracle::Side side, double tol = 0.0,
                     const std::vector<double>& scale = {}) {
  std::vector<double> m;
  for (std::size_t b = 0; b < B; ++b) {
    m.push_back(oracle::statistic(p, resample_weights(seed, b, p.loss.size()), stat, side, tol, scale));
  }
  OracleRun r{oracle::quantile_scan(level, m), {}, {}};
  const std::vector<double> one(p.loss.size(), 1.0);
  const double th = oracle::theta_of(p, one);
  for (std::size_t g = 0; g < p.groups.size(); ++g) {
    const auto s = oracle::group_stats(p, one, g, th);
    r.eps_hat.push_back(s.eps);
    r.p_n.push_back(s.p);
  }
  return r;
}

}  // namespace

TEST(ClosedForms, BoundArithmetic) {
  EXPECT_NEAR(lower_bound_value(0.05, 0.002, 0.2), 0.0, 1e-15);
  EXPECT_NEAR(upper_bound_value(0.05, 0.002, 0.2), 0.1, 1e-15);
  EXPECT_NEAR(lower_bound_value(0.05, 0.002, 0.2, 0.5), 0.025, 1e-15);
  EXPECT_TRUE(certified_above(0.3, 0.1, 0.02, 0.1));   // 0.3 >= 0.1 + 0.2
  EXPECT_FALSE(certified_above(0.29, 0.1, 0.02, 0.1));
  EXPECT_TRUE(certified_below(-0.1, 0.1, 0.02, 0.1));  // -0.1 <= 0.1 - 0.2
  EXPECT_FALSE(certified_below(-0.09, 0.1, 0.02, 0.1));
}

TEST(Bounds, FullPopulationPooledIsZero) {
  AuditTrail t({0.1, 0.5, 0.9, 1.3});
  const auto c = make_explicit(4, {{"all", Membership::all(4)}});
  BootstrapConfig cfg;
  cfg.replicates = 50;
  const auto lo = lower_bounds(t, PooledMeanTarget{}, c, cfg);
  EXPECT_NEAR(*lo.groups[0].lower, 0.0, 1e-15);
  EXPECT_NEAR(lo.t_star, 0.0, 1e-15);
  const auto up = upper_bounds(t, PooledMeanTarget{}, c, cfg);
  EXPECT_NEAR(*up.groups[0].upper, 0.0, 1e-15);
}

TEST(Bounds, VacuousWarning) {
  AuditTrail t({2, 2, 2, 2});
  const auto c = make_explicit(4, {{"a", Membership(4, {0, 1})}, {"b", Membership(4, {2, 3})}});
  BootstrapConfig cfg;
  cfg.replicates = 20;
  const auto r = lower_bounds(t, FixedTarget{0.0}, c, cfg);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("vacuous certification"), std::string::npos);
}

TEST(Bounds, HandDatasetMatchesIndependentImplementation) {
  AuditTrail t({0.3, 1.2, 0.7, 2.0}, {Covariate::categorical("g", {0, 1, 0, 1})});
  const auto c = make_explicit(4, {{"a", Membership(4, {0, 2})},
                                   {"b", Membership(4, {1, 3})},
                                   {"ab", Membership(4, {0, 1, 3})}});
  oracle::Problem p;
  p.loss = {0.3, 1.2, 0.7, 2.0};
  p.groups = {{0, 2}, {1, 3}, {0, 1, 3}};
  p.theta_kind = oracle::Theta::kPooled;
  BootstrapConfig cfg;
  cfg.replicates = 200;
  cfg.seed = 31;
  cfg.alpha = 0.1;

  const double var = sample_variance(p.loss);
  for (bool rescaled : {false, true}) {
    std::vector<double> scale;
    if (rescaled) {
      for (const auto& g : p.groups) {
        const double pn = static_cast<double>(g.size()) / 4.0;
        scale.push_back(std::pow(std::max(pn, cfg.p_star), 1.5) * std::sqrt(var));
      }
    }
    CertifyOptions opt;
    opt.rescaled = rescaled;
    struct Case {
      BoundSide side;
      oracle::Side os;
    };
    for (const Case k : {Case{BoundSide::kLower, oracle::Side::kUpper}, Case{BoundSide::kUpper, oracle::Side::kLower},
                         Case{BoundSide::kTwoSided, oracle::Side::kAbsolute}}) {
      const auto r = certify_bounds(t, PooledMeanTarget{}, c, cfg, k.side, opt);
      const auto o = oracle_run(p, cfg.seed, cfg.replicates, 0.9, oracle::Stat::kBound, k.os, 0.0, scale);
      EXPECT_NEAR(r.t_star, o.t_star, 1e-12);
      for (std::size_t g = 0; g < 3; ++g) {
        const double s = rescaled ? scale[g] : 1.0;
        const double half = o.t_star * s / (o.p_n[g] * o.p_n[g]);
        if (k.side != BoundSide::kUpper) {
          EXPECT_NEAR(*r.groups[g].lower, o.eps_hat[g] - half, 1e-12);
        }
        if (k.side != BoundSide::kLower) {
          EXPECT_NEAR(*r.groups[g].upper, o.eps_hat[g] + half, 1e-12);
        }
      }
    }
  }
}

TEST(Bounds, TwoSidedDominatesAndOrdersBounds) {
  const auto t = grid_trail(400, 2);
  const auto c = interval_grid(t, "x", regular_grid(8));
  BootstrapConfig cfg;
  cfg.replicates = 300;
  cfg.seed = 4;
  const auto lo = lower_bounds(t, FixedTarget{0.5}, c, cfg);
  const auto up = upper_bounds(t, FixedTarget{0.5}, c, cfg);
  const auto two = two_sided_bounds(t, FixedTarget{0.5}, c, cfg);
  EXPECT_GE(two.t_star, lo.t_star);
  EXPECT_GE(two.t_star, up.t_star);
  for (std::size_t g = 0; g < two.groups.size(); ++g) {
    EXPECT_LE(*two.groups[g].lower, two.groups[g].eps_hat);
    EXPECT_GE(*two.groups[g].upper, two.groups[g].eps_hat);
    EXPECT_LE(*two.groups[g].lower, *lo.groups[g].lower);
    EXPECT_GE(*two.groups[g].upper, *up.groups[g].upper);
  }
}

TEST(Bounds, MonotoneInAlpha) {
  const auto t = grid_trail(300, 3);
  const auto c = interval_grid(t, "x", regular_grid(6));
  BootstrapConfig a, b;
  a.replicates = b.replicates = 400;
  a.alpha = 0.05;
  b.alpha = 0.2;
  const auto ra = lower_bounds(t, PooledMeanTarget{}, c, a);
  const auto rb = lower_bounds(t, PooledMeanTarget{}, c, b);
  EXPECT_GE(ra.t_star, rb.t_star);
  for (std::size_t g = 0; g < ra.groups.size(); ++g) EXPECT_LE(*ra.groups[g].lower, *rb.groups[g].lower);
}

TEST(Bounds, EmptyGroupsExcluded) {
  AuditTrail t({1, 2, 3});
  const auto c = make_explicit(3, {{"a", Membership(3, {0, 1})}, {"none", Membership(3, {})}});
  BootstrapConfig cfg;
  cfg.replicates = 10;
  const auto r = lower_bounds(t, FixedTarget{0}, c, cfg);
  EXPECT_EQ(r.groups.size(), 1u);
  EXPECT_EQ(r.excluded_empty, 1u);
}

TEST(Boolean, ThreeRecordsMatchExhaustiveBootstrap) {
  AuditTrail t({0.0, 1.0, 4.0});
  const auto c = make_explicit(3, {{"a", Membership(3, {0, 2})}, {"b", Membership(3, {1, 2})}});
  oracle::Problem p;
  p.loss = {0.0, 1.0, 4.0};
  p.groups = {{0, 2}, {1, 2}};
  const double tol = 0.45;  // keeps every decision off its boundary
  // Exact distribution of the replicate maximum, then its 0.9 quantile.
  std::vector<std::pair<double, double>> dist;
  for (const auto& o : oracle::multinomial_outcomes(3)) {
    dist.emplace_back(oracle::statistic(p, o.w, oracle::Stat::kBoolean, oracle::Side::kUpper, tol), o.prob);
  }
  std::sort(dist.begin(), dist.end());
  double cdf = 0, exact = 0;
  for (const auto& [v, q] : dist) {
    cdf += q;
    if (cdf >= 0.9 - 1e-12) {
      exact = v;
      break;
    }
  }
  BootstrapConfig cfg;
  cfg.replicates = 20000;
  cfg.seed = 5;
  const auto r = boolean_certify(t, FixedTarget{0.0}, c, tol, cfg, Direction::kAbove);
  EXPECT_NEAR(r.t_star, exact, 1e-12);
  for (std::size_t g = 0; g < 2; ++g) {
    const double pn = static_cast<double>(p.groups[g].size()) / 3.0;
    double s = 0;
    for (auto i : p.groups[g]) s += p.loss[i];
    const double eps_hat = s / static_cast<double>(p.groups[g].size());
    EXPECT_EQ(*r.groups[g].certified, eps_hat >= tol + exact / pn);
  }
}

TEST(Boolean, NoCertificatesFarBelow) {
  const auto t = grid_trail(300, 9);
  const auto c = interval_grid(t, "x", regular_grid(5));
  BootstrapConfig cfg;
  cfg.replicates = 200;
  const auto r = boolean_certify(t, FixedTarget{0.0}, c, 10.0, cfg, Direction::kAbove);
  for (const auto& g : r.groups) EXPECT_FALSE(*g.certified);
}

TEST(Boolean, DecisionsReproducibleFromStoredFields) {
  const auto t = grid_trail(500, 10);
  const auto c = interval_grid(t, "x", regular_grid(10));
  BootstrapConfig cfg;
  cfg.replicates = 200;
  for (auto d : {Direction::kAbove, Direction::kBelow, Direction::kBioequivalence}) {
    for (bool rescaled : {false, true}) {
      CertifyOptions opt;
      opt.rescaled = rescaled;
      const auto r = boolean_certify(t, FixedTarget{0.4}, c, 0.6, cfg, d, opt);
      for (const auto& g : r.groups) {
        const double s = g.s_hat.value_or(1.0);
        if (d == Direction::kAbove) {
          EXPECT_EQ(*g.certified, g.eps_hat >= 0.6 + r.t_star * s / g.p_n);
        } else if (d == Direction::kBelow) {
          EXPECT_EQ(*g.certified, g.eps_hat <= 0.6 - r.t_star * s / g.p_n);
        } else {
          EXPECT_EQ(*g.certified, g.eps_hat <= 0.6 - r.t_star * s / g.p_n &&
                                      g.eps_hat >= -0.6 + *r.t_star_second * s / g.p_n);
          EXPECT_EQ(*g.certified, *g.margin >= 0 && *g.margin_second >= 0);
        }
      }
    }
  }
}

TEST(Boolean, ConstantScaleGivesUnscaledDecisions) {
  const auto t = grid_trail(400, 12);
  const auto c = interval_grid(t, "x", regular_grid(8));
  BootstrapConfig cfg;
  cfg.replicates = 300;
  cfg.p_star = 1.0;  // s_hat = sd(L) for every group
  for (auto d : {Direction::kAbove, Direction::kBelow}) {
    CertifyOptions scaled, plain;
    scaled.rescaled = true;
    plain.fast_path = false;
    const auto a = boolean_certify(t, FixedTarget{0.0}, c, 0.45, cfg, d, scaled);
    const auto b = boolean_certify(t, FixedTarget{0.0}, c, 0.45, cfg, d, plain);
    std::size_t certified = 0;
    for (std::size_t g = 0; g < a.groups.size(); ++g) {
      EXPECT_EQ(*a.groups[g].certified, *b.groups[g].certified) << a.groups[g].name;
      certified += *b.groups[g].certified;
    }
    EXPECT_GT(certified, 0u);
  }
}

TEST(Boolean, FastPathEqualsEnumeration) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto t = grid_trail(250, 20 + seed);
    const auto grid = interval_grid(t, "x", regular_grid(20));
    const auto expl = explicit_copy(grid);
    BootstrapConfig cfg;
    cfg.replicates = 150;
    cfg.seed = seed;
    for (auto d : {Direction::kAbove, Direction::kBelow, Direction::kBioequivalence}) {
      const auto fast = boolean_certify(t, PooledMeanTarget{}, grid, 0.2, cfg, d);
      const auto slow = boolean_certify(t, PooledMeanTarget{}, expl, 0.2, cfg, d);
      EXPECT_TRUE(fast.fast_path_used);
      EXPECT_FALSE(slow.fast_path_used);
      EXPECT_EQ(fast.t_star, slow.t_star);
      EXPECT_EQ(fast.t_star_second, slow.t_star_second);
      for (std::size_t g = 0; g < fast.groups.size(); ++g) {
        EXPECT_EQ(fast.groups[g].name, slow.groups[g].name);
        EXPECT_EQ(*fast.groups[g].certified, *slow.groups[g].certified);
      }
    }
  }
}

TEST(Boolean, Validation) {
  AuditTrail t({1, 2});
  const auto c = make_explicit(2, {{"a", Membership::all(2)}});
  BootstrapConfig cfg;
  EXPECT_THROW(boolean_certify(t, FixedTarget{0}, c, INFINITY, cfg, Direction::kAbove), InputError);
  EXPECT_THROW(boolean_certify(t, FixedTarget{0}, c, 0.0, cfg, Direction::kBioequivalence), InputError);
}

TEST(MaxSubarray, Examples) {
  const std::vector<double> a{-1, 2, -1};
  const auto r = interval_max_subarray(a);
  EXPECT_DOUBLE_EQ(r.value, 2);
  EXPECT_EQ(r.first, 1u);
  EXPECT_EQ(r.last, 1u);
  const std::vector<double> b{1, -0.5, 1};
  const auto s = interval_max_subarray(b);
  EXPECT_DOUBLE_EQ(s.value, 1.5);
  EXPECT_EQ(s.first, 0u);
  EXPECT_EQ(s.last, 2u);
  const std::vector<double> neg{-3, -1, -2};
  EXPECT_DOUBLE_EQ(interval_max_subarray(neg).value, -1);  // empty run excluded
  EXPECT_THROW(interval_max_subarray(std::vector<double>{}), std::invalid_argument);
}

TEST(MaxSubarray, BruteForceAndMonotone) {
  std::mt19937_64 gen(6);
  std::normal_distribution<double> nd;
  std::uniform_int_distribution<int> len(1, 60);
  for (int rep = 0; rep < 300; ++rep) {
    std::vector<double> a(static_cast<std::size_t>(len(gen)));
    for (auto& v : a) v = nd(gen);
    const auto r = interval_max_subarray(a);
    EXPECT_NEAR(r.value, oracle::max_subarray_brute(a), 1e-12);
    double run = 0;
    for (std::size_t i = r.first; i <= r.last; ++i) run += a[i];
    EXPECT_NEAR(run, r.value, 1e-12);
    auto lowered = a;
    lowered[static_cast<std::size_t>(rep) % a.size()] -= 0.7;
    EXPECT_LE(interval_max_subarray(lowered).value, r.value + 1e-12);
  }
}

TEST(WidthCurve, MinimaPerWidth) {
  const auto t = grid_trail(300, 14);
  const auto c = interval_grid(t, "x", regular_grid(5));
  BootstrapConfig cfg;
  cfg.replicates = 100;
  const auto r = lower_bounds(t, FixedTarget{0}, c, cfg);
  const auto curve = width_curve(r, c.grid());
  ASSERT_EQ(curve.size(), 5u);
  for (std::size_t w = 0; w < 5; ++w) {
    double me = INFINITY, ml = INFINITY;
    std::size_t count = 0;
    for (const auto& g : r.groups) {
      if (g.endpoints->second - g.endpoints->first != w + 1) continue;
      ++count;
      me = std::min(me, g.eps_hat);
      ml = std::min(ml, *g.lower);
    }
    EXPECT_NEAR(curve[w].width, 0.2 * static_cast<double>(w + 1), 1e-12);
    EXPECT_EQ(curve[w].intervals, count);
    EXPECT_DOUBLE_EQ(curve[w].min_eps_hat, me);
    EXPECT_DOUBLE_EQ(*curve[w].min_lower, ml);
    EXPECT_FALSE(curve[w].min_upper.has_value());
  }
}
