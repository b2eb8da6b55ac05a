#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "groupaudit/audit_trail.hpp"
#include "groupaudit/error.hpp"

using namespace groupaudit;

namespace {

Membership members(std::size_t n, std::vector<std::uint32_t> idx) { return Membership(n, std::move(idx)); }

double two_pass_variance(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

}  // namespace

TEST(Membership, SortedUniqueAndMaskRoundTrip) {
  const auto m = members(6, {4, 1, 4, 2});
  EXPECT_EQ(m.count(), 3u);
  EXPECT_TRUE(m.contains(4));
  EXPECT_FALSE(m.contains(0));
  EXPECT_EQ(Membership::from_mask(m.mask()), m);
  EXPECT_THROW(members(3, {3}), InputError);
}

TEST(AuditTrail, RejectsNonFiniteLossAndEmptyTrail) {
  EXPECT_THROW(AuditTrail(std::vector<double>{}), InputError);
  EXPECT_THROW(AuditTrail({1.0, std::nan("")}), InputError);
  EXPECT_THROW(AuditTrail({1.0, INFINITY}), InputError);
  EXPECT_THROW(AuditTrail({1.0, 2.0}, {Covariate::numeric("x", {1.0})}), InputError);
  EXPECT_THROW(AuditTrail({1.0, 2.0}, {Covariate::categorical("g", {0, 3}, {"a", "b"})}), InputError);
}

TEST(ResolveTarget, FixedHasZeroInfluence) {
  AuditTrail t({1, 0, 1, 0});
  const auto r = resolve_target(t, FixedTarget{0.9});
  EXPECT_DOUBLE_EQ(r.theta, 0.9);
  EXPECT_EQ(r.psi, std::vector<double>(4, 0.0));
}

TEST(ResolveTarget, PooledMeanCenters) {
  AuditTrail t({1, 0, 1, 0});
  const auto r = resolve_target(t, PooledMeanTarget{});
  EXPECT_DOUBLE_EQ(r.theta, 0.5);
  EXPECT_EQ(r.psi, (std::vector<double>{0.5, -0.5, 0.5, -0.5}));
}

TEST(ResolveTarget, ReferenceMeanMatchesHandFormula) {
  AuditTrail t({1, 0, 1, 1});
  const auto ref = members(4, {0, 1});
  const auto r = resolve_target(t, ReferenceMeanTarget{ref});
  EXPECT_DOUBLE_EQ(r.theta, 0.5);
  // 1{i in ref} (L_i - 0.5) / 0.5
  const std::vector<double> expected{(1 - 0.5) / 0.5, (0 - 0.5) / 0.5, 0.0, 0.0};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(r.psi[i], expected[i]);
}

TEST(ResolveTarget, Errors) {
  AuditTrail t({1, 0, 1});
  EXPECT_THROW(resolve_target(t, ReferenceMeanTarget{Membership(3, {})}), InputError);
  EXPECT_THROW(resolve_target(t, CustomTarget{0.1, {0.0, 1.0}}), InputError);
  const auto c = resolve_target(t, CustomTarget{0.1, {0.5, -0.25, 0.0}});
  EXPECT_DOUBLE_EQ(c.theta, 0.1);
  EXPECT_NEAR(c.psi_mean, 0.25 / 3.0, 1e-15);
}

TEST(ResolveTarget, PooledInfluenceSumsToZero) {
  std::mt19937_64 gen(5);
  std::normal_distribution<double> nd(3.0, 2.0);
  std::vector<double> loss(1001);
  for (auto& v : loss) v = nd(gen);
  const auto r = resolve_target(AuditTrail(loss), PooledMeanTarget{});
  const double sum = std::accumulate(r.psi.begin(), r.psi.end(), 0.0);
  EXPECT_LE(std::abs(sum), 1001 * 1e-15 * 8);
}

TEST(EmpiricalDisparity, Examples) {
  AuditTrail t({1, 0, 1, 0});
  const double pooled = resolve_target(t, PooledMeanTarget{}).theta;
  EXPECT_DOUBLE_EQ(*empirical_disparity(t, pooled, Membership::all(4)), 0.0);
  EXPECT_DOUBLE_EQ(*empirical_disparity(t, 0.0, members(4, {0, 2})), 1.0);
  AuditTrail u({0.2, 0.8, 0.5});
  EXPECT_NEAR(*empirical_disparity(u, 0.5, members(3, {1, 2})), (0.8 + 0.5) / 2 - 0.5, 1e-15);
  EXPECT_FALSE(empirical_disparity(u, 0.5, Membership(3, {})).has_value());
}

TEST(EmpiricalDisparity, PermutationInvariant) {
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> loss(50);
  for (auto& v : loss) v = u(gen);
  std::vector<std::uint32_t> g{3, 7, 11, 20, 41};
  const double a = *empirical_disparity(AuditTrail(loss), 0.3, members(50, g));

  std::vector<std::uint32_t> perm(50);
  std::iota(perm.begin(), perm.end(), 0u);
  std::shuffle(perm.begin(), perm.end(), gen);
  std::vector<double> permuted(50);
  std::vector<std::uint32_t> inv(50);
  for (std::uint32_t i = 0; i < 50; ++i) {
    permuted[perm[i]] = loss[i];
    inv[i] = perm[i];
  }
  std::vector<std::uint32_t> pg;
  for (auto i : g) pg.push_back(inv[i]);
  const double b = *empirical_disparity(AuditTrail(permuted), 0.3, members(50, pg));
  EXPECT_NEAR(a, b, 1e-15);
}

TEST(SigmaHat, FixedTargetIsConditionalSd) {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> nd;
  std::vector<double> loss(200);
  for (auto& v : loss) v = nd(gen);
  AuditTrail t(loss);
  std::vector<Membership> groups;
  std::vector<std::vector<double>> values;
  for (std::uint32_t k = 2; k < 6; ++k) {
    std::vector<std::uint32_t> idx;
    std::vector<double> v;
    for (std::uint32_t i = 0; i < 200; i += k) {
      idx.push_back(i);
      v.push_back(loss[i]);
    }
    groups.emplace_back(200, idx);
    values.push_back(v);
  }
  const auto target = resolve_target(t, FixedTarget{0.0});
  const auto m = compute_moments(t, target, groups);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    EXPECT_NEAR(sigma_hat(m, g).value, std::sqrt(two_pass_variance(values[g])), 1e-12);
  }
  EXPECT_NEAR(m.var_loss, two_pass_variance(loss), 1e-12);
}

TEST(SigmaHat, FullPopulationPooledIsZero) {
  AuditTrail t({0.3, 1.7, 2.2, -0.4, 0.9});
  const auto target = resolve_target(t, PooledMeanTarget{});
  std::vector<Membership> g{Membership::all(5)};
  const auto m = compute_moments(t, target, g);
  EXPECT_NEAR(sigma_hat(m, 0).value, 0.0, 1e-7);
}

TEST(SigmaHat, ConstantLossAndDegenerateGroups) {
  AuditTrail t({2, 2, 2, 5});
  const auto target = resolve_target(t, FixedTarget{0.0});
  std::vector<Membership> g{members(4, {0, 1, 2}), members(4, {3})};
  const auto m = compute_moments(t, target, g);
  EXPECT_DOUBLE_EQ(sigma_hat(m, 0).value, 0.0);
  EXPECT_TRUE(m.groups[1].degenerate);
  EXPECT_TRUE(sigma_hat(m, 1).degenerate);
  EXPECT_DOUBLE_EQ(m.groups[1].var_loss, 0.0);
  EXPECT_DOUBLE_EQ(m.groups[0].p_n, 0.75);
}

TEST(SHat, Examples) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_NEAR(s_hat(0.04, 123.0, 1.0, 0.01, inf), 0.008, 1e-15);
  EXPECT_NEAR(s_hat(0.001, 123.0, 1.0, 0.01, inf), 0.001, 1e-15);
  const double expected = std::pow(0.5, 1.5) * ((0.5 / 1.5) * 2.0 + (1.0 / 1.5) * 1.0);
  EXPECT_NEAR(s_hat(0.5, 2.0, 1.0, 0.01, 1.0), expected, 1e-15);
  EXPECT_NEAR(expected, 0.4714, 1e-4);
  EXPECT_THROW(s_hat(0.5, 0.0, 0.0, 0.01, inf), NumericalError);
  EXPECT_THROW(s_hat(0.5, 1.0, 1.0, 0.0, inf), InputError);
}

TEST(SHat, FloorAndMonotonicity) {
  std::mt19937_64 gen(17);
  std::uniform_real_distribution<double> u(0, 1);
  for (int rep = 0; rep < 2000; ++rep) {
    const double p = u(gen), sigma = 3 * u(gen), var = 0.01 + 4 * u(gen);
    const double p_star = 0.001 + 0.1 * u(gen), w0 = 0.01 + 10 * u(gen);
    const double s = s_hat(p, sigma, var, p_star, w0);
    EXPECT_GE(s, std::pow(p_star, 1.5) * (w0 / (1 + w0)) * std::sqrt(var) * (1 - 1e-12));
    EXPECT_LE(s, s_hat(p, sigma, var * 1.5, p_star, w0));
  }
}

TEST(SampleVariance, Divisor) {
  const std::vector<double> v{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(sample_variance(v), 5.0 / 3.0);
  EXPECT_DOUBLE_EQ(sample_variance(std::vector<double>{7}), 0.0);
}
