#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "groupaudit/audit_trail.hpp"
#include "groupaudit/bootstrap.hpp"
#include "groupaudit/groups.hpp"

namespace groupaudit {

// Greater: H0 eps(G) <= eps. Less: H0 eps(G) >= -eps. Two-sided: H0 |eps(G)| <= eps,
// with the smaller of the two one-sided p-values.
enum class FlagDirection { kGreater, kLess, kTwoSided };

std::string flag_direction_name(FlagDirection d);

inline constexpr double kNormalQuartile = 0.6744897501960817;  // Phi^-1(3/4)

double normal_cdf(double x);

struct GroupFlag {
  std::string name;
  std::size_t count = 0;
  double p_n = 0.0;
  double eps_hat = 0.0;
  double s_star = 0.0;
  double p_value = 1.0;
  bool flagged = false;
  bool degenerate = false;  // s* = 0
  std::size_t missing_replicates = 0;
};

struct FlagReport {
  double alpha = 0.1;
  double tolerance = 0.0;
  FlagDirection direction = FlagDirection::kGreater;
  std::string target_kind;
  double theta_hat = 0.0;
  BootstrapConfig config;
  // "asymptotic" for disjoint groups or a 0/1 loss with a fixed target,
  // "heuristic" otherwise.
  std::string fdr_guarantee;
  std::vector<GroupFlag> groups;
  std::size_t excluded_empty = 0;
  std::size_t missing_replicates = 0;  // summed over groups
  std::size_t theta_fallbacks = 0;
};

// Bootstrap scale estimate: median |t| / Phi^-1(3/4).
double mad_scale(std::span<const double> deltas);

double p_value(double eps_hat, double tolerance, double s_star, FlagDirection direction);

// Step-up rule: reject the k* smallest, k* = max{k : p_(k) <= k alpha / m}.
std::vector<bool> benjamini_hochberg(std::span<const double> p, double alpha);

FlagReport flag_p_values(const AuditTrail& trail, const TargetSpec& target,
                         const GroupCollection& groups, double tolerance,
                         const BootstrapConfig& config, FlagDirection direction,
                         Engine engine = Engine::kParallel);

struct RecipeFlag {
  std::string group;
  bool flagged = false;
  std::vector<std::string> triggered_by;  // names of the rejected sub-hypotheses
};

struct RecipeReport {
  std::string recipe;
  FlagReport tests;  // every sub-hypothesis, with the pooled BH decisions
  std::vector<RecipeFlag> flags;
};

// Audits the Y=0 and Y=1 strata separately against the stratum's own mean
// (false and true positive rates for L = 1{f(X)=1}), pools all p-values into
// one BH run and flags G when either stratum is rejected.
RecipeReport equalized_odds_flag(const AuditTrail& trail, const GroupCollection& groups,
                                 const std::string& outcome_column, double tolerance,
                                 const BootstrapConfig& config);

// L = Y - f(X) against a fixed target of 0; tests |eps(G@v)| <= gamma + eps for
// every prediction bin v and flags G when any of its bins is rejected.
RecipeReport multicalibration_flag(const AuditTrail& trail, const GroupCollection& base,
                                   const std::string& prediction_bins, double gamma,
                                   double tolerance, const BootstrapConfig& config);

}  // namespace groupaudit
