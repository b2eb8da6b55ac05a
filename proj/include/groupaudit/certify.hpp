#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "groupaudit/audit_trail.hpp"
#include "groupaudit/bootstrap.hpp"
#include "groupaudit/groups.hpp"
#include "groupaudit/max_subarray.hpp"

namespace groupaudit {

enum class BoundSide { kLower, kUpper, kTwoSided };
enum class Direction { kAbove, kBelow, kBioequivalence };

std::string bound_side_name(BoundSide side);
std::string direction_name(Direction d);

struct CertifyOptions {
  bool rescaled = false;
  // Use the max-subarray kernel when the collection is a grid and the test
  // is an unscaled Boolean one.
  bool fast_path = true;
  Engine engine = Engine::kParallel;
};

struct GroupResult {
  std::string name;
  std::size_t count = 0;
  double p_n = 0.0;
  double eps_hat = 0.0;
  std::optional<double> lower;
  std::optional<double> upper;
  std::optional<double> s_hat;  // rescaled runs only
  bool sigma_clamped = false;
  bool degenerate = false;
  std::optional<bool> certified;
  std::optional<double> margin;         // positive when certified
  std::optional<double> margin_second;  // bioequivalence: the "above" half
  std::optional<std::pair<std::size_t, std::size_t>> endpoints;  // grid index pair
};

struct CertificationReport {
  std::string mode;
  std::string target_kind;
  double theta_hat = 0.0;
  BootstrapConfig config;
  bool rescaled = false;
  bool fast_path_used = false;
  double t_star = 0.0;
  std::optional<double> t_star_second;  // bioequivalence: the "above" half
  std::optional<double> tolerance;
  std::vector<GroupResult> groups;
  std::size_t excluded_empty = 0;
  std::size_t theta_fallbacks = 0;
  std::vector<std::string> warnings;
};

// Closed forms shared by the report builder and its consumers.
double lower_bound_value(double eps_hat, double t_star, double p_n, double s_hat = 1.0);
double upper_bound_value(double eps_hat, double t_star, double p_n, double s_hat = 1.0);
// Certified iff the margin is >= 0.
bool certified_above(double eps_hat, double tolerance, double t_star, double p_n, double s_hat = 1.0);
bool certified_below(double eps_hat, double tolerance, double t_star, double p_n, double s_hat = 1.0);

CertificationReport certify_bounds(const AuditTrail& trail, const TargetSpec& target,
                                   const GroupCollection& groups, const BootstrapConfig& config,
                                   BoundSide side, const CertifyOptions& options = {});

inline CertificationReport lower_bounds(const AuditTrail& trail, const TargetSpec& target,
                                        const GroupCollection& groups,
                                        const BootstrapConfig& config,
                                        const CertifyOptions& options = {}) {
  return certify_bounds(trail, target, groups, config, BoundSide::kLower, options);
}
inline CertificationReport upper_bounds(const AuditTrail& trail, const TargetSpec& target,
                                        const GroupCollection& groups,
                                        const BootstrapConfig& config,
                                        const CertifyOptions& options = {}) {
  return certify_bounds(trail, target, groups, config, BoundSide::kUpper, options);
}
inline CertificationReport two_sided_bounds(const AuditTrail& trail, const TargetSpec& target,
                                            const GroupCollection& groups,
                                            const BootstrapConfig& config,
                                            const CertifyOptions& options = {}) {
  return certify_bounds(trail, target, groups, config, BoundSide::kTwoSided, options);
}

// Above: certify eps(G) > tolerance. Below: certify eps(G) < tolerance.
// Bioequivalence: certify |eps(G)| < tolerance by running both one-sided tests
// at level alpha and keeping the groups rejected by both.
CertificationReport boolean_certify(const AuditTrail& trail, const TargetSpec& target,
                                    const GroupCollection& groups, double tolerance,
                                    const BootstrapConfig& config, Direction direction,
                                    const CertifyOptions& options = {});

// Shortcut for callers that already hold the kernel inputs: the critical
// value of an unscaled Boolean test, as used by the harness.
double boolean_critical_value(const ProcessInputs& in, double tolerance, Direction direction,
                              const BootstrapConfig& config, bool fast_path,
                              std::size_t* theta_fallbacks = nullptr);

inline SubarrayMax<double> interval_max_subarray(std::span<const double> a) {
  return max_subarray<double>(a);
}

struct CurvePoint {
  double width = 0.0;
  std::size_t intervals = 0;
  double min_eps_hat = 0.0;
  std::optional<double> min_lower;
  std::optional<double> min_upper;
};

// Per interval width of a grid report, the smallest observed disparity and bound.
std::vector<CurvePoint> width_curve(const CertificationReport& report, const IntervalGrid& grid);

}  // namespace groupaudit
