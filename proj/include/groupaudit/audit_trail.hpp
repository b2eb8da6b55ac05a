#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace groupaudit {

// Set of record indices out of a trail of `universe` records. Indices are kept
// sorted and unique.
class Membership {
 public:
  Membership() = default;
  Membership(std::size_t universe, std::vector<std::uint32_t> indices);

  static Membership from_mask(std::span<const std::uint8_t> mask);
  static Membership all(std::size_t universe);

  std::size_t universe() const { return universe_; }
  std::size_t count() const { return indices_.size(); }
  bool empty() const { return indices_.empty(); }
  std::span<const std::uint32_t> indices() const { return indices_; }
  bool contains(std::size_t i) const;
  std::vector<std::uint8_t> mask() const;

  Membership intersect(const Membership& other) const;

  friend bool operator==(const Membership&, const Membership&) = default;

 private:
  std::size_t universe_ = 0;
  std::vector<std::uint32_t> indices_;
};

enum class CovariateKind { kCategorical, kNumeric };

struct Covariate {
  std::string name;
  CovariateKind kind = CovariateKind::kNumeric;
  // Categorical: dense codes in [0, levels.size()).
  std::vector<std::int32_t> codes;
  std::vector<std::string> levels;
  // Numeric.
  std::vector<double> values;

  static Covariate categorical(std::string name, std::vector<std::int32_t> codes,
                               std::vector<std::string> levels = {});
  static Covariate numeric(std::string name, std::vector<double> values);

  std::size_t size() const;
};

// Immutable table of per-record losses and the covariates that define groups.
class AuditTrail {
 public:
  AuditTrail(std::vector<double> loss, std::vector<Covariate> covariates = {},
             std::vector<std::string> record_ids = {});

  std::size_t size() const { return loss_.size(); }
  std::span<const double> loss() const { return loss_; }
  const std::vector<Covariate>& covariates() const { return covariates_; }
  const std::vector<std::string>& record_ids() const { return record_ids_; }

  bool has_covariate(const std::string& name) const;
  // Throws InputError if absent.
  const Covariate& covariate(const std::string& name) const;

  friend bool operator==(const AuditTrail&, const AuditTrail&) = default;

 private:
  std::vector<double> loss_;
  std::vector<Covariate> covariates_;
  std::vector<std::string> record_ids_;
};

struct FixedTarget {
  double theta = 0.0;
};
struct PooledMeanTarget {};
struct ReferenceMeanTarget {
  Membership reference;
};
struct CustomTarget {
  double theta = 0.0;
  std::vector<double> psi;
};

using TargetSpec = std::variant<FixedTarget, PooledMeanTarget, ReferenceMeanTarget, CustomTarget>;

std::string target_kind_name(const TargetSpec& spec);

// The estimated target and its influence values. Keeps what is needed to
// recompute the estimate on a resample.
struct ResolvedTarget {
  TargetSpec spec;
  double theta = 0.0;
  std::vector<double> psi;
  double psi_mean = 0.0;

  // True when the target does not depend on the sample.
  bool fixed() const { return std::holds_alternative<FixedTarget>(spec); }
};

ResolvedTarget resolve_target(const AuditTrail& trail, const TargetSpec& spec);

// Mean loss over `members` minus theta; nullopt for an empty group.
std::optional<double> empirical_disparity(const AuditTrail& trail, double theta,
                                          const Membership& members);

struct GroupMoments {
  std::size_t count = 0;
  double p_n = 0.0;
  double mean_loss = 0.0;
  double var_loss = 0.0;      // 1/(m-1) divisor; 0 when count <= 1
  double cov_loss_psi = 0.0;  // 1/(m-1) divisor; 0 when count <= 1
  bool degenerate = false;    // count <= 1
};

struct MomentCache {
  std::size_t n = 0;
  std::vector<GroupMoments> groups;
  double var_loss = 0.0;
  double var_psi = 0.0;
};

MomentCache compute_moments(const AuditTrail& trail, const ResolvedTarget& target,
                            std::span<const Membership> groups);

struct SigmaEstimate {
  double value = 0.0;
  bool clamped = false;  // negative variance estimate set to 0
  bool degenerate = false;
};

SigmaEstimate sigma_hat(const MomentCache& moments, std::size_t group);

// Shrinkage-stabilized scale. `w0` may be +infinity.
double s_hat(double p_n, double sigma_group, double var_loss, double p_star, double w0);
double s_hat(const MomentCache& moments, std::size_t group, double p_star, double w0);

// Unbiased sample variance (1/(m-1)); 0 for fewer than two values.
double sample_variance(std::span<const double> values);

}  // namespace groupaudit
