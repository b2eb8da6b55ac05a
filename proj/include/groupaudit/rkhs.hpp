#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "groupaudit/audit_trail.hpp"
#include "groupaudit/bootstrap.hpp"

namespace groupaudit {

enum class KernelFamily { kGaussian, kLaplace };

struct KernelSpec {
  KernelFamily family = KernelFamily::kGaussian;
  double bandwidth = 1.0;
  std::vector<std::string> columns;  // numeric covariates

  void validate() const;
};

std::string kernel_family_name(KernelFamily f);
KernelFamily parse_kernel_family(const std::string& name);

// gaussian exp(-|x-y|^2 / (2 s^2)); laplace exp(-|x-y|_1 / s)
double kernel_value(const KernelSpec& spec, std::span<const double> x, std::span<const double> y);

// Rows are points. Throws InputError on missing, non-numeric or non-finite columns.
Eigen::MatrixXd kernel_points(const AuditTrail& trail, const KernelSpec& spec);

Eigen::MatrixXd gram(const KernelSpec& spec, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

struct KernelFactor {
  Eigen::MatrixXd K;
  Eigen::MatrixXd R;  // symmetric PSD, R * R = K up to the clamp
  double min_eigenvalue = 0.0;
  double max_eigenvalue = 0.0;
  std::size_t clamped = 0;  // negative eigenvalues set to zero
  double residual = 0.0;    // max|R R - K| / max|K|
};

// Square root through a symmetric eigendecomposition.
KernelFactor factor_kernel(Eigen::MatrixXd K);
KernelFactor kernel_matrix(const AuditTrail& trail, const KernelSpec& spec);

// Distinct covariate points and the Gram matrix between them.
struct AnchorKernel {
  Eigen::MatrixXd points;
  std::vector<std::uint32_t> anchor_of;  // per record
  Eigen::VectorXd counts;                // records per anchor
  Eigen::MatrixXd K;
};

AnchorKernel anchor_kernel(const Eigen::MatrixXd& points, const KernelSpec& spec);

struct RkhsOptions {
  bool estimated_theta = false;
  // The critical value is the (1 - alpha / divisor) quantile.
  double quantile_divisor = 1.0;
  Engine engine = Engine::kParallel;
};

struct RkhsRun {
  double t_star = 0.0;
  double quantile_level = 0.9;
  std::vector<double> replicates;
  std::size_t anchors = 0;
  bool estimated_theta = false;
  double theta_hat = 0.0;
  std::string target_kind;
  BootstrapConfig config;
  KernelSpec kernel;
};

// Top eigenvalue of K^{1/2} sym(A) K^{1/2} for one weight vector, computed on
// the full n x n matrices. Test and benchmark reference.
double rkhs_replicate_dense(const KernelFactor& factor, std::span<const double> loss,
                            std::span<const std::uint32_t> w, double t);

// Same value through the rank-4 reduction over anchors (n >= 5).
double rkhs_replicate_lowrank(const AnchorKernel& anchors, std::span<const double> loss,
                              std::span<const std::uint32_t> w, double t);

RkhsRun rkhs_critical_value(const AuditTrail& trail, const TargetSpec& target,
                            const KernelSpec& spec, const BootstrapConfig& config,
                            const RkhsOptions& options = {});

// h given either by its values at the audit points (the caller vouches for
// the norm) or by coefficients over anchor points, h = sum_j c_j k(., a_j).
struct ShiftQuery {
  std::vector<double> values;
  std::optional<double> norm_certificate;
  Eigen::MatrixXd anchor_points;
  std::vector<double> coefficients;

  bool by_coefficients() const { return !coefficients.empty(); }
};

struct ShiftEvaluation {
  double mean_h = 0.0;
  double eps_hat = 0.0;
  double lower = 0.0;
  std::optional<double> rkhs_norm;  // coefficient queries
  bool norm_verified = false;
  std::string norm_note;
  std::string nonnegativity_note;
};

std::vector<double> shift_values(const AuditTrail& trail, const KernelSpec& spec,
                                 const ShiftQuery& query);

// sum h_i (L_i - theta) / sum h_i
double shift_disparity(std::span<const double> loss, double theta, std::span<const double> h);

double shift_lower_bound(double eps_hat, double mean_h, double t_star);

ShiftEvaluation evaluate_shift(const AuditTrail& trail, const TargetSpec& target,
                               const KernelSpec& spec, const ShiftQuery& query, double t_star);

// sup over the RKHS unit ball of E_P[h] * E_n[h] * (eps_hat(h) - eps(h)) when
// X takes finitely many values. atoms: rows are atom locations.
double population_sup_discrete(const Eigen::MatrixXd& atoms, std::span<const double> prob,
                               std::span<const double> cond_mean, const Eigen::MatrixXd& sample,
                               std::span<const double> loss, const KernelSpec& spec,
                               double theta);

}  // namespace groupaudit
