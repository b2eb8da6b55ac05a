#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "groupaudit/audit_trail.hpp"

namespace groupaudit {

// Y = beta0 X + noise with X ~ Unif(0, 1):
//   homoskedastic    noise ~ N(0, 1)
//   heteroskedastic  noise ~ N(0, X), variance X
//   discrete         as heteroskedastic, X uniform on {0, 0.01, ..., 1}
enum class SynthModel { kHomoskedastic, kHeteroskedastic, kDiscrete };

std::string synth_model_name(SynthModel m);
SynthModel parse_synth_model(const std::string& name);

struct SyntheticSpec {
  SynthModel model = SynthModel::kHeteroskedastic;
  // Unset: 1 for the continuous models, N(0, 1) for the discrete one.
  std::optional<double> beta0;
  // Forces the fitted slope instead of running least squares.
  std::optional<double> beta_hat;
  std::size_t train_n = 1000;
  std::size_t audit_n = 1600;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticData {
  double beta0 = 0.0;
  double beta_hat = 0.0;
  std::vector<double> train_x, train_y;
  std::vector<double> x, y;
  // Loss (Y - beta_hat X)^2 with numeric covariate "x".
  AuditTrail trail{std::vector<double>{0.0}};
};

SyntheticData generate(const SyntheticSpec& spec);

// Slope of the no-intercept least-squares fit.
double ols_slope(const std::vector<double>& x, const std::vector<double>& y);

// E[L | X = x] for L = (Y - beta_hat X)^2.
double conditional_mean_loss(SynthModel model, double beta0, double beta_hat, double x);

// E[L | a < X <= b] for the continuous models. Throws InputError if a >= b.
double true_interval_disparity(SynthModel model, double beta0, double beta_hat, double a, double b);

// Support of the discrete model.
std::vector<double> discrete_atoms();

}  // namespace groupaudit
