#include "groupaudit/synth.hpp"

#include <cmath>
#include <random>

#include "groupaudit/bootstrap.hpp"
#include "groupaudit/error.hpp"

namespace groupaudit {

namespace {

// Draws from one engine in a fixed order so a seed pins down the whole data set.
struct Sampler {
  std::mt19937_64 gen;
  std::normal_distribution<double> normal{0.0, 1.0};

  explicit Sampler(std::uint64_t seed) : gen(splitmix64(seed)) {}

  double uniform() { return std::generate_canonical<double, 53>(gen); }
  double standard_normal() { return normal(gen); }
};

double draw_x(SynthModel model, Sampler& s) {
  if (model == SynthModel::kDiscrete) {
    return static_cast<double>(bounded_draw(s.gen, 101)) / 100.0;
  }
  return s.uniform();
}

double noise_sd(SynthModel model, double x) {
  return model == SynthModel::kHomoskedastic ? 1.0 : std::sqrt(x);
}

}  // namespace

std::string synth_model_name(SynthModel m) {
  switch (m) {
    case SynthModel::kHomoskedastic: return "homoskedastic";
    case SynthModel::kHeteroskedastic: return "heteroskedastic";
    default: return "discrete";
  }
}

SynthModel parse_synth_model(const std::string& name) {
  if (name == "homoskedastic") return SynthModel::kHomoskedastic;
  if (name == "heteroskedastic") return SynthModel::kHeteroskedastic;
  if (name == "discrete") return SynthModel::kDiscrete;
  throw InputError("unknown model '" + name + "' (expected homoskedastic, heteroskedastic or discrete)");
}

void SyntheticSpec::validate() const {
  if (train_n < 2 || audit_n < 2) throw InputError("synthetic data needs at least 2 training and 2 audit points");
}

double ols_slope(const std::vector<double>& x, const std::vector<double>& y) {
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += x[i] * y[i];
    sxx += x[i] * x[i];
  }
  if (!(sxx > 0.0)) throw NumericalError("least squares with an all-zero design");
  return sxy / sxx;
}

SyntheticData generate(const SyntheticSpec& spec) {
  spec.validate();
  Sampler s(spec.seed);
  SyntheticData d;
  if (spec.beta0) {
    d.beta0 = *spec.beta0;
  } else {
    d.beta0 = spec.model == SynthModel::kDiscrete ? s.standard_normal() : 1.0;
  }
  auto draw = [&](std::vector<double>& xs, std::vector<double>& ys, std::size_t n) {
    xs.resize(n);
    ys.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      xs[i] = draw_x(spec.model, s);
      ys[i] = d.beta0 * xs[i] + noise_sd(spec.model, xs[i]) * s.standard_normal();
    }
  };
  draw(d.train_x, d.train_y, spec.train_n);
  d.beta_hat = spec.beta_hat ? *spec.beta_hat : ols_slope(d.train_x, d.train_y);
  draw(d.x, d.y, spec.audit_n);

  std::vector<double> loss(spec.audit_n);
  for (std::size_t i = 0; i < spec.audit_n; ++i) {
    const double r = d.y[i] - d.beta_hat * d.x[i];
    loss[i] = r * r;
  }
  d.trail = AuditTrail(std::move(loss), {Covariate::numeric("x", d.x)});
  return d;
}

double conditional_mean_loss(SynthModel model, double beta0, double beta_hat, double x) {
  const double delta = beta0 - beta_hat;
  const double variance = model == SynthModel::kHomoskedastic ? 1.0 : x;
  return variance + delta * delta * x * x;
}

double true_interval_disparity(SynthModel model, double beta0, double beta_hat, double a, double b) {
  if (!(a < b)) throw InputError("interval needs a < b");
  if (model == SynthModel::kDiscrete) throw InputError("interval truth is defined for the continuous models");
  const double delta = beta0 - beta_hat;
  const double quad = delta * delta * (a * a + a * b + b * b) / 3.0;
  const double variance = model == SynthModel::kHomoskedastic ? 1.0 : 0.5 * (a + b);
  return variance + quad;
}

std::vector<double> discrete_atoms() {
  std::vector<double> atoms(101);
  for (int k = 0; k <= 100; ++k) atoms[static_cast<std::size_t>(k)] = k / 100.0;
  return atoms;
}

}  // namespace groupaudit
