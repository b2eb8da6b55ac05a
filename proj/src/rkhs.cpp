#include "groupaudit/rkhs.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "groupaudit/error.hpp"

namespace groupaudit {

namespace {

double top_eigenvalue(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericalError("symmetric eigensolver did not converge");
  return es.eigenvalues()(es.eigenvalues().size() - 1);
}

// F with F' F = m over the numerically nonzero part of the spectrum. Directions
// below 1e-12 of the top eigenvalue are dropped: they are rounding noise from
// exactly dependent columns, and keeping them would leak sqrt(eps) into the result.
Eigen::MatrixXd psd_range_factor(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw NumericalError("symmetric eigensolver did not converge");
  const auto& ev = es.eigenvalues();
  const double cut = 1e-12 * std::max(ev.maxCoeff(), 0.0);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) > cut) keep.push_back(i);
  }
  Eigen::MatrixXd f(static_cast<Eigen::Index>(keep.size()), m.cols());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    const auto i = keep[r];
    f.row(static_cast<Eigen::Index>(r)) = std::sqrt(ev(i)) * es.eigenvectors().col(i).transpose();
  }
  return f;
}

std::vector<double> row(const Eigen::MatrixXd& m, Eigen::Index i) {
  std::vector<double> out(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(j)] = m(i, j);
  return out;
}

double bootstrap_shift(const ResolvedTarget& target, std::span<const std::uint32_t> w, bool estimated) {
  if (!estimated) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += (static_cast<double>(w[i]) - 1.0) * target.psi[i];
  return s / static_cast<double>(w.size());
}

}  // namespace

void KernelSpec::validate() const {
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
    throw InputError("kernel bandwidth must be finite and positive");
  }
  if (columns.empty()) throw InputError("kernel needs at least one covariate column");
}

std::string kernel_family_name(KernelFamily f) {
  return f == KernelFamily::kGaussian ? "gaussian" : "laplace";
}

KernelFamily parse_kernel_family(const std::string& name) {
  if (name == "gaussian") return KernelFamily::kGaussian;
  if (name == "laplace") return KernelFamily::kLaplace;
  throw InputError("unknown kernel family '" + name + "' (expected gaussian or laplace)");
}

double kernel_value(const KernelSpec& spec, std::span<const double> x, std::span<const double> y) {
  double d = 0.0;
  if (spec.family == KernelFamily::kGaussian) {
    for (std::size_t k = 0; k < x.size(); ++k) d += (x[k] - y[k]) * (x[k] - y[k]);
    return std::exp(-d / (2.0 * spec.bandwidth * spec.bandwidth));
  }
  for (std::size_t k = 0; k < x.size(); ++k) d += std::abs(x[k] - y[k]);
  return std::exp(-d / spec.bandwidth);
}

Eigen::MatrixXd kernel_points(const AuditTrail& trail, const KernelSpec& spec) {
  spec.validate();
  const auto n = static_cast<Eigen::Index>(trail.size());
  Eigen::MatrixXd x(n, static_cast<Eigen::Index>(spec.columns.size()));
  for (std::size_t c = 0; c < spec.columns.size(); ++c) {
    const auto& col = trail.covariate(spec.columns[c]);
    if (col.kind != CovariateKind::kNumeric) {
      throw InputError("kernel covariate '" + col.name + "' must be numeric");
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = col.values[static_cast<std::size_t>(i)];
      if (!std::isfinite(v)) {
        throw InputError("non-finite value in kernel covariate '" + col.name + "' at record " +
                         std::to_string(i));
      }
      x(i, static_cast<Eigen::Index>(c)) = v;
    }
  }
  return x;
}

Eigen::MatrixXd gram(const KernelSpec& spec, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols()) throw InputError("kernel points have different dimensions");
  Eigen::MatrixXd k(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const auto ri = row(a, i);
    for (Eigen::Index j = 0; j < b.rows(); ++j) k(i, j) = kernel_value(spec, ri, row(b, j));
  }
  return k;
}

KernelFactor factor_kernel(Eigen::MatrixXd K) {
  KernelFactor f;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(K);
  if (es.info() != Eigen::Success) {
    throw NumericalError("kernel factorization failed for a " + std::to_string(K.rows()) +
                         "x" + std::to_string(K.cols()) + " matrix");
  }
  const auto& ev = es.eigenvalues();
  f.min_eigenvalue = ev.minCoeff();
  f.max_eigenvalue = ev.maxCoeff();
  f.clamped = static_cast<std::size_t>((ev.array() < 0.0).count());
  const Eigen::VectorXd root = ev.cwiseMax(0.0).cwiseSqrt();
  f.R = es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
  f.R = 0.5 * (f.R + f.R.transpose());
  const double scale = K.cwiseAbs().maxCoeff();
  f.residual = scale > 0.0 ? (f.R * f.R - K).cwiseAbs().maxCoeff() / scale : 0.0;
  if (!std::isfinite(f.residual) || f.residual > 1e-8) {
    std::ostringstream os;
    os << "kernel square root residual " << f.residual << " exceeds 1e-8 (eigenvalues in ["
       << f.min_eigenvalue << ", " << f.max_eigenvalue << "], " << f.clamped << " clamped)";
    throw NumericalError(os.str());
  }
  f.K = std::move(K);
  return f;
}

KernelFactor kernel_matrix(const AuditTrail& trail, const KernelSpec& spec) {
  const auto x = kernel_points(trail, spec);
  return factor_kernel(gram(spec, x, x));
}

AnchorKernel anchor_kernel(const Eigen::MatrixXd& points, const KernelSpec& spec) {
  AnchorKernel a;
  std::map<std::vector<double>, std::uint32_t> index;
  std::vector<std::vector<double>> distinct;
  std::vector<double> counts;
  a.anchor_of.resize(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    auto key = row(points, i);
    auto [it, fresh] = index.try_emplace(key, static_cast<std::uint32_t>(distinct.size()));
    if (fresh) {
      distinct.push_back(std::move(key));
      counts.push_back(0.0);
    }
    counts[it->second] += 1.0;
    a.anchor_of[static_cast<std::size_t>(i)] = it->second;
  }
  const auto m = static_cast<Eigen::Index>(distinct.size());
  a.points.resize(m, points.cols());
  for (Eigen::Index j = 0; j < m; ++j) {
    for (Eigen::Index c = 0; c < points.cols(); ++c) a.points(j, c) = distinct[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)];
  }
  a.counts = Eigen::Map<Eigen::VectorXd>(counts.data(), m);
  a.K = gram(spec, a.points, a.points);
  return a;
}

double rkhs_replicate_dense(const KernelFactor& factor, std::span<const double> loss,
                            std::span<const std::uint32_t> w, double t) {
  const auto n = static_cast<Eigen::Index>(loss.size());
  if (factor.R.rows() != n) throw InputError("kernel factor does not match the trail");
  Eigen::VectorXd a(n), one = Eigen::VectorXd::Ones(n), wv(n), l(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    wv(i) = w[k];
    l(i) = loss[k];
    a(i) = w[k] * loss[k];
  }
  const double n2 = static_cast<double>(n) * static_cast<double>(n);
  Eigen::MatrixXd A = (a * one.transpose() - wv * l.transpose() - t * one * one.transpose()) / n2;
  const Eigen::MatrixXd S = 0.5 * (A + A.transpose());
  const Eigen::MatrixXd M = factor.R * S * factor.R;
  return top_eigenvalue(0.5 * (M + M.transpose()));
}

double rkhs_replicate_lowrank(const AnchorKernel& anchors, std::span<const double> loss,
                              std::span<const std::uint32_t> w, double t) {
  const std::size_t n = loss.size();
  if (n < 5) throw InputError("the rank-4 reduction needs at least 5 records");
  const auto m = anchors.points.rows();
  // Columns: w*L, 1, w, L summed per anchor.
  Eigen::MatrixXd U = Eigen::MatrixXd::Zero(m, 4);
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = static_cast<Eigen::Index>(anchors.anchor_of[i]);
    U(a, 0) += w[i] * loss[i];
    U(a, 1) += 1.0;
    U(a, 2) += w[i];
    U(a, 3) += loss[i];
  }
  const Eigen::Matrix4d G = U.transpose() * (anchors.K * U);
  const double n2 = static_cast<double>(n) * static_cast<double>(n);
  Eigen::Matrix4d C = Eigen::Matrix4d::Zero();
  C(0, 1) = C(1, 0) = 1.0;
  C(2, 3) = C(3, 2) = -1.0;
  C(1, 1) = -2.0 * t;
  C /= 2.0 * n2;
  const Eigen::MatrixXd F = psd_range_factor(0.5 * (G + G.transpose()));
  if (F.rows() == 0) return 0.0;
  const Eigen::MatrixXd M = F * C * F.transpose();
  // The n x n matrix has at least n - 4 zero eigenvalues.
  return std::max(top_eigenvalue(0.5 * (M + M.transpose())), 0.0);
}

RkhsRun rkhs_critical_value(const AuditTrail& trail, const TargetSpec& target,
                            const KernelSpec& spec, const BootstrapConfig& config,
                            const RkhsOptions& options) {
  config.validate();
  spec.validate();
  if (!(options.quantile_divisor >= 1.0)) throw InputError("quantile divisor must be >= 1");
  if (!(sample_variance(trail.loss()) > 0.0)) {
    throw NumericalError("degenerate loss: zero pooled variance");
  }
  const auto resolved = resolve_target(trail, target);
  const auto x = kernel_points(trail, spec);
  const std::size_t n = trail.size();
  const auto loss = trail.loss();
  const bool estimated = options.estimated_theta && !resolved.fixed();

  RkhsRun run;
  run.config = config;
  run.kernel = spec;
  run.estimated_theta = estimated;
  run.theta_hat = resolved.theta;
  run.target_kind = target_kind_name(resolved.spec);
  run.quantile_level = 1.0 - config.alpha / options.quantile_divisor;
  run.replicates.resize(config.replicates);

  const bool dense = options.engine == Engine::kSerial || n < 5;
  if (dense) {
    const auto factor = factor_kernel(gram(spec, x, x));
    run.anchors = n;
    auto one = [&](std::size_t b, std::vector<std::uint32_t>& w) {
      resample_weights_into(config.seed, b, w);
      run.replicates[b] = rkhs_replicate_dense(factor, loss, w, bootstrap_shift(resolved, w, estimated));
    };
    std::vector<std::uint32_t> w(n);
    if (options.engine == Engine::kSerial) {
      for (std::size_t b = 0; b < config.replicates; ++b) one(b, w);
    } else {
      const auto nb = static_cast<std::int64_t>(config.replicates);
#pragma omp parallel if (!omp_in_parallel()) firstprivate(w)
      {
#pragma omp for schedule(static)
        for (std::int64_t b = 0; b < nb; ++b) one(static_cast<std::size_t>(b), w);
      }
    }
  } else {
    const auto anchors = anchor_kernel(x, spec);
    run.anchors = static_cast<std::size_t>(anchors.points.rows());
    const auto nb = static_cast<std::int64_t>(config.replicates);
#pragma omp parallel if (!omp_in_parallel())
    {
      std::vector<std::uint32_t> w(n);
#pragma omp for schedule(static)
      for (std::int64_t b = 0; b < nb; ++b) {
        resample_weights_into(config.seed, static_cast<std::uint64_t>(b), w);
        run.replicates[static_cast<std::size_t>(b)] =
            rkhs_replicate_lowrank(anchors, loss, w, bootstrap_shift(resolved, w, estimated));
      }
    }
  }
  run.t_star = quantile(run.quantile_level, run.replicates);
  return run;
}

std::vector<double> shift_values(const AuditTrail& trail, const KernelSpec& spec,
                                 const ShiftQuery& query) {
  const std::size_t n = trail.size();
  if (!query.by_coefficients()) {
    if (query.values.size() != n) {
      throw InputError("shift query has " + std::to_string(query.values.size()) +
                       " values, expected " + std::to_string(n));
    }
    return query.values;
  }
  if (static_cast<std::size_t>(query.anchor_points.rows()) != query.coefficients.size()) {
    throw InputError("shift query needs one coefficient per anchor point");
  }
  const auto x = kernel_points(trail, spec);
  const Eigen::MatrixXd k = gram(spec, x, query.anchor_points);
  const Eigen::VectorXd c = Eigen::Map<const Eigen::VectorXd>(
      query.coefficients.data(), static_cast<Eigen::Index>(query.coefficients.size()));
  const Eigen::VectorXd h = k * c;
  return {h.data(), h.data() + h.size()};
}

double shift_disparity(std::span<const double> loss, double theta, std::span<const double> h) {
  if (h.size() != loss.size()) throw InputError("shift values do not match the trail");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    num += h[i] * (loss[i] - theta);
    den += h[i];
  }
  if (!(den > 0.0)) throw InputError("shift has no mass on sample");
  return num / den;
}

double shift_lower_bound(double eps_hat, double mean_h, double t_star) {
  if (!(mean_h > 0.0)) throw InputError("shift has no mass on sample");
  return eps_hat - t_star / (mean_h * mean_h);
}

ShiftEvaluation evaluate_shift(const AuditTrail& trail, const TargetSpec& target,
                               const KernelSpec& spec, const ShiftQuery& query, double t_star) {
  ShiftEvaluation out;
  const auto h = shift_values(trail, spec, query);
  if (query.by_coefficients()) {
    const Eigen::MatrixXd kaa = gram(spec, query.anchor_points, query.anchor_points);
    const Eigen::VectorXd c = Eigen::Map<const Eigen::VectorXd>(
        query.coefficients.data(), static_cast<Eigen::Index>(query.coefficients.size()));
    const double norm2 = c.dot(kaa * c);
    out.rkhs_norm = std::sqrt(std::max(norm2, 0.0));
    if (norm2 > 1.0 + 1e-12) {
      throw InputError("shift query has RKHS norm " + std::to_string(*out.rkhs_norm) +
                       ", outside the unit ball");
    }
    out.norm_verified = true;
    out.norm_note = "unit-ball membership verified from the coefficients";
  } else {
    if (query.norm_certificate && *query.norm_certificate > 1.0) {
      throw InputError("declared RKHS norm exceeds 1");
    }
    out.norm_note = "unit-ball membership taken from the caller's certificate, not verified";
  }
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (!(h[i] >= 0.0)) {
      throw InputError("shift is negative at record " + std::to_string(i));
    }
  }
  out.nonnegativity_note = "non-negativity verified at " + std::to_string(h.size()) + " points";
  double sum = 0.0;
  for (double v : h) sum += v;
  out.mean_h = sum / static_cast<double>(h.size());
  const auto resolved = resolve_target(trail, target);
  out.eps_hat = shift_disparity(trail.loss(), resolved.theta, h);
  out.lower = shift_lower_bound(out.eps_hat, out.mean_h, t_star);
  return out;
}

double population_sup_discrete(const Eigen::MatrixXd& atoms, std::span<const double> prob,
                               std::span<const double> cond_mean, const Eigen::MatrixXd& sample,
                               std::span<const double> loss, const KernelSpec& spec,
                               double theta) {
  const auto na = static_cast<std::size_t>(atoms.rows());
  if (prob.size() != na || cond_mean.size() != na) {
    throw InputError("atoms, probabilities and conditional means differ in length");
  }
  if (static_cast<std::size_t>(sample.rows()) != loss.size()) {
    throw InputError("sample points and losses differ in length");
  }
  if (sample.cols() != atoms.cols()) throw InputError("sample and atoms differ in dimension");
  double total = 0.0;
  for (double p : prob) {
    if (!(p >= 0.0)) throw InputError("atom probabilities must be non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-12) throw InputError("atom probabilities do not sum to 1");

  // Joint anchor set: atoms first, then sample points not already present.
  std::map<std::vector<double>, std::size_t> index;
  std::vector<std::vector<double>> pts;
  auto anchor = [&](std::vector<double> p) {
    auto [it, fresh] = index.try_emplace(p, pts.size());
    if (fresh) pts.push_back(std::move(p));
    return it->second;
  };
  std::vector<std::size_t> atom_anchor(na);
  for (std::size_t a = 0; a < na; ++a) atom_anchor[a] = anchor(row(atoms, static_cast<Eigen::Index>(a)));
  std::vector<std::size_t> sample_anchor(loss.size());
  for (std::size_t i = 0; i < loss.size(); ++i) sample_anchor[i] = anchor(row(sample, static_cast<Eigen::Index>(i)));

  const auto m = static_cast<Eigen::Index>(pts.size());
  const double n = static_cast<double>(loss.size());
  Eigen::VectorXd u_p = Eigen::VectorXd::Zero(m), v_p = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd u_n = Eigen::VectorXd::Zero(m), v_n = Eigen::VectorXd::Zero(m);
  for (std::size_t a = 0; a < na; ++a) {
    const auto j = static_cast<Eigen::Index>(atom_anchor[a]);
    u_p(j) += prob[a];
    v_p(j) += prob[a] * (cond_mean[a] - theta);
  }
  for (std::size_t i = 0; i < loss.size(); ++i) {
    const auto j = static_cast<Eigen::Index>(sample_anchor[i]);
    u_n(j) += 1.0 / n;
    v_n(j) += (loss[i] - theta) / n;
  }
  Eigen::MatrixXd P(m, atoms.cols());
  for (Eigen::Index j = 0; j < m; ++j) {
    for (Eigen::Index c = 0; c < atoms.cols(); ++c) P(j, c) = pts[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)];
  }
  const auto factor = factor_kernel(gram(spec, P, P));
  const Eigen::MatrixXd A = u_p * v_n.transpose() - u_n * v_p.transpose();
  const Eigen::MatrixXd S = 0.5 * (A + A.transpose());
  const Eigen::MatrixXd M = factor.R * S * factor.R;
  return std::max(top_eigenvalue(0.5 * (M + M.transpose())), 0.0);
}

}  // namespace groupaudit
