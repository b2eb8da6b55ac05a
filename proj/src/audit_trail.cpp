#include "groupaudit/audit_trail.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>

#include "groupaudit/error.hpp"

namespace groupaudit {

Membership::Membership(std::size_t universe, std::vector<std::uint32_t> indices)
    : universe_(universe), indices_(std::move(indices)) {
  std::sort(indices_.begin(), indices_.end());
  indices_.erase(std::unique(indices_.begin(), indices_.end()), indices_.end());
  if (!indices_.empty() && indices_.back() >= universe_) {
    throw InputError("membership index " + std::to_string(indices_.back()) +
                     " out of range for " + std::to_string(universe_) + " records");
  }
}

Membership Membership::from_mask(std::span<const std::uint8_t> mask) {
  std::vector<std::uint32_t> idx;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) idx.push_back(static_cast<std::uint32_t>(i));
  }
  return Membership(mask.size(), std::move(idx));
}

Membership Membership::all(std::size_t universe) {
  std::vector<std::uint32_t> idx(universe);
  for (std::size_t i = 0; i < universe; ++i) idx[i] = static_cast<std::uint32_t>(i);
  return Membership(universe, std::move(idx));
}

bool Membership::contains(std::size_t i) const {
  return std::binary_search(indices_.begin(), indices_.end(), static_cast<std::uint32_t>(i));
}

std::vector<std::uint8_t> Membership::mask() const {
  std::vector<std::uint8_t> m(universe_, 0);
  for (auto i : indices_) m[i] = 1;
  return m;
}

Membership Membership::intersect(const Membership& other) const {
  if (other.universe_ != universe_) throw InputError("membership universe mismatch");
  std::vector<std::uint32_t> out;
  std::set_intersection(indices_.begin(), indices_.end(), other.indices_.begin(),
                        other.indices_.end(), std::back_inserter(out));
  return Membership(universe_, std::move(out));
}

Covariate Covariate::categorical(std::string name, std::vector<std::int32_t> codes,
                                 std::vector<std::string> levels) {
  Covariate c;
  c.name = std::move(name);
  c.kind = CovariateKind::kCategorical;
  if (levels.empty()) {
    std::int32_t top = -1;
    for (auto v : codes) top = std::max(top, v);
    for (std::int32_t v = 0; v <= top; ++v) levels.push_back(std::to_string(v));
  }
  c.codes = std::move(codes);
  c.levels = std::move(levels);
  return c;
}

Covariate Covariate::numeric(std::string name, std::vector<double> values) {
  Covariate c;
  c.name = std::move(name);
  c.kind = CovariateKind::kNumeric;
  c.values = std::move(values);
  return c;
}

std::size_t Covariate::size() const {
  return kind == CovariateKind::kCategorical ? codes.size() : values.size();
}

AuditTrail::AuditTrail(std::vector<double> loss, std::vector<Covariate> covariates,
                       std::vector<std::string> record_ids)
    : loss_(std::move(loss)), covariates_(std::move(covariates)), record_ids_(std::move(record_ids)) {
  const std::size_t n = loss_.size();
  if (n == 0) throw InputError("audit trail must contain at least one record");
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(loss_[i])) {
      throw InputError("non-finite loss at record " + std::to_string(i));
    }
  }
  for (std::size_t a = 0; a < covariates_.size(); ++a) {
    const auto& c = covariates_[a];
    for (std::size_t b = 0; b < a; ++b) {
      if (covariates_[b].name == c.name) throw InputError("duplicate covariate '" + c.name + "'");
    }
    if (c.size() != n) {
      throw InputError("covariate '" + c.name + "' has " + std::to_string(c.size()) +
                       " values, expected " + std::to_string(n));
    }
    if (c.kind == CovariateKind::kCategorical) {
      const auto levels = static_cast<std::int32_t>(c.levels.size());
      for (std::size_t i = 0; i < n; ++i) {
        if (c.codes[i] < 0 || c.codes[i] >= levels) {
          throw InputError("covariate '" + c.name + "' code out of range at record " +
                           std::to_string(i));
        }
      }
    }
  }
  if (!record_ids_.empty() && record_ids_.size() != n) {
    throw InputError("record id column length does not match record count");
  }
}

bool AuditTrail::has_covariate(const std::string& name) const {
  return std::any_of(covariates_.begin(), covariates_.end(),
                     [&](const Covariate& c) { return c.name == name; });
}

const Covariate& AuditTrail::covariate(const std::string& name) const {
  for (const auto& c : covariates_) {
    if (c.name == name) return c;
  }
  throw InputError("unknown covariate '" + name + "'");
}

std::string target_kind_name(const TargetSpec& spec) {
  switch (spec.index()) {
    case 0: return "fixed";
    case 1: return "pooled-mean";
    case 2: return "reference-mean";
    default: return "custom";
  }
}

ResolvedTarget resolve_target(const AuditTrail& trail, const TargetSpec& spec) {
  const std::size_t n = trail.size();
  const auto loss = trail.loss();
  ResolvedTarget out;
  out.spec = spec;
  out.psi.assign(n, 0.0);

  if (const auto* fixed = std::get_if<FixedTarget>(&spec)) {
    if (!std::isfinite(fixed->theta)) throw InputError("fixed target must be finite");
    out.theta = fixed->theta;
  } else if (std::holds_alternative<PooledMeanTarget>(spec)) {
    double sum = 0.0;
    for (double l : loss) sum += l;
    out.theta = sum / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) out.psi[i] = loss[i] - out.theta;
  } else if (const auto* ref = std::get_if<ReferenceMeanTarget>(&spec)) {
    if (ref->reference.universe() != n) {
      throw InputError("reference membership length does not match record count");
    }
    if (ref->reference.empty()) throw InputError("empty reference group");
    double sum = 0.0;
    for (auto i : ref->reference.indices()) sum += loss[i];
    const double m = static_cast<double>(ref->reference.count());
    out.theta = sum / m;
    const double p_ref = m / static_cast<double>(n);
    for (auto i : ref->reference.indices()) out.psi[i] = (loss[i] - out.theta) / p_ref;
  } else {
    const auto& custom = std::get<CustomTarget>(spec);
    if (custom.psi.size() != n) {
      throw InputError("custom influence vector has " + std::to_string(custom.psi.size()) +
                       " values, expected " + std::to_string(n));
    }
    if (!std::isfinite(custom.theta)) throw InputError("custom target must be finite");
    for (double v : custom.psi) {
      if (!std::isfinite(v)) throw InputError("custom influence vector contains non-finite values");
    }
    out.theta = custom.theta;
    out.psi = custom.psi;
  }

  double psi_sum = 0.0;
  for (double v : out.psi) psi_sum += v;
  out.psi_mean = psi_sum / static_cast<double>(n);
  return out;
}

std::optional<double> empirical_disparity(const AuditTrail& trail, double theta,
                                          const Membership& members) {
  if (members.empty()) return std::nullopt;
  const auto loss = trail.loss();
  double sum = 0.0;
  for (auto i : members.indices()) sum += loss[i];
  return sum / static_cast<double>(members.count()) - theta;
}

double sample_variance(std::span<const double> values) {
  const std::size_t m = values.size();
  if (m < 2) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(m);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return ss / static_cast<double>(m - 1);
}

MomentCache compute_moments(const AuditTrail& trail, const ResolvedTarget& target,
                            std::span<const Membership> groups) {
  const std::size_t n = trail.size();
  const auto loss = trail.loss();
  const auto& psi = target.psi;

  MomentCache cache;
  cache.n = n;
  cache.var_loss = sample_variance(loss);
  cache.var_psi = sample_variance(psi);
  cache.groups.reserve(groups.size());

  for (const auto& g : groups) {
    GroupMoments gm;
    gm.count = g.count();
    gm.p_n = static_cast<double>(gm.count) / static_cast<double>(n);
    if (gm.count == 0) {
      gm.degenerate = true;
      cache.groups.push_back(gm);
      continue;
    }
    double sl = 0.0, sp = 0.0;
    for (auto i : g.indices()) {
      sl += loss[i];
      sp += psi[i];
    }
    const double m = static_cast<double>(gm.count);
    gm.mean_loss = sl / m;
    if (gm.count <= 1) {
      gm.degenerate = true;
    } else {
      const double mean_psi = sp / m;
      double vl = 0.0, c = 0.0;
      for (auto i : g.indices()) {
        const double dl = loss[i] - gm.mean_loss;
        vl += dl * dl;
        c += dl * (psi[i] - mean_psi);
      }
      gm.var_loss = vl / (m - 1.0);
      gm.cov_loss_psi = c / (m - 1.0);
    }
    cache.groups.push_back(gm);
  }
  return cache;
}

SigmaEstimate sigma_hat(const MomentCache& moments, std::size_t group) {
  const auto& g = moments.groups.at(group);
  SigmaEstimate out;
  out.degenerate = g.degenerate;
  const double var = g.var_loss + g.p_n * (moments.var_psi - 2.0 * g.cov_loss_psi);
  if (var < 0.0) {
    out.clamped = true;
    out.value = 0.0;
  } else {
    out.value = std::sqrt(var);
  }
  return out;
}

double s_hat(double p_n, double sigma_group, double var_loss, double p_star, double w0) {
  if (!(p_star > 0.0)) throw InputError("p_star must be positive");
  if (!(w0 > 0.0)) throw InputError("w0 must be positive or infinite");
  const double floor_term = std::pow(std::max(p_n, p_star), 1.5);
  const double pooled_sd = std::sqrt(std::max(var_loss, 0.0));
  double s;
  if (std::isinf(w0)) {
    if (!(var_loss > 0.0)) throw NumericalError("degenerate loss: zero pooled variance");
    s = floor_term * pooled_sd;
  } else {
    s = floor_term * (p_n / (p_n + w0) * sigma_group + w0 / (p_n + w0) * pooled_sd);
  }
  if (!(s > 0.0)) throw NumericalError("degenerate loss: zero pooled variance");
  return s;
}

double s_hat(const MomentCache& moments, std::size_t group, double p_star, double w0) {
  const auto sigma = sigma_hat(moments, group);
  return s_hat(moments.groups.at(group).p_n, sigma.value, moments.var_loss, p_star, w0);
}

}  // namespace groupaudit
