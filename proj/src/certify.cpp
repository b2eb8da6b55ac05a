#include "groupaudit/certify.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>

#include "groupaudit/error.hpp"

namespace groupaudit {

namespace {

struct Prepared {
  ResolvedTarget target;
  PreparedGroups groups;
  ProcessInputs inputs;
};

// ProcessInputs keeps pointers into the other members, so build in place.
std::unique_ptr<Prepared> prepare(const AuditTrail& trail, const TargetSpec& spec,
                                  const GroupCollection& collection) {
  if (collection.records() != trail.size()) {
    throw InputError("group collection covers " + std::to_string(collection.records()) +
                     " records but the trail has " + std::to_string(trail.size()));
  }
  auto p = std::make_unique<Prepared>();
  p->target = resolve_target(trail, spec);
  p->groups = prepare_groups(collection);
  if (p->groups.size() == 0) throw InputError("no non-empty groups to audit");
  p->inputs = make_inputs(trail, p->target, p->groups);
  return p;
}

CertificationReport skeleton(const Prepared& p, const BootstrapConfig& config, bool rescaled) {
  CertificationReport r;
  r.target_kind = target_kind_name(p.target.spec);
  r.theta_hat = p.target.theta;
  r.config = config;
  r.rescaled = rescaled;
  r.excluded_empty = p.groups.excluded_empty;
  r.groups.resize(p.groups.size());
  for (std::size_t g = 0; g < p.groups.size(); ++g) {
    auto& gr = r.groups[g];
    gr.name = p.groups.names[g];
    gr.count = p.groups.members[g].count();
    gr.p_n = p.groups.p_n[g];
    gr.eps_hat = p.inputs.eps_hat[g];
    gr.degenerate = gr.count <= 1;
    if (p.groups.grid) {
      const auto [j, k] = p.groups.cell_range[g];
      gr.endpoints = std::make_pair<std::size_t, std::size_t>(j, k);
    }
  }
  return r;
}

// Fills s_hat and returns 1/s_hat per group.
std::vector<double> attach_scales(const AuditTrail& trail, const Prepared& p,
                                  const BootstrapConfig& config, CertificationReport& r) {
  const auto moments = compute_moments(trail, p.target, p.groups.members);
  std::vector<double> inv(p.groups.size());
  for (std::size_t g = 0; g < p.groups.size(); ++g) {
    const auto sigma = sigma_hat(moments, g);
    const double s = s_hat(moments, g, config.p_star, config.w0);
    r.groups[g].s_hat = s;
    r.groups[g].sigma_clamped = sigma.clamped;
    inv[g] = 1.0 / s;
  }
  return inv;
}

void warn_if_vacuous(const std::vector<double>& maxima, CertificationReport& r) {
  const bool all_zero =
      std::all_of(maxima.begin(), maxima.end(), [](double v) { return v == 0.0; });
  const std::string msg = "vacuous certification: every replicate maximum is zero";
  if (all_zero && std::find(r.warnings.begin(), r.warnings.end(), msg) == r.warnings.end()) {
    r.warnings.push_back(msg);
  }
}

double critical_value(const ReplicateMaxima& m, double alpha) {
  return quantile(1.0 - alpha, m.values);
}

}  // namespace

std::string bound_side_name(BoundSide side) {
  switch (side) {
    case BoundSide::kLower: return "lower";
    case BoundSide::kUpper: return "upper";
    default: return "two-sided";
  }
}

std::string direction_name(Direction d) {
  switch (d) {
    case Direction::kAbove: return "above";
    case Direction::kBelow: return "below";
    default: return "bioequivalence";
  }
}

double lower_bound_value(double eps_hat, double t_star, double p_n, double s_hat) {
  return eps_hat - t_star * s_hat / (p_n * p_n);
}

double upper_bound_value(double eps_hat, double t_star, double p_n, double s_hat) {
  return eps_hat + t_star * s_hat / (p_n * p_n);
}

bool certified_above(double eps_hat, double tolerance, double t_star, double p_n, double s_hat) {
  return eps_hat >= tolerance + t_star * s_hat / p_n;
}

bool certified_below(double eps_hat, double tolerance, double t_star, double p_n, double s_hat) {
  return eps_hat <= tolerance - t_star * s_hat / p_n;
}

CertificationReport certify_bounds(const AuditTrail& trail, const TargetSpec& target,
                                   const GroupCollection& groups, const BootstrapConfig& config,
                                   BoundSide side, const CertifyOptions& options) {
  config.validate();
  const auto p = prepare(trail, target, groups);
  auto r = skeleton(*p, config, options.rescaled);
  r.mode = "bounds-" + bound_side_name(side);

  ProcessSpec spec;
  spec.kind = StatisticKind::kBound;
  spec.tail = side == BoundSide::kLower ? Tail::kUpper
              : side == BoundSide::kUpper ? Tail::kLower
                                          : Tail::kAbsolute;
  if (options.rescaled) spec.inv_scale = attach_scales(trail, *p, config, r);

  const auto maxima = replicate_maxima(p->inputs, spec, config, options.engine);
  r.theta_fallbacks = maxima.theta_fallbacks;
  r.t_star = critical_value(maxima, config.alpha);
  warn_if_vacuous(maxima.values, r);

  for (auto& g : r.groups) {
    const double s = g.s_hat.value_or(1.0);
    if (side != BoundSide::kUpper) g.lower = lower_bound_value(g.eps_hat, r.t_star, g.p_n, s);
    if (side != BoundSide::kLower) g.upper = upper_bound_value(g.eps_hat, r.t_star, g.p_n, s);
  }
  return r;
}

double boolean_critical_value(const ProcessInputs& in, double tolerance, Direction direction,
                              const BootstrapConfig& config, bool fast_path,
                              std::size_t* theta_fallbacks) {
  if (direction == Direction::kBioequivalence) {
    throw InputError("bioequivalence needs two critical values; use boolean_certify");
  }
  ProcessSpec spec;
  spec.kind = StatisticKind::kBoolean;
  spec.tolerance = tolerance;
  spec.tail = direction == Direction::kAbove ? Tail::kUpper : Tail::kLower;
  spec.fast_path = fast_path && in.groups->grid;
  const auto maxima = replicate_maxima(in, spec, config);
  if (theta_fallbacks) *theta_fallbacks = maxima.theta_fallbacks;
  return critical_value(maxima, config.alpha);
}

CertificationReport boolean_certify(const AuditTrail& trail, const TargetSpec& target,
                                    const GroupCollection& groups, double tolerance,
                                    const BootstrapConfig& config, Direction direction,
                                    const CertifyOptions& options) {
  config.validate();
  if (!std::isfinite(tolerance)) throw InputError("tolerance must be finite");
  if (direction == Direction::kBioequivalence && !(tolerance > 0.0)) {
    throw InputError("bioequivalence needs a positive tolerance");
  }
  const auto p = prepare(trail, target, groups);
  auto r = skeleton(*p, config, options.rescaled);
  r.mode = "certify-" + direction_name(direction);
  r.tolerance = tolerance;

  std::vector<double> inv_scale;
  if (options.rescaled) inv_scale = attach_scales(trail, *p, config, r);
  const bool fast = options.fast_path && !options.rescaled && p->groups.grid;
  r.fast_path_used = fast;

  auto run = [&](Tail tail, double tol) {
    ProcessSpec spec;
    spec.kind = StatisticKind::kBoolean;
    spec.tail = tail;
    spec.tolerance = tol;
    spec.inv_scale = inv_scale;
    spec.fast_path = fast;
    auto maxima = replicate_maxima(p->inputs, spec, config, options.engine);
    r.theta_fallbacks = std::max(r.theta_fallbacks, maxima.theta_fallbacks);
    warn_if_vacuous(maxima.values, r);
    return critical_value(maxima, config.alpha);
  };

  if (direction == Direction::kAbove) {
    r.t_star = run(Tail::kUpper, tolerance);
    for (auto& g : r.groups) {
      const double s = g.s_hat.value_or(1.0);
      g.certified = certified_above(g.eps_hat, tolerance, r.t_star, g.p_n, s);
      g.margin = g.eps_hat - tolerance - r.t_star * s / g.p_n;
    }
  } else if (direction == Direction::kBelow) {
    r.t_star = run(Tail::kLower, tolerance);
    for (auto& g : r.groups) {
      const double s = g.s_hat.value_or(1.0);
      g.certified = certified_below(g.eps_hat, tolerance, r.t_star, g.p_n, s);
      g.margin = tolerance - r.t_star * s / g.p_n - g.eps_hat;
    }
  } else {
    r.t_star = run(Tail::kLower, tolerance);
    r.t_star_second = run(Tail::kUpper, -tolerance);
    for (auto& g : r.groups) {
      const double s = g.s_hat.value_or(1.0);
      const bool below = certified_below(g.eps_hat, tolerance, r.t_star, g.p_n, s);
      const bool above = certified_above(g.eps_hat, -tolerance, *r.t_star_second, g.p_n, s);
      g.certified = below && above;
      g.margin = tolerance - r.t_star * s / g.p_n - g.eps_hat;
      g.margin_second = g.eps_hat + tolerance - *r.t_star_second * s / g.p_n;
    }
  }
  return r;
}

std::vector<CurvePoint> width_curve(const CertificationReport& report, const IntervalGrid& grid) {
  // Widths are keyed on a rounded value so 0.1 + 0.2 and 0.3 share a bucket.
  std::map<long long, CurvePoint> by_width;
  for (const auto& g : report.groups) {
    if (!g.endpoints) throw InputError("curve export needs a report over an interval grid");
    const auto [j, k] = *g.endpoints;
    if (k >= grid.endpoints.size()) throw InputError("report does not match the interval grid");
    const double width = grid.endpoints[k] - grid.endpoints[j];
    const auto key = std::llround(width * 1e9);
    auto [it, fresh] = by_width.try_emplace(key);
    auto& pt = it->second;
    if (fresh) {
      pt.width = width;
      pt.min_eps_hat = g.eps_hat;
    }
    ++pt.intervals;
    pt.min_eps_hat = std::min(pt.min_eps_hat, g.eps_hat);
    if (g.lower) pt.min_lower = pt.min_lower ? std::min(*pt.min_lower, *g.lower) : *g.lower;
    if (g.upper) pt.min_upper = pt.min_upper ? std::min(*pt.min_upper, *g.upper) : *g.upper;
  }
  std::vector<CurvePoint> out;
  out.reserve(by_width.size());
  for (auto& [key, pt] : by_width) out.push_back(pt);
  return out;
}

}  // namespace groupaudit
