#include "groupaudit/flag.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "groupaudit/error.hpp"

namespace groupaudit {

namespace {

bool pairwise_disjoint(const PreparedGroups& g) {
  std::vector<std::uint8_t> seen(g.n, 0);
  for (const auto& m : g.members) {
    for (auto i : m.indices()) {
      if (seen[i]) return false;
      seen[i] = 1;
    }
  }
  return true;
}

bool binary_loss(std::span<const double> loss) {
  return std::all_of(loss.begin(), loss.end(), [](double l) { return l == 0.0 || l == 1.0; });
}

// Explicit list of the non-empty groups of any collection.
std::vector<NamedGroup> listed(const GroupCollection& c) {
  if (!c.is_grid()) return c.explicit_groups().groups;
  auto all = c.enumerate();
  std::erase_if(all, [](const NamedGroup& g) { return g.members.empty(); });
  return all;
}

void apply_bh(FlagReport& r) {
  std::vector<double> p;
  p.reserve(r.groups.size());
  for (const auto& g : r.groups) p.push_back(g.p_value);
  const auto rejected = benjamini_hochberg(p, r.alpha);
  for (std::size_t i = 0; i < r.groups.size(); ++i) r.groups[i].flagged = rejected[i];
}

}  // namespace

std::string flag_direction_name(FlagDirection d) {
  switch (d) {
    case FlagDirection::kGreater: return "greater";
    case FlagDirection::kLess: return "less";
    default: return "two-sided";
  }
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double mad_scale(std::span<const double> deltas) {
  if (deltas.empty()) return 0.0;
  std::vector<double> abs(deltas.size());
  std::transform(deltas.begin(), deltas.end(), abs.begin(), [](double v) { return std::abs(v); });
  return quantile(0.5, abs) / kNormalQuartile;
}

double p_value(double eps_hat, double tolerance, double s_star, FlagDirection direction) {
  auto greater = [&] {
    if (s_star > 0.0) return 1.0 - normal_cdf((eps_hat - tolerance) / s_star);
    return eps_hat <= tolerance ? 1.0 : 0.0;
  };
  auto less = [&] {
    if (s_star > 0.0) return normal_cdf((eps_hat + tolerance) / s_star);
    return eps_hat >= -tolerance ? 1.0 : 0.0;
  };
  switch (direction) {
    case FlagDirection::kGreater: return greater();
    case FlagDirection::kLess: return less();
    default: return std::min(greater(), less());
  }
}

std::vector<bool> benjamini_hochberg(std::span<const double> p, double alpha) {
  const std::size_t m = p.size();
  std::vector<bool> out(m, false);
  if (m == 0) return out;
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0)) throw InputError("p-values must lie in [0, 1]");
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::size_t k_star = 0;
  for (std::size_t k = 1; k <= m; ++k) {
    if (p[order[k - 1]] <= static_cast<double>(k) * alpha / static_cast<double>(m)) k_star = k;
  }
  if (k_star == 0) return out;
  const double cut = p[order[k_star - 1]];
  for (std::size_t i = 0; i < m; ++i) out[i] = p[i] <= cut;
  return out;
}

FlagReport flag_p_values(const AuditTrail& trail, const TargetSpec& target,
                         const GroupCollection& groups, double tolerance,
                         const BootstrapConfig& config, FlagDirection direction, Engine engine) {
  config.validate();
  if (!std::isfinite(tolerance)) throw InputError("tolerance must be finite");
  if (groups.records() != trail.size()) throw InputError("group collection does not match trail");
  const auto resolved = resolve_target(trail, target);
  const auto prepared = prepare_groups(groups);
  if (prepared.size() == 0) throw InputError("no non-empty groups to audit");
  const auto in = make_inputs(trail, resolved, prepared);
  const auto deltas = replicate_group_deltas(in, config, engine);

  FlagReport r;
  r.alpha = config.alpha;
  r.tolerance = tolerance;
  r.direction = direction;
  r.target_kind = target_kind_name(resolved.spec);
  r.theta_hat = resolved.theta;
  r.config = config;
  r.excluded_empty = prepared.excluded_empty;
  r.theta_fallbacks = deltas.theta_fallbacks;
  const bool proven = resolved.fixed() && direction != FlagDirection::kTwoSided &&
                      (pairwise_disjoint(prepared) || binary_loss(trail.loss()));
  r.fdr_guarantee = proven ? "asymptotic" : "heuristic";

  r.groups.resize(prepared.size());
  for (std::size_t g = 0; g < prepared.size(); ++g) {
    auto& gf = r.groups[g];
    gf.name = prepared.names[g];
    gf.count = prepared.members[g].count();
    gf.p_n = prepared.p_n[g];
    gf.eps_hat = in.eps_hat[g];
    gf.missing_replicates = deltas.missing[g];
    gf.s_star = mad_scale(deltas.values[g]);
    gf.degenerate = !(gf.s_star > 0.0);
    gf.p_value = p_value(gf.eps_hat, tolerance, gf.s_star, direction);
    r.missing_replicates += gf.missing_replicates;
  }
  apply_bh(r);
  return r;
}

RecipeReport equalized_odds_flag(const AuditTrail& trail, const GroupCollection& groups,
                                 const std::string& outcome_column, double tolerance,
                                 const BootstrapConfig& config) {
  const auto& y = trail.covariate(outcome_column);
  if (y.kind != CovariateKind::kCategorical || y.levels.size() != 2) {
    throw InputError("outcome column '" + outcome_column + "' must be binary");
  }
  // Stratum order follows the level names when they are 0/1, else the codes.
  std::int32_t code_of[2] = {0, 1};
  if (y.levels[0] == "1" && y.levels[1] == "0") std::swap(code_of[0], code_of[1]);

  const std::size_t n = trail.size();
  const auto base = listed(groups);
  RecipeReport out;
  out.recipe = "equalized-odds";
  std::vector<std::size_t> base_of;

  for (int s = 0; s < 2; ++s) {
    std::vector<std::uint32_t> idx;
    for (std::size_t i = 0; i < n; ++i) {
      if (y.codes[i] == code_of[s]) idx.push_back(static_cast<std::uint32_t>(i));
    }
    Membership stratum(n, std::move(idx));
    if (stratum.empty()) throw InputError("outcome stratum '" + y.levels[code_of[s]] + "' is empty");
    std::vector<NamedGroup> cut;
    std::vector<std::size_t> cut_base;
    for (std::size_t g = 0; g < base.size(); ++g) {
      auto m = base[g].members.intersect(stratum);
      if (m.empty()) continue;
      cut.push_back({base[g].name + "|" + outcome_column + "=" + y.levels[code_of[s]], std::move(m)});
      cut_base.push_back(g);
    }
    if (cut.empty()) continue;
    auto stratum_config = config;
    stratum_config.seed = config.seed + static_cast<std::uint64_t>(s);
    auto r = flag_p_values(trail, ReferenceMeanTarget{stratum}, make_explicit(n, std::move(cut)),
                           tolerance, stratum_config, FlagDirection::kTwoSided);
    if (out.tests.groups.empty()) {
      out.tests = r;
      out.tests.groups.clear();
      out.tests.missing_replicates = 0;
      out.tests.theta_fallbacks = 0;
      out.tests.excluded_empty = 0;
    }
    out.tests.groups.insert(out.tests.groups.end(), r.groups.begin(), r.groups.end());
    out.tests.missing_replicates += r.missing_replicates;
    out.tests.theta_fallbacks += r.theta_fallbacks;
    out.tests.excluded_empty += base.size() - r.groups.size();
    base_of.insert(base_of.end(), cut_base.begin(), cut_base.end());
  }
  if (out.tests.groups.empty()) throw InputError("no group intersects either outcome stratum");
  out.tests.target_kind = "reference-mean (per stratum)";
  out.tests.config = config;
  apply_bh(out.tests);

  out.flags.resize(base.size());
  for (std::size_t g = 0; g < base.size(); ++g) out.flags[g].group = base[g].name;
  for (std::size_t t = 0; t < out.tests.groups.size(); ++t) {
    if (!out.tests.groups[t].flagged) continue;
    auto& f = out.flags[base_of[t]];
    f.flagged = true;
    f.triggered_by.push_back(out.tests.groups[t].name);
  }
  return out;
}

RecipeReport multicalibration_flag(const AuditTrail& trail, const GroupCollection& base,
                                   const std::string& prediction_bins, double gamma,
                                   double tolerance, const BootstrapConfig& config) {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw InputError("gamma must be finite and >= 0");
  const std::size_t n = trail.size();
  const GroupCollection explicit_base = base.is_grid() ? make_explicit(n, listed(base)) : base;
  const auto expanded = multicalibration_expand(trail, explicit_base, prediction_bins);

  RecipeReport out;
  out.recipe = "multicalibration";
  out.tests = flag_p_values(trail, FixedTarget{0.0}, expanded.groups, gamma + tolerance, config,
                            FlagDirection::kTwoSided);

  out.flags.resize(expanded.base_names.size());
  for (std::size_t g = 0; g < expanded.base_names.size(); ++g) out.flags[g].group = expanded.base_names[g];
  for (std::size_t t = 0; t < out.tests.groups.size(); ++t) {
    if (!out.tests.groups[t].flagged) continue;
    auto& f = out.flags[expanded.base_index[t]];
    f.flagged = true;
    f.triggered_by.push_back(out.tests.groups[t].name);
  }
  return out;
}

}  // namespace groupaudit
