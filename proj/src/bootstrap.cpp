#include "groupaudit/bootstrap.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>

#include "groupaudit/error.hpp"
#include "groupaudit/max_subarray.hpp"

namespace groupaudit {

namespace {

using i128 = __int128;

std::vector<std::vector<std::uint8_t>> group_masks(const PreparedGroups& g) {
  std::vector<std::vector<std::uint8_t>> out;
  out.reserve(g.size());
  for (const auto& m : g.members) out.push_back(m.mask());
  return out;
}

double apply_tail(double c, Tail tail) {
  switch (tail) {
    case Tail::kUpper: return c;
    case Tail::kLower: return -c;
    default: return std::abs(c);
  }
}

// Literal evaluation: membership scan, division only when the group was hit.
double literal_statistic(const ProcessInputs& in, const ProcessSpec& spec,
                         const std::vector<std::vector<std::uint8_t>>& masks,
                         std::span<const std::uint32_t> w, double theta_star) {
  const auto& groups = *in.groups;
  const double n = static_cast<double>(groups.n);
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t g = 0; g < groups.size(); ++g) {
    double wg = 0.0, sg = 0.0;
    for (std::size_t i = 0; i < groups.n; ++i) {
      if (!masks[g][i]) continue;
      wg += w[i];
      sg += w[i] * in.loss[i];
    }
    const double p_star = wg / n;
    const double p_n = groups.p_n[g];
    const double eps_hat = in.eps_hat[g];
    double c;
    if (spec.kind == StatisticKind::kBound) {
      c = 0.0;
      if (wg > 0.0) {
        const double eps_star = sg / wg - theta_star;
        c = p_n * p_star * (eps_star - eps_hat);
      }
    } else {
      double hit = 0.0;
      if (wg > 0.0) {
        const double eps_star = sg / wg - theta_star;
        hit = p_star * (eps_star - spec.tolerance);
      }
      c = hit - p_n * (eps_hat - spec.tolerance);
    }
    if (!spec.inv_scale.empty()) c *= spec.inv_scale[g];
    best = std::max(best, apply_tail(c, spec.tail));
  }
  return best;
}

// Per-replicate scratch for the parallel kernel.
struct Scratch {
  std::vector<std::uint32_t> w;
  std::vector<double> a;
  std::vector<i128> q;
  std::vector<i128> cell_q;
  std::vector<i128> run_q;
  std::vector<double> cell_w;
  std::vector<double> cell_s;
};

// Max over groups of sums of the per-record terms a_i, accumulated in 128-bit
// fixed point so that any summation order gives the same integer.
double fixed_point_max(const ProcessInputs& in, const ProcessSpec& spec, Scratch& s) {
  const auto& groups = *in.groups;
  const std::size_t n = groups.n;
  double amax = 0.0;
  for (std::size_t i = 0; i < n; ++i) amax = std::max(amax, std::abs(s.a[i]));
  if (amax == 0.0) return 0.0;
  // |q_i| <= 2^94 and n < 2^32 keep every partial sum below 2^126.
  const int shift = 93 - std::ilogb(amax);
  s.q.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.q[i] = static_cast<i128>(std::nearbyint(std::ldexp(s.a[i], shift)));
  }
  auto to_double = [shift](i128 v) { return std::ldexp(static_cast<double>(v), -shift); };

  bool have = false;
  i128 hi = 0, lo = 0;
  auto visit = [&](i128 v) {
    if (!have) {
      hi = lo = v;
      have = true;
    } else {
      hi = std::max(hi, v);
      lo = std::min(lo, v);
    }
  };

  if (groups.grid) {
    s.cell_q.assign(groups.cells, 0);
    for (std::size_t i = 0; i < n; ++i) s.cell_q[static_cast<std::size_t>(groups.cell[i])] += s.q[i];
    if (spec.fast_path) {
      // Intervals that hold records are exactly the runs of non-empty cells.
      s.run_q.clear();
      std::vector<std::uint8_t> occupied(groups.cells, 0);
      for (std::size_t i = 0; i < n; ++i) occupied[static_cast<std::size_t>(groups.cell[i])] = 1;
      for (std::size_t c = 0; c < groups.cells; ++c) {
        if (occupied[c]) s.run_q.push_back(s.cell_q[c]);
      }
      hi = max_subarray<i128>(s.run_q).value;
      for (auto& v : s.run_q) v = -v;
      lo = -max_subarray<i128>(s.run_q).value;
      have = true;
    } else {
      for (std::size_t j = 0; j < groups.cells; ++j) {
        i128 acc = 0;
        for (std::size_t k = j + 1; k <= groups.cells; ++k) {
          acc += s.cell_q[k - 1];
          const auto g = groups.slot[j * groups.cells + (k - 1)];
          if (g >= 0) visit(acc);
        }
      }
    }
  } else {
    for (std::size_t g = 0; g < groups.size(); ++g) {
      i128 acc = 0;
      for (auto i : groups.members[g].indices()) acc += s.q[i];
      visit(acc);
    }
  }
  switch (spec.tail) {
    case Tail::kUpper: return to_double(hi);
    case Tail::kLower: return to_double(-lo);
    default: return to_double(std::max(hi, -lo));
  }
}

// Per-group weighted count and loss sum for one replicate, handed to `fn`.
template <typename Fn>
void group_sums(const ProcessInputs& in, Scratch& s, Fn&& fn) {
  const auto& groups = *in.groups;
  if (groups.grid) {
    s.cell_w.assign(groups.cells, 0.0);
    s.cell_s.assign(groups.cells, 0.0);
    for (std::size_t i = 0; i < groups.n; ++i) {
      const auto c = static_cast<std::size_t>(groups.cell[i]);
      s.cell_w[c] += s.w[i];
      s.cell_s[c] += s.w[i] * in.loss[i];
    }
    for (std::size_t j = 0; j < groups.cells; ++j) {
      double wg = 0.0, sg = 0.0;
      for (std::size_t k = j + 1; k <= groups.cells; ++k) {
        wg += s.cell_w[k - 1];
        sg += s.cell_s[k - 1];
        const auto g = groups.slot[j * groups.cells + (k - 1)];
        if (g >= 0) fn(static_cast<std::size_t>(g), wg, sg);
      }
    }
    return;
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    double wg = 0.0, sg = 0.0;
    for (auto i : groups.members[g].indices()) {
      wg += s.w[i];
      sg += s.w[i] * in.loss[i];
    }
    fn(g, wg, sg);
  }
}

double fast_statistic(const ProcessInputs& in, const ProcessSpec& spec, Scratch& s,
                      double theta_star) {
  const auto& groups = *in.groups;
  const double n = static_cast<double>(groups.n);
  const double theta_hat = in.target->theta;

  if (spec.kind == StatisticKind::kBoolean && spec.inv_scale.empty()) {
    s.a.resize(groups.n);
    const double eps = spec.tolerance;
    for (std::size_t i = 0; i < groups.n; ++i) {
      const double l = in.loss[i];
      s.a[i] = (s.w[i] * (l - theta_star - eps) - (l - theta_hat - eps)) / n;
    }
    return fixed_point_max(in, spec, s);
  }

  double best = -std::numeric_limits<double>::infinity();
  group_sums(in, s, [&](std::size_t g, double wg, double sg) {
    const double p_star = wg / n;
    const double p_n = groups.p_n[g];
    double c;
    if (spec.kind == StatisticKind::kBound) {
      c = p_n * (sg / n - p_star * theta_star - p_star * in.eps_hat[g]);
    } else {
      const double eps = spec.tolerance;
      c = sg / n - p_star * (theta_star + eps) - p_n * (in.eps_hat[g] - eps);
    }
    if (!spec.inv_scale.empty()) c *= spec.inv_scale[g];
    best = std::max(best, apply_tail(c, spec.tail));
  });
  return best;
}

void check_inputs(const ProcessInputs& in) {
  if (!in.target || !in.groups) throw InputError("process inputs are incomplete");
  if (in.groups->size() == 0) throw InputError("no non-empty groups to audit");
  if (in.loss.size() != in.groups->n) throw InputError("group collection does not match trail");
}

void check_spec(const ProcessInputs& in, const ProcessSpec& spec) {
  if (!spec.inv_scale.empty() && spec.inv_scale.size() != in.groups->size()) {
    throw InputError("scale vector length does not match group count");
  }
  if (spec.fast_path &&
      (!in.groups->grid || spec.kind != StatisticKind::kBoolean || !spec.inv_scale.empty())) {
    throw InputError("the max-subarray path needs an unscaled Boolean statistic over an interval grid");
  }
}

}  // namespace

void BootstrapConfig::validate() const {
  if (replicates < 1) throw InputError("number of replicates must be at least 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw InputError("alpha must lie in (0, 1)");
  if (!(p_star > 0.0)) throw InputError("p_star must be positive");
  if (!(w0 > 0.0)) throw InputError("w0 must be positive or infinite");
}

double quantile(double level, std::span<const double> samples) {
  if (samples.empty()) throw InputError("quantile of an empty sample");
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const double b = static_cast<double>(sorted.size());
  // Guard against level*B landing a hair above an integer, e.g. 0.9 * 10.
  auto k = static_cast<std::ptrdiff_t>(std::ceil(level * b - 1e-9));
  k = std::clamp<std::ptrdiff_t>(k, 1, static_cast<std::ptrdiff_t>(sorted.size()));
  return sorted[static_cast<std::size_t>(k - 1)];
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t replicate_seed(std::uint64_t seed, std::uint64_t b) {
  return splitmix64(splitmix64(seed) ^ splitmix64(b + 0x632BE59BD9B4E019ULL));
}

std::uint64_t bounded_draw(std::mt19937_64& gen, std::uint64_t range) {
  using u128 = unsigned __int128;
  u128 m = static_cast<u128>(gen()) * range;
  auto low = static_cast<std::uint64_t>(m);
  if (low < range) {
    const std::uint64_t threshold = (0 - range) % range;
    while (low < threshold) {
      m = static_cast<u128>(gen()) * range;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

void resample_weights_into(std::uint64_t seed, std::uint64_t b, std::span<std::uint32_t> out) {
  std::fill(out.begin(), out.end(), 0u);
  std::mt19937_64 gen(replicate_seed(seed, b));
  const std::uint64_t n = out.size();
  for (std::uint64_t k = 0; k < n; ++k) ++out[bounded_draw(gen, n)];
}

std::vector<std::uint32_t> resample_weights(std::uint64_t seed, std::uint64_t b, std::size_t n) {
  if (n == 0) throw InputError("cannot resample an empty trail");
  std::vector<std::uint32_t> w(n);
  resample_weights_into(seed, b, w);
  return w;
}

PreparedGroups prepare_groups(const GroupCollection& collection) {
  PreparedGroups out;
  out.n = collection.records();
  out.excluded_empty = collection.dropped_empty();
  const double n = static_cast<double>(out.n);
  if (collection.is_grid()) {
    const auto& grid = collection.grid();
    out.grid = true;
    out.cells = grid.cells();
    out.cell = grid.cell;
    out.slot.assign(out.cells * out.cells, -1);
  }
  std::size_t idx = 0;
  collection.for_each([&](const std::string& name, const Membership& m) {
    const std::size_t pos = idx++;
    if (m.empty()) {
      ++out.excluded_empty;
      return;
    }
    if (out.grid) {
      const auto [j, k] = collection.grid().pair(pos);
      out.slot[j * out.cells + (k - 1)] = static_cast<std::int32_t>(out.names.size());
      out.cell_range.emplace_back(static_cast<std::uint32_t>(j), static_cast<std::uint32_t>(k));
    }
    out.names.push_back(name);
    out.p_n.push_back(static_cast<double>(m.count()) / n);
    out.members.push_back(m);
  });
  return out;
}

ProcessInputs make_inputs(const AuditTrail& trail, const ResolvedTarget& target,
                          const PreparedGroups& groups) {
  if (groups.n != trail.size()) throw InputError("group collection does not match trail");
  ProcessInputs in;
  in.loss = trail.loss();
  in.target = &target;
  in.groups = &groups;
  in.eps_hat.reserve(groups.size());
  for (const auto& m : groups.members) in.eps_hat.push_back(*empirical_disparity(trail, target.theta, m));
  return in;
}

double resampled_theta(const ResolvedTarget& target, std::span<const double> loss,
                       std::span<const std::uint32_t> w, bool* fallback) {
  if (fallback) *fallback = false;
  const auto n = static_cast<double>(loss.size());
  if (std::holds_alternative<FixedTarget>(target.spec)) return target.theta;
  if (std::holds_alternative<PooledMeanTarget>(target.spec)) {
    double s = 0.0;
    for (std::size_t i = 0; i < loss.size(); ++i) s += w[i] * loss[i];
    return s / n;
  }
  if (const auto* ref = std::get_if<ReferenceMeanTarget>(&target.spec)) {
    double wr = 0.0, sr = 0.0;
    for (auto i : ref->reference.indices()) {
      wr += w[i];
      sr += w[i] * loss[i];
    }
    if (wr == 0.0) {
      if (fallback) *fallback = true;
      return target.theta;
    }
    return sr / wr;
  }
  // Custom: first-order expansion around the supplied estimate.
  double s = 0.0;
  for (std::size_t i = 0; i < loss.size(); ++i) {
    s += (static_cast<double>(w[i]) - 1.0) * target.psi[i];
  }
  return target.theta + s / n;
}

double replicate_statistic(const ProcessInputs& in, const ProcessSpec& spec,
                           std::span<const std::uint32_t> w, bool* fallback) {
  check_inputs(in);
  check_spec(in, spec);
  const auto masks = group_masks(*in.groups);
  const double theta_star = resampled_theta(*in.target, in.loss, w, fallback);
  return literal_statistic(in, spec, masks, w, theta_star);
}

ReplicateMaxima replicate_maxima(const ProcessInputs& in, const ProcessSpec& spec,
                                 const BootstrapConfig& config, Engine engine) {
  config.validate();
  check_inputs(in);
  check_spec(in, spec);
  const std::size_t B = config.replicates;
  const std::size_t n = in.groups->n;
  ReplicateMaxima out;
  out.values.resize(B);

  if (engine == Engine::kSerial) {
    const auto masks = group_masks(*in.groups);
    for (std::size_t b = 0; b < B; ++b) {
      const auto w = resample_weights(config.seed, b, n);
      bool fb = false;
      const double theta_star = resampled_theta(*in.target, in.loss, w, &fb);
      out.theta_fallbacks += fb ? 1 : 0;
      out.values[b] = literal_statistic(in, spec, masks, w, theta_star);
    }
    return out;
  }

  std::size_t fallbacks = 0;
  const auto nb = static_cast<std::int64_t>(B);
#pragma omp parallel if (!omp_in_parallel()) reduction(+ : fallbacks)
  {
    Scratch s;
    s.w.resize(n);
#pragma omp for schedule(static)
    for (std::int64_t b = 0; b < nb; ++b) {
      resample_weights_into(config.seed, static_cast<std::uint64_t>(b), s.w);
      bool fb = false;
      const double theta_star = resampled_theta(*in.target, in.loss, s.w, &fb);
      fallbacks += fb ? 1 : 0;
      out.values[static_cast<std::size_t>(b)] = fast_statistic(in, spec, s, theta_star);
    }
  }
  out.theta_fallbacks = fallbacks;
  return out;
}

GroupDeltas replicate_group_deltas(const ProcessInputs& in, const BootstrapConfig& config,
                                   Engine engine) {
  config.validate();
  check_inputs(in);
  const std::size_t B = config.replicates;
  const std::size_t G = in.groups->size();
  const std::size_t n = in.groups->n;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  // Group-major so each group's replicates end up contiguous.
  std::vector<double> table(G * B, nan);
  std::vector<std::uint8_t> fell_back(B, 0);

  if (engine == Engine::kSerial) {
    const auto masks = group_masks(*in.groups);
    for (std::size_t b = 0; b < B; ++b) {
      const auto w = resample_weights(config.seed, b, n);
      bool fb = false;
      const double theta_star = resampled_theta(*in.target, in.loss, w, &fb);
      fell_back[b] = fb;
      for (std::size_t g = 0; g < G; ++g) {
        double wg = 0.0, sg = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (!masks[g][i]) continue;
          wg += w[i];
          sg += w[i] * in.loss[i];
        }
        if (wg > 0.0) table[g * B + b] = (sg / wg - theta_star) - in.eps_hat[g];
      }
    }
  } else {
    const auto nb = static_cast<std::int64_t>(B);
#pragma omp parallel if (!omp_in_parallel())
    {
      Scratch s;
      s.w.resize(n);
#pragma omp for schedule(static)
      for (std::int64_t bi = 0; bi < nb; ++bi) {
        const auto b = static_cast<std::size_t>(bi);
        resample_weights_into(config.seed, b, s.w);
        bool fb = false;
        const double theta_star = resampled_theta(*in.target, in.loss, s.w, &fb);
        fell_back[b] = fb;
        group_sums(in, s, [&](std::size_t g, double wg, double sg) {
          if (wg > 0.0) table[g * B + b] = (sg / wg - theta_star) - in.eps_hat[g];
        });
      }
    }
  }

  GroupDeltas out;
  out.values.resize(G);
  out.missing.assign(G, 0);
  for (std::size_t g = 0; g < G; ++g) {
    out.values[g].reserve(B);
    for (std::size_t b = 0; b < B; ++b) {
      const double v = table[g * B + b];
      if (std::isnan(v)) {
        ++out.missing[g];
      } else {
        out.values[g].push_back(v);
      }
    }
  }
  for (auto f : fell_back) out.theta_fallbacks += f;
  return out;
}

}  // namespace groupaudit
