#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "groupaudit/audit_trail.hpp"
#include "groupaudit/groups.hpp"

namespace groupaudit {

struct BootstrapConfig {
  std::size_t replicates = 500;
  std::uint64_t seed = 0;
  double alpha = 0.1;
  double p_star = 0.01;
  double w0 = std::numeric_limits<double>::infinity();

  // Throws InputError on B = 0, alpha outside (0,1), p_star <= 0 or w0 <= 0.
  void validate() const;
};

// Kernels come in two flavours: the OpenMP one used in production and a
// single-threaded transcription of the defining formulas kept for testing.
enum class Engine { kParallel, kSerial };

// s_(k) of the ascending order statistics with k = ceil(level * B), so the
// result is inf{x : level <= F_B(x)}. Throws InputError on empty input.
double quantile(double level, std::span<const double> samples);

std::uint64_t splitmix64(std::uint64_t x);
// Seed of the independent stream used for replicate b.
std::uint64_t replicate_seed(std::uint64_t seed, std::uint64_t b);

// Unbiased integer in [0, range) by multiply-and-reject.
std::uint64_t bounded_draw(std::mt19937_64& gen, std::uint64_t range);

// Multinomial(n; 1/n, ..., 1/n) counts, determined by (seed, b, n) alone.
std::vector<std::uint32_t> resample_weights(std::uint64_t seed, std::uint64_t b, std::size_t n);
void resample_weights_into(std::uint64_t seed, std::uint64_t b, std::span<std::uint32_t> out);

// Non-empty groups of a collection, laid out for the replicate kernels.
struct PreparedGroups {
  std::size_t n = 0;
  std::vector<std::string> names;
  std::vector<Membership> members;
  std::vector<double> p_n;
  std::size_t excluded_empty = 0;

  // Interval grids only.
  bool grid = false;
  std::size_t cells = 0;
  std::vector<std::int32_t> cell;  // per record
  std::vector<std::pair<std::uint32_t, std::uint32_t>> cell_range;  // per group, [j, k)
  std::vector<std::int32_t> slot;  // j * cells + (k - 1) -> group index or -1

  std::size_t size() const { return names.size(); }
};

PreparedGroups prepare_groups(const GroupCollection& collection);

// Everything the kernels read; all of it stays immutable during a run.
struct ProcessInputs {
  std::span<const double> loss;
  const ResolvedTarget* target = nullptr;
  const PreparedGroups* groups = nullptr;
  std::vector<double> eps_hat;  // per group
};

ProcessInputs make_inputs(const AuditTrail& trail, const ResolvedTarget& target,
                          const PreparedGroups& groups);

enum class StatisticKind {
  kBound,    // P_n(G) * P*(G) * (eps*(G) - eps_hat(G))
  kBoolean,  // P*(G) * (eps*(G) - eps) - P_n(G) * (eps_hat(G) - eps)
};

// Which side of the per-group process enters the max over groups.
enum class Tail { kUpper, kLower, kAbsolute };

struct ProcessSpec {
  StatisticKind kind = StatisticKind::kBound;
  Tail tail = Tail::kUpper;
  double tolerance = 0.0;         // kBoolean only
  std::vector<double> inv_scale;  // per group 1/s_hat(G); empty means unscaled
  // Unscaled kBoolean over a grid: maximum subarray over cells instead of
  // visiting every interval. Same result, bit for bit.
  bool fast_path = false;
};

struct ReplicateMaxima {
  std::vector<double> values;      // one per replicate, in replicate order
  std::size_t theta_fallbacks = 0; // resamples with an empty reference group
};

ReplicateMaxima replicate_maxima(const ProcessInputs& in, const ProcessSpec& spec,
                                 const BootstrapConfig& config, Engine engine = Engine::kParallel);

// Max over groups of the process for one weight vector, from the literal
// formulas. `fallback` is set when the reference group missed the resample.
double replicate_statistic(const ProcessInputs& in, const ProcessSpec& spec,
                           std::span<const std::uint32_t> w, bool* fallback = nullptr);

// Re-estimated target on a resample.
double resampled_theta(const ResolvedTarget& target, std::span<const double> loss,
                       std::span<const std::uint32_t> w, bool* fallback = nullptr);

struct GroupDeltas {
  // Per group, eps*_b(G) - eps_hat(G) over the replicates where G was hit.
  std::vector<std::vector<double>> values;
  std::vector<std::size_t> missing;  // per group, replicates that missed G
  std::size_t theta_fallbacks = 0;
};

GroupDeltas replicate_group_deltas(const ProcessInputs& in, const BootstrapConfig& config,
                                   Engine engine = Engine::kParallel);

}  // namespace groupaudit
