#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "groupaudit/synth.hpp"

namespace groupaudit {

enum class Experiment { kFwer, kCoverage, kFdr, kRkhsPercentile };

std::string experiment_name(Experiment e);
Experiment parse_experiment(const std::string& name);

struct ExperimentSpec {
  Experiment experiment = Experiment::kFwer;
  SynthModel model = SynthModel::kHeteroskedastic;
  std::size_t trials = 200;
  std::vector<std::size_t> n_grid{1600};
  double alpha = 0.1;
  double epsilon = 0.5;
  double p_star = 0.01;
  double w0 = std::numeric_limits<double>::infinity();
  bool rescaled = false;
  std::size_t replicates = 500;
  std::uint64_t seed = 0;
  std::size_t train_n = 1000;
  std::vector<double> endpoints;           // empty: {0, 0.1, ..., 1}
  std::vector<double> bandwidths{0.1, 0.5, 1.0};
  // FDR design: disjoint groups of equal size, L ~ N(epsilon + effect, 1)
  // on the first `nonnull_groups` and N(epsilon, 1) elsewhere. With effect <= 0
  // the shifted groups are nulls with margin.
  std::size_t groups = 8;
  std::size_t nonnull_groups = 0;
  double effect = 0.5;

  void validate() const;
  // Sets trials to 50.
  void make_fast();
};

struct ExperimentRow {
  std::size_t n = 0;
  double bandwidth = std::numeric_limits<double>::quiet_NaN();
  std::size_t trials = 0;
  std::string metric;  // fwer, coverage, fdr, percentile
  double rate = 0.0;
  double rate_se = 0.0;
  // Mean over the trials where power is defined; NaN when none is.
  double power = std::numeric_limits<double>::quiet_NaN();
  double power_se = std::numeric_limits<double>::quiet_NaN();
  std::size_t power_trials = 0;
};

struct ExperimentTable {
  ExperimentSpec spec;
  std::vector<ExperimentRow> rows;

  std::string to_text() const;
};

std::uint64_t trial_seed(std::uint64_t master, std::uint64_t trial);

ExperimentTable run_fwer(const ExperimentSpec& spec);
ExperimentTable run_coverage(const ExperimentSpec& spec);
ExperimentTable run_fdr(const ExperimentSpec& spec);
ExperimentTable run_rkhs_percentile(const ExperimentSpec& spec);
ExperimentTable run_experiment(const ExperimentSpec& spec);

}  // namespace groupaudit
