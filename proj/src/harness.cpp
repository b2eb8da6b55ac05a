#include "groupaudit/harness.hpp"

#include <omp.h>

#include <cmath>
#include <exception>
#include <functional>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

#include "groupaudit/bootstrap.hpp"
#include "groupaudit/certify.hpp"
#include "groupaudit/error.hpp"
#include "groupaudit/flag.hpp"
#include "groupaudit/groups.hpp"
#include "groupaudit/rkhs.hpp"

namespace groupaudit {

namespace {

struct TrialOutcome {
  bool event = false;
  bool power_defined = false;
  double power = 0.0;
};

std::vector<double> grid_endpoints(const ExperimentSpec& spec) {
  if (!spec.endpoints.empty()) return spec.endpoints;
  std::vector<double> e(11);
  for (int k = 0; k <= 10; ++k) e[static_cast<std::size_t>(k)] = k / 10.0;
  return e;
}

// Runs trials in parallel; each trial sees only its own index.
std::vector<TrialOutcome> run_trials(std::size_t trials,
                                     const std::function<TrialOutcome(std::size_t)>& fn) {
  std::vector<TrialOutcome> out(trials);
  std::exception_ptr error;
  const auto nt = static_cast<std::int64_t>(trials);
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t t = 0; t < nt; ++t) {
    try {
      out[static_cast<std::size_t>(t)] = fn(static_cast<std::size_t>(t));
    } catch (...) {
#pragma omp critical(groupaudit_harness_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return out;
}

ExperimentRow summarize(const std::vector<TrialOutcome>& outcomes, std::size_t n, std::string metric) {
  ExperimentRow row;
  row.n = n;
  row.trials = outcomes.size();
  row.metric = std::move(metric);
  double events = 0.0, psum = 0.0, psq = 0.0;
  for (const auto& o : outcomes) {
    events += o.event ? 1.0 : 0.0;
    if (o.power_defined) {
      ++row.power_trials;
      psum += o.power;
      psq += o.power * o.power;
    }
  }
  const double t = static_cast<double>(outcomes.size());
  row.rate = events / t;
  row.rate_se = std::sqrt(row.rate * (1.0 - row.rate) / t);
  if (row.power_trials > 0) {
    const double k = static_cast<double>(row.power_trials);
    row.power = psum / k;
    const double var = k > 1.0 ? std::max(psq - k * row.power * row.power, 0.0) / (k - 1.0) : 0.0;
    row.power_se = std::sqrt(var / k);
  }
  return row;
}

BootstrapConfig trial_config(const ExperimentSpec& spec, std::uint64_t seed) {
  BootstrapConfig c;
  c.replicates = spec.replicates;
  c.seed = splitmix64(seed);
  c.alpha = spec.alpha;
  c.p_star = spec.p_star;
  c.w0 = spec.w0;
  return c;
}

SyntheticData trial_data(const ExperimentSpec& spec, std::size_t n, std::uint64_t seed) {
  SyntheticSpec s;
  s.model = spec.model;
  s.train_n = spec.train_n;
  s.audit_n = n;
  s.seed = seed;
  return generate(s);
}

void require_continuous(const ExperimentSpec& spec) {
  if (spec.model == SynthModel::kDiscrete) {
    throw InputError("this experiment needs the homoskedastic or heteroskedastic model");
  }
}

}  // namespace

std::string experiment_name(Experiment e) {
  switch (e) {
    case Experiment::kFwer: return "fwer";
    case Experiment::kCoverage: return "coverage";
    case Experiment::kFdr: return "fdr";
    default: return "rkhs-percentile";
  }
}

Experiment parse_experiment(const std::string& name) {
  if (name == "fwer") return Experiment::kFwer;
  if (name == "coverage") return Experiment::kCoverage;
  if (name == "fdr") return Experiment::kFdr;
  if (name == "rkhs-percentile" || name == "rkhs") return Experiment::kRkhsPercentile;
  throw InputError("unknown experiment '" + name + "' (expected fwer, coverage, fdr or rkhs-percentile)");
}

void ExperimentSpec::validate() const {
  if (trials < 1) throw InputError("trials must be at least 1");
  if (n_grid.empty()) throw InputError("sample-size grid is empty");
  for (auto n : n_grid) {
    if (n < 2) throw InputError("sample sizes must be at least 2");
  }
  if (!(alpha > 0.0 && alpha < 1.0)) throw InputError("alpha must lie in (0, 1)");
  if (replicates < 1) throw InputError("number of replicates must be at least 1");
  if (experiment == Experiment::kFdr && (groups < 1 || nonnull_groups > groups)) {
    throw InputError("FDR design needs at least one group and nonnull_groups <= groups");
  }
  if (experiment == Experiment::kRkhsPercentile && bandwidths.empty()) {
    throw InputError("RKHS experiment needs at least one bandwidth");
  }
}

void ExperimentSpec::make_fast() { trials = 50; }

std::uint64_t trial_seed(std::uint64_t master, std::uint64_t trial) {
  return replicate_seed(master ^ 0xD1B54A32D192ED03ULL, trial);
}

ExperimentTable run_fwer(const ExperimentSpec& spec) {
  spec.validate();
  require_continuous(spec);
  const auto endpoints = grid_endpoints(spec);
  ExperimentTable table{spec, {}};
  for (auto n : spec.n_grid) {
    auto outcomes = run_trials(spec.trials, [&](std::size_t t) {
      TrialOutcome o;
      const auto seed = trial_seed(spec.seed ^ n, t);
      const auto data = trial_data(spec, n, seed);
      const auto groups = interval_grid(data.trail, "x", endpoints);
      const auto& grid = groups.grid();

      std::map<std::pair<std::size_t, std::size_t>, bool> certified;
      if (std::isfinite(spec.epsilon)) {
        CertifyOptions opt;
        opt.rescaled = spec.rescaled;
        const auto r = boolean_certify(data.trail, FixedTarget{0.0}, groups, spec.epsilon,
                                       trial_config(spec, seed), Direction::kBelow, opt);
        for (const auto& g : r.groups) certified[*g.endpoints] = *g.certified;
      }
      std::size_t good = 0, hit = 0;
      for (std::size_t idx = 0; idx < grid.intervals(); ++idx) {
        const auto jk = grid.pair(idx);
        const double truth = true_interval_disparity(spec.model, data.beta0, data.beta_hat,
                                                     endpoints[jk.first], endpoints[jk.second]);
        const auto it = certified.find(jk);
        const bool cert = it != certified.end() && it->second;
        if (truth >= spec.epsilon) {
          if (cert) o.event = true;
        } else {
          ++good;
          if (cert) ++hit;
        }
      }
      if (good > 0) {
        o.power_defined = true;
        o.power = static_cast<double>(hit) / static_cast<double>(good);
      }
      return o;
    });
    table.rows.push_back(summarize(outcomes, n, "fwer"));
  }
  return table;
}

ExperimentTable run_coverage(const ExperimentSpec& spec) {
  spec.validate();
  require_continuous(spec);
  const auto endpoints = grid_endpoints(spec);
  ExperimentTable table{spec, {}};
  for (auto n : spec.n_grid) {
    auto outcomes = run_trials(spec.trials, [&](std::size_t t) {
      TrialOutcome o;
      const auto seed = trial_seed(spec.seed ^ n, t);
      const auto data = trial_data(spec, n, seed);
      const auto groups = interval_grid(data.trail, "x", endpoints);
      const auto& grid = groups.grid();
      CertifyOptions opt;
      opt.rescaled = spec.rescaled;
      const auto r = upper_bounds(data.trail, FixedTarget{0.0}, groups, trial_config(spec, seed), opt);
      std::map<std::pair<std::size_t, std::size_t>, double> upper;
      for (const auto& g : r.groups) upper[*g.endpoints] = *g.upper;

      bool covered = true;
      std::size_t good = 0, hit = 0;
      for (std::size_t idx = 0; idx < grid.intervals(); ++idx) {
        const auto jk = grid.pair(idx);
        const double truth = true_interval_disparity(spec.model, data.beta0, data.beta_hat,
                                                     endpoints[jk.first], endpoints[jk.second]);
        const auto it = upper.find(jk);
        if (it != upper.end() && it->second < truth) covered = false;
        if (truth < spec.epsilon) {
          ++good;
          if (it != upper.end() && it->second < spec.epsilon) ++hit;
        }
      }
      o.event = covered;
      if (good > 0) {
        o.power_defined = true;
        o.power = static_cast<double>(hit) / static_cast<double>(good);
      }
      return o;
    });
    table.rows.push_back(summarize(outcomes, n, "coverage"));
  }
  return table;
}

ExperimentTable run_fdr(const ExperimentSpec& spec) {
  spec.validate();
  ExperimentTable table{spec, {}};
  for (auto n : spec.n_grid) {
    if (n < spec.groups) throw InputError("FDR design needs at least one record per group");
    // A non-positive effect moves the shifted groups inside the null.
    const bool shifted_nonnull = spec.effect > 0.0;
    std::vector<double> fdp(spec.trials);
    auto outcomes = run_trials(spec.trials, [&](std::size_t t) {
      TrialOutcome o;
      const auto seed = trial_seed(spec.seed ^ n, t);
      std::mt19937_64 gen(splitmix64(seed ^ 0x5DEECE66DULL));
      std::normal_distribution<double> normal(0.0, 1.0);
      std::vector<double> loss(n);
      std::vector<std::int32_t> label(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto g = static_cast<std::int32_t>(i % spec.groups);
        label[i] = g;
        const double shift = static_cast<std::size_t>(g) < spec.nonnull_groups ? spec.effect : 0.0;
        loss[i] = spec.epsilon + shift + normal(gen);
      }
      AuditTrail trail(std::move(loss), {Covariate::categorical("group", std::move(label))});
      const auto groups = groups_from_labels(trail, "group");
      const auto r = flag_p_values(trail, FixedTarget{0.0}, groups, spec.epsilon,
                                   trial_config(spec, seed), FlagDirection::kGreater);
      std::size_t rejected = 0, false_rej = 0, true_rej = 0;
      for (std::size_t g = 0; g < r.groups.size(); ++g) {
        if (!r.groups[g].flagged) continue;
        ++rejected;
        if (shifted_nonnull && std::stoul(r.groups[g].name) < spec.nonnull_groups) {
          ++true_rej;
        } else {
          ++false_rej;
        }
      }
      fdp[t] = static_cast<double>(false_rej) / static_cast<double>(std::max<std::size_t>(rejected, 1));
      o.event = false_rej > 0;
      if (shifted_nonnull && spec.nonnull_groups > 0) {
        o.power_defined = true;
        o.power = static_cast<double>(true_rej) / static_cast<double>(spec.nonnull_groups);
      }
      return o;
    });
    auto row = summarize(outcomes, n, "fdr");
    double mean = 0.0, sq = 0.0;
    for (double v : fdp) {
      mean += v;
      sq += v * v;
    }
    const double k = static_cast<double>(fdp.size());
    mean /= k;
    row.rate = mean;
    row.rate_se = k > 1.0 ? std::sqrt(std::max(sq - k * mean * mean, 0.0) / (k - 1.0) / k) : 0.0;
    table.rows.push_back(row);
  }
  return table;
}

ExperimentTable run_rkhs_percentile(const ExperimentSpec& spec) {
  spec.validate();
  const auto atoms_x = discrete_atoms();
  Eigen::MatrixXd atoms(static_cast<Eigen::Index>(atoms_x.size()), 1);
  for (std::size_t a = 0; a < atoms_x.size(); ++a) atoms(static_cast<Eigen::Index>(a), 0) = atoms_x[a];
  const std::vector<double> prob(atoms_x.size(), 1.0 / static_cast<double>(atoms_x.size()));

  ExperimentTable table{spec, {}};
  for (auto n : spec.n_grid) {
    // One outcome vector per bandwidth, all from the same data sets.
    std::vector<std::vector<TrialOutcome>> per_bw(spec.bandwidths.size(),
                                                  std::vector<TrialOutcome>(spec.trials));
    run_trials(spec.trials, [&](std::size_t t) {
      const auto seed = trial_seed(spec.seed ^ n, t);
      SyntheticSpec s;
      s.model = SynthModel::kDiscrete;
      s.train_n = spec.train_n;
      s.audit_n = n;
      s.seed = seed;
      const auto data = generate(s);
      std::vector<double> cond(atoms_x.size());
      for (std::size_t a = 0; a < atoms_x.size(); ++a) {
        cond[a] = conditional_mean_loss(SynthModel::kDiscrete, data.beta0, data.beta_hat, atoms_x[a]);
      }
      Eigen::MatrixXd sample(static_cast<Eigen::Index>(n), 1);
      for (std::size_t i = 0; i < n; ++i) sample(static_cast<Eigen::Index>(i), 0) = data.x[i];
      for (std::size_t k = 0; k < spec.bandwidths.size(); ++k) {
        KernelSpec kernel;
        kernel.family = KernelFamily::kGaussian;
        kernel.bandwidth = spec.bandwidths[k];
        kernel.columns = {"x"};
        const auto run = rkhs_critical_value(data.trail, FixedTarget{0.0}, kernel, trial_config(spec, seed));
        const double sup = population_sup_discrete(atoms, prob, cond, sample, data.trail.loss(), kernel, 0.0);
        per_bw[k][t].event = sup <= run.t_star;
      }
      return TrialOutcome{};
    });
    for (std::size_t k = 0; k < spec.bandwidths.size(); ++k) {
      auto row = summarize(per_bw[k], n, "percentile");
      row.bandwidth = spec.bandwidths[k];
      table.rows.push_back(row);
    }
  }
  return table;
}

ExperimentTable run_experiment(const ExperimentSpec& spec) {
  switch (spec.experiment) {
    case Experiment::kFwer: return run_fwer(spec);
    case Experiment::kCoverage: return run_coverage(spec);
    case Experiment::kFdr: return run_fdr(spec);
    default: return run_rkhs_percentile(spec);
  }
}

std::string ExperimentTable::to_text() const {
  std::ostringstream os;
  os << experiment_name(spec.experiment) << "  model=" << synth_model_name(spec.model)
     << "  alpha=" << spec.alpha << "  epsilon=" << spec.epsilon << "  B=" << spec.replicates
     << "  seed=" << spec.seed << (spec.rescaled ? "  rescaled" : "") << '\n';
  os << std::left << std::setw(8) << "n" << std::setw(10) << "sigma" << std::setw(8) << "trials"
     << std::setw(12) << "metric" << std::setw(10) << "rate" << std::setw(10) << "se"
     << std::setw(10) << "power" << std::setw(10) << "se" << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    os << std::setw(8) << r.n << std::setw(10);
    if (std::isnan(r.bandwidth)) {
      os << "-";
    } else {
      os << r.bandwidth;
    }
    os << std::setw(8) << r.trials << std::setw(12) << r.metric << std::setw(10) << r.rate
       << std::setw(10) << r.rate_se << std::setw(10);
    if (std::isnan(r.power)) {
      os << "-" << std::setw(10) << "-";
    } else {
      os << r.power << std::setw(10) << r.power_se;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace groupaudit
