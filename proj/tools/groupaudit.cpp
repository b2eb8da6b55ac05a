#include <omp.h>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "groupaudit/error.hpp"
#include "groupaudit/io.hpp"

namespace ga = groupaudit;

namespace {

struct Overrides {
  std::optional<std::string> input, loss, reference, psi, group_label, record_id;
  std::vector<std::string> categorical, numeric;
  std::optional<std::string> target, groups, grid_covariate;
  std::optional<double> theta;
  std::vector<std::string> group_columns;
  bool marginals = false;
  std::vector<double> endpoints;
  std::optional<double> alpha, epsilon, gamma, p_star;
  std::optional<std::string> w0;
  std::optional<std::size_t> replicates;
  std::optional<std::uint64_t> seed;
  bool rescaled = false;
  std::optional<std::string> direction, recipe, outcome, bins;
  std::optional<std::string> kernel_family;
  std::optional<double> bandwidth, quantile_divisor, norm_certificate;
  std::vector<std::string> kernel_columns;
  bool estimated_theta = false;
  std::optional<std::string> run_file, query;
  std::optional<std::string> output, curve_output, grid_output;
  // validate
  std::optional<std::string> experiment, model;
  std::optional<std::size_t> trials, groups_k, nonnull;
  std::vector<std::size_t> n_grid;
  std::vector<double> bandwidths;
  std::optional<double> effect;
  bool fast = false;
};

double parse_w0(const std::string& s) {
  if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw ga::InputError("w0 must be a number or inf, got '" + s + "'");
  }
}

void add_data_options(CLI::App* app, Overrides& o) {
  app->add_option("-i,--input", o.input, "Audit trail CSV");
  app->add_option("--loss", o.loss, "Loss column");
  app->add_option("--categorical", o.categorical, "Categorical covariate columns")->delimiter(',');
  app->add_option("--numeric", o.numeric, "Numeric covariate columns")->delimiter(',');
  app->add_option("--reference", o.reference, "0/1 reference-indicator column");
  app->add_option("--psi", o.psi, "Influence-value column of a custom target");
  app->add_option("--record-id", o.record_id, "Record id column");
  app->add_option("--target", o.target, "fixed | pooled-mean | reference-mean | custom");
  app->add_option("--theta", o.theta, "Fixed target value, or the estimate of a custom target");
  app->add_option("--seed", o.seed, "Bootstrap seed");
  app->add_option("-B,--replicates", o.replicates, "Bootstrap replicates");
  app->add_option("--alpha", o.alpha, "Error level");
  app->add_option("-o,--output", o.output, "Report file (JSON); stdout when absent");
}

void add_group_options(CLI::App* app, Overrides& o) {
  app->add_option("--group-label", o.group_label, "Column holding an explicit group label per record");
  app->add_option("--groups", o.groups, "labels | intersect | grid");
  app->add_option("--group-columns", o.group_columns, "Categorical columns to intersect")->delimiter(',');
  app->add_flag("--marginals", o.marginals, "Also include the marginal groups of an intersection");
  app->add_option("--grid-covariate", o.grid_covariate, "Numeric covariate of an interval grid");
  app->add_option("--endpoints", o.endpoints, "Sorted interval-grid endpoints")->delimiter(',');
  app->add_option("--p-star", o.p_star, "Scale floor p_*");
  app->add_option("--w0", o.w0, "Shrinkage weight w0 (number or inf)");
  app->add_flag("--rescaled", o.rescaled, "Use the shrinkage-rescaled statistic");
}

void add_kernel_options(CLI::App* app, Overrides& o) {
  app->add_option("--kernel", o.kernel_family, "gaussian | laplace");
  app->add_option("--bandwidth", o.bandwidth, "Kernel bandwidth");
  app->add_option("--kernel-columns", o.kernel_columns, "Numeric covariates the kernel acts on")
      ->delimiter(',');
  app->add_option("--run-file", o.run_file, "Cached critical value (written by bound, read by query)");
}

void set_role(ga::ColumnRoles& roles, const std::string& name, ga::ColumnRole role) {
  for (auto& r : roles) {
    if (r.first == name) {
      r.second = role;
      return;
    }
  }
  roles.emplace_back(name, role);
}

void apply(const Overrides& o, ga::RunConfig& c) {
  auto set = [](auto& dst, const auto& src) {
    if (src) dst = *src;
  };
  set(c.input, o.input);
  if (o.loss) {
    std::erase_if(c.roles, [](const auto& r) { return r.second == ga::ColumnRole::kLoss; });
    set_role(c.roles, *o.loss, ga::ColumnRole::kLoss);
  }
  for (const auto& n : o.categorical) set_role(c.roles, n, ga::ColumnRole::kCategorical);
  for (const auto& n : o.numeric) set_role(c.roles, n, ga::ColumnRole::kNumeric);
  if (o.reference) set_role(c.roles, *o.reference, ga::ColumnRole::kReference);
  if (o.psi) set_role(c.roles, *o.psi, ga::ColumnRole::kCustomPsi);
  if (o.group_label) set_role(c.roles, *o.group_label, ga::ColumnRole::kGroupLabel);
  if (o.record_id) set_role(c.roles, *o.record_id, ga::ColumnRole::kRecordId);
  set(c.target, o.target);
  set(c.theta, o.theta);
  set(c.groups, o.groups);
  if (!o.group_columns.empty()) c.group_columns = o.group_columns;
  if (o.marginals) c.include_marginals = true;
  set(c.grid_covariate, o.grid_covariate);
  if (!o.endpoints.empty()) c.endpoints = o.endpoints;
  set(c.alpha, o.alpha);
  set(c.epsilon, o.epsilon);
  set(c.gamma, o.gamma);
  set(c.p_star, o.p_star);
  if (o.w0) c.w0 = parse_w0(*o.w0);
  set(c.replicates, o.replicates);
  set(c.seed, o.seed);
  if (o.rescaled) c.rescaled = true;
  set(c.direction, o.direction);
  set(c.recipe, o.recipe);
  set(c.outcome_column, o.outcome);
  set(c.bins_column, o.bins);
  if (o.kernel_family) c.kernel.family = ga::parse_kernel_family(*o.kernel_family);
  set(c.kernel.bandwidth, o.bandwidth);
  if (!o.kernel_columns.empty()) c.kernel.columns = o.kernel_columns;
  if (o.estimated_theta) c.estimated_theta = true;
  set(c.quantile_divisor, o.quantile_divisor);
  if (o.norm_certificate) c.norm_certificate = o.norm_certificate;
  set(c.run_file, o.run_file);
  set(c.query, o.query);
  set(c.output, o.output);
  set(c.curve_output, o.curve_output);
  set(c.grid_output, o.grid_output);

  auto& e = c.experiment;
  if (o.experiment) e.experiment = ga::parse_experiment(*o.experiment);
  if (o.model) e.model = ga::parse_synth_model(*o.model);
  set(e.trials, o.trials);
  if (!o.n_grid.empty()) e.n_grid = o.n_grid;
  if (!o.bandwidths.empty()) e.bandwidths = o.bandwidths;
  set(e.groups, o.groups_k);
  set(e.nonnull_groups, o.nonnull);
  set(e.effect, o.effect);
  if (c.procedure == "validate") {
    set(e.alpha, o.alpha);
    set(e.epsilon, o.epsilon);
    set(e.p_star, o.p_star);
    if (o.w0) e.w0 = parse_w0(*o.w0);
    set(e.replicates, o.replicates);
    set(e.seed, o.seed);
    if (o.rescaled) e.rescaled = true;
  }
  if (o.fast) c.fast = true;
}

int worker_budget() {
  const char* env = std::getenv("GROUPAUDIT_THREADS");
  if (!env || !*env) return 0;
  try {
    const int n = std::stoi(env);
    if (n < 1) throw std::invalid_argument("non-positive");
    return n;
  } catch (const std::exception&) {
    throw ga::InputError(std::string("GROUPAUDIT_THREADS must be a positive integer, got '") + env + "'");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simultaneous subgroup performance audits"};
  app.require_subcommand(1);
  Overrides o;
  std::optional<std::string> config_path;
  app.add_option("-c,--config", config_path, "Run-config JSON; command-line flags override it");

  std::string side = "";
  auto* bounds = app.add_subcommand("bounds", "Simultaneous confidence bounds on every group");
  bounds->add_option("--side", side, "lower | upper | two-sided")
      ->check(CLI::IsMember({"lower", "upper", "two-sided"}));
  bounds->add_option("--curve-output", o.curve_output, "Width-vs-bound curve CSV (grid groups)");
  add_data_options(bounds, o);
  add_group_options(bounds, o);

  auto* certify = app.add_subcommand("certify", "Boolean certificates against a tolerance");
  certify->add_option("--direction", o.direction, "above | below | bioequivalence");
  certify->add_option("-e,--epsilon", o.epsilon, "Tolerance");
  certify->add_option("--curve-output", o.curve_output, "Width-vs-bound curve CSV (grid groups)");
  add_data_options(certify, o);
  add_group_options(certify, o);

  auto* flag = app.add_subcommand("flag", "Flag groups with false discovery rate control");
  flag->add_option("--direction", o.direction, "greater | less | two-sided");
  flag->add_option("-e,--epsilon", o.epsilon, "Tolerance");
  flag->add_option("--recipe", o.recipe, "plain | equalized-odds | multicalibration");
  flag->add_option("--outcome", o.outcome, "Binary outcome column (equalized-odds)");
  flag->add_option("--bins", o.bins, "Prediction-bin column (multicalibration)");
  flag->add_option("--gamma", o.gamma, "Calibration slack (multicalibration)");
  flag->add_option("--grid-output", o.grid_output, "Per-group CSV export");
  add_data_options(flag, o);
  add_group_options(flag, o);

  auto* rkhs = app.add_subcommand("rkhs", "Audit distribution shifts in a kernel unit ball");
  rkhs->require_subcommand(1);
  auto* rkhs_bound = rkhs->add_subcommand("bound", "Bootstrap the critical value and cache it");
  add_data_options(rkhs_bound, o);
  add_kernel_options(rkhs_bound, o);
  rkhs_bound->add_flag("--estimated-theta", o.estimated_theta, "Account for an estimated target");
  rkhs_bound->add_option("--quantile-divisor", o.quantile_divisor,
                         "Use the 1 - alpha/divisor quantile");
  auto* rkhs_query = rkhs->add_subcommand("query", "Lower-bound the disparity of given shifts");
  add_data_options(rkhs_query, o);
  add_kernel_options(rkhs_query, o);
  rkhs_query->add_option("--query", o.query, "Shift CSV: columns coef + kernel columns, or h");
  rkhs_query->add_option("--norm-certificate", o.norm_certificate,
                         "Declared RKHS norm of h for value queries");

  auto* validate = app.add_subcommand("validate", "Monte Carlo validation on synthetic data");
  validate->add_option("--experiment", o.experiment, "fwer | coverage | fdr | rkhs-percentile");
  validate->add_option("--model", o.model, "homoskedastic | heteroskedastic | discrete");
  validate->add_option("--trials", o.trials, "Monte Carlo trials");
  validate->add_option("-n,--sizes", o.n_grid, "Audit sample sizes")->delimiter(',');
  validate->add_option("-e,--epsilon", o.epsilon, "Tolerance (inf disables certificates)");
  validate->add_option("--alpha", o.alpha, "Error level");
  validate->add_option("-B,--replicates", o.replicates, "Bootstrap replicates");
  validate->add_option("--seed", o.seed, "Master seed");
  validate->add_option("--p-star", o.p_star, "Scale floor p_*");
  validate->add_option("--w0", o.w0, "Shrinkage weight w0 (number or inf)");
  validate->add_flag("--rescaled", o.rescaled, "Use the shrinkage-rescaled statistic");
  validate->add_option("--bandwidths", o.bandwidths, "RKHS bandwidths")->delimiter(',');
  validate->add_option("--fdr-groups", o.groups_k, "FDR design: number of groups");
  validate->add_option("--nonnull-groups", o.nonnull, "FDR design: groups above the tolerance");
  validate->add_option("--effect", o.effect, "FDR design: shift of the non-null groups");
  validate->add_flag("--fast", o.fast, "50 trials");
  validate->add_option("-o,--output", o.output, "Report file (JSON); stdout when absent");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (const int threads = worker_budget()) omp_set_num_threads(threads);
    ga::RunConfig config = config_path ? ga::load_config(*config_path) : ga::RunConfig{};
    if (bounds->parsed()) {
      if (!side.empty()) {
        config.procedure = "bounds-" + side;
      } else if (config.procedure.rfind("bounds-", 0) != 0) {
        config.procedure = "bounds-lower";
      }
    } else if (certify->parsed()) {
      config.procedure = "certify";
    } else if (flag->parsed()) {
      config.procedure = "flag";
    } else if (rkhs_bound->parsed()) {
      config.procedure = "rkhs-bound";
    } else if (rkhs_query->parsed()) {
      config.procedure = "rkhs-query";
    } else {
      config.procedure = "validate";
    }
    apply(o, config);
    const auto report = ga::run(config, std::cerr);
    if (config.output.empty()) std::cout << report.dump(2) << '\n';
    return 0;
  } catch (const ga::InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 2;
  } catch (const ga::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
