#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "groupaudit/audit_trail.hpp"
#include "groupaudit/certify.hpp"
#include "groupaudit/flag.hpp"
#include "groupaudit/harness.hpp"
#include "groupaudit/rkhs.hpp"

namespace groupaudit {

using Json = nlohmann::ordered_json;

enum class ColumnRole { kLoss, kCategorical, kNumeric, kReference, kCustomPsi, kGroupLabel, kRecordId };

std::string column_role_name(ColumnRole r);
ColumnRole parse_column_role(const std::string& name);

using ColumnRoles = std::vector<std::pair<std::string, ColumnRole>>;

struct IngestResult {
  AuditTrail trail{std::vector<double>{0.0}};
  std::optional<Membership> reference;
  std::vector<double> custom_psi;
  std::optional<std::string> group_label;  // also present as a categorical covariate
  std::size_t rows = 0;
};

// Header row required. Columns without a role are ignored. Categorical levels
// are numbered by first appearance.
IngestResult ingest_csv(std::istream& in, const ColumnRoles& roles, const std::string& source = "<input>");
IngestResult ingest_csv(const std::string& path, const ColumnRoles& roles);

// Writes loss, covariates and record ids so that ingest_csv with
// roles_for(trail) reproduces the trail exactly.
void write_csv(std::ostream& out, const AuditTrail& trail);
ColumnRoles roles_for(const AuditTrail& trail);

// Splits one CSV line; double quotes group fields and "" escapes a quote.
std::vector<std::string> split_csv_line(const std::string& line);

struct RunConfig {
  std::string procedure;  // bounds-lower | bounds-upper | bounds-two-sided | certify | flag | rkhs-bound | rkhs-query | validate
  std::string input;
  ColumnRoles roles;

  std::string target = "fixed";  // fixed | pooled-mean | reference-mean | custom
  double theta = 0.0;

  std::string groups = "labels";  // labels | intersect | grid
  std::vector<std::string> group_columns;
  bool include_marginals = false;
  std::string grid_covariate;
  std::vector<double> endpoints;

  double alpha = 0.1;
  double epsilon = 0.0;
  double gamma = 0.0;
  std::size_t replicates = 500;
  std::uint64_t seed = 0;
  double p_star = 0.01;
  double w0 = std::numeric_limits<double>::infinity();
  bool rescaled = false;
  std::string direction;  // certify: above|below|bioequivalence; flag: greater|less|two-sided
  std::string recipe = "plain";  // flag: plain | equalized-odds | multicalibration
  std::string outcome_column;
  std::string bins_column;

  KernelSpec kernel;
  bool estimated_theta = false;
  double quantile_divisor = 1.0;
  std::string run_file;
  std::string query;
  std::optional<double> norm_certificate;

  std::string output;
  std::string curve_output;
  std::string grid_output;

  ExperimentSpec experiment;
  bool fast = false;

  void validate() const;
};

RunConfig config_from_json(const Json& j);
RunConfig load_config(const std::string& path);
Json config_to_json(const RunConfig& c);

Json to_json(const CertificationReport& r);
Json to_json(const FlagReport& r);
Json to_json(const RecipeReport& r);
Json to_json(const RkhsRun& r);
Json to_json(const ExperimentTable& t);

void write_curve_csv(std::ostream& out, const std::vector<CurvePoint>& curve);
void write_flag_grid_csv(std::ostream& out, const FlagReport& r);
void write_recipe_grid_csv(std::ostream& out, const RecipeReport& r);

// Stable across runs and platforms with the same byte layout.
std::uint64_t trail_fingerprint(const AuditTrail& trail);

// Executes a configured procedure, writes the requested files and returns the
// report. Human-readable progress goes to `log`.
Json run(const RunConfig& config, std::ostream& log);

}  // namespace groupaudit
