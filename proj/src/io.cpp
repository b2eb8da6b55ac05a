#include "groupaudit/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "groupaudit/error.hpp"
#include "groupaudit/groups.hpp"

namespace groupaudit {

namespace {

constexpr const char* kQuantileConvention =
    "t* is the k-th smallest bootstrap replicate, k = ceil(level * B) clamped to [1, B]";
constexpr const char* kRngConvention =
    "replicate b draws multinomial weights from mt19937_64 seeded with "
    "splitmix64(splitmix64(seed) ^ splitmix64(b + 0x632BE59BD9B4E019))";

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

bool is_missing(const std::string& field) {
  const auto v = lower(field);
  return v.empty() || v == "na" || v == "nan" || v == "null";
}

std::optional<double> parse_double(const std::string& s) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string quote_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos && trim(s) == s) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::string row_list(const std::vector<std::size_t>& rows) {
  std::string out;
  const std::size_t shown = std::min<std::size_t>(rows.size(), 20);
  for (std::size_t i = 0; i < shown; ++i) {
    if (i) out += ", ";
    out += std::to_string(rows[i]);
  }
  if (rows.size() > shown) out += ", ... (" + std::to_string(rows.size()) + " rows)";
  return out;
}

// Finite numbers as numbers, infinities as strings, NaN as null.
Json num(double v) {
  if (std::isnan(v)) return nullptr;
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

template <class T>
Json opt(const std::optional<T>& v) {
  if (!v) return nullptr;
  if constexpr (std::is_floating_point_v<T>) {
    return num(*v);
  } else {
    return *v;
  }
}

double read_w0(const Json& j) {
  if (j.is_string()) {
    const auto s = lower(j.get<std::string>());
    if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
    throw InputError("w0 must be a positive number or \"inf\"");
  }
  return j.get<double>();
}

Json bootstrap_json(const BootstrapConfig& c) {
  Json j;
  j["replicates"] = c.replicates;
  j["seed"] = c.seed;
  j["alpha"] = c.alpha;
  j["p_star"] = c.p_star;
  j["w0"] = num(c.w0);
  return j;
}

Json header(const std::string& report, const BootstrapConfig& c) {
  Json j;
  j["tool"] = "groupaudit";
  j["report"] = report;
  j["seed"] = c.seed;
  j["quantile_convention"] = kQuantileConvention;
  j["rng"] = kRngConvention;
  j["bootstrap"] = bootstrap_json(c);
  return j;
}

Json kernel_json(const KernelSpec& k) {
  Json j;
  j["family"] = kernel_family_name(k.family);
  j["bandwidth"] = k.bandwidth;
  j["columns"] = k.columns;
  return j;
}

KernelSpec kernel_from_json(const Json& j) {
  KernelSpec k;
  for (const auto& [key, v] : j.items()) {
    if (key == "family") {
      k.family = parse_kernel_family(v.get<std::string>());
    } else if (key == "bandwidth") {
      k.bandwidth = v.get<double>();
    } else if (key == "columns") {
      k.columns = v.get<std::vector<std::string>>();
    } else {
      throw InputError("unknown kernel key '" + key + "'");
    }
  }
  return k;
}

ExperimentSpec experiment_from_json(const Json& j) {
  ExperimentSpec e;
  for (const auto& [key, v] : j.items()) {
    if (key == "name") e.experiment = parse_experiment(v.get<std::string>());
    else if (key == "model") e.model = parse_synth_model(v.get<std::string>());
    else if (key == "trials") e.trials = v.get<std::size_t>();
    else if (key == "n_grid") e.n_grid = v.get<std::vector<std::size_t>>();
    else if (key == "alpha") e.alpha = v.get<double>();
    else if (key == "epsilon") e.epsilon = v.is_string() ? read_w0(v) : v.get<double>();
    else if (key == "p_star") e.p_star = v.get<double>();
    else if (key == "w0") e.w0 = read_w0(v);
    else if (key == "rescaled") e.rescaled = v.get<bool>();
    else if (key == "replicates") e.replicates = v.get<std::size_t>();
    else if (key == "seed") e.seed = v.get<std::uint64_t>();
    else if (key == "train_n") e.train_n = v.get<std::size_t>();
    else if (key == "endpoints") e.endpoints = v.get<std::vector<double>>();
    else if (key == "bandwidths") e.bandwidths = v.get<std::vector<double>>();
    else if (key == "groups") e.groups = v.get<std::size_t>();
    else if (key == "nonnull_groups") e.nonnull_groups = v.get<std::size_t>();
    else if (key == "effect") e.effect = v.get<double>();
    else throw InputError("unknown experiment key '" + key + "'");
  }
  return e;
}

Json experiment_json(const ExperimentSpec& e) {
  Json j;
  j["name"] = experiment_name(e.experiment);
  j["model"] = synth_model_name(e.model);
  j["trials"] = e.trials;
  j["n_grid"] = e.n_grid;
  j["alpha"] = e.alpha;
  j["epsilon"] = num(e.epsilon);
  j["p_star"] = e.p_star;
  j["w0"] = num(e.w0);
  j["rescaled"] = e.rescaled;
  j["replicates"] = e.replicates;
  j["seed"] = e.seed;
  j["train_n"] = e.train_n;
  j["endpoints"] = e.endpoints;
  j["bandwidths"] = e.bandwidths;
  j["groups"] = e.groups;
  j["nonnull_groups"] = e.nonnull_groups;
  j["effect"] = e.effect;
  return j;
}

const std::set<std::string> kProcedures = {"bounds-lower", "bounds-upper", "bounds-two-sided",
                                           "certify",      "flag",         "rkhs-bound",
                                           "rkhs-query",   "validate"};

std::optional<std::string> column_with_role(const ColumnRoles& roles, ColumnRole role) {
  for (const auto& [name, r] : roles) {
    if (r == role) return name;
  }
  return std::nullopt;
}

BootstrapConfig bootstrap_of(const RunConfig& c) {
  BootstrapConfig b;
  b.replicates = c.replicates;
  b.seed = c.seed;
  b.alpha = c.alpha;
  b.p_star = c.p_star;
  b.w0 = c.w0;
  return b;
}

template <class F>
auto in_context(const std::string& where, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const InputError& e) {
    throw InputError(where + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(where + ": " + e.what());
  }
}

TargetSpec build_target(const RunConfig& c, const IngestResult& data) {
  if (c.target == "fixed") return FixedTarget{c.theta};
  if (c.target == "pooled-mean") return PooledMeanTarget{};
  if (c.target == "reference-mean") {
    if (!data.reference) throw InputError("reference-mean target needs a reference-indicator column");
    return ReferenceMeanTarget{*data.reference};
  }
  if (c.target == "custom") {
    if (data.custom_psi.empty()) throw InputError("custom target needs a custom-psi column");
    return CustomTarget{c.theta, data.custom_psi};
  }
  throw InputError("unknown target '" + c.target + "'");
}

GroupCollection build_groups(const RunConfig& c, const IngestResult& data) {
  if (c.groups == "labels") {
    std::string column;
    if (data.group_label) {
      column = *data.group_label;
    } else if (c.group_columns.size() == 1) {
      column = c.group_columns.front();
    } else {
      throw InputError("label groups need a group-label column");
    }
    return groups_from_labels(data.trail, column);
  }
  if (c.groups == "intersect") {
    return intersect_categorical(data.trail, c.group_columns, c.include_marginals);
  }
  if (c.groups == "grid") return interval_grid(data.trail, c.grid_covariate, c.endpoints);
  throw InputError("unknown group kind '" + c.groups + "'");
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw InputError("failed writing '" + path + "'");
}

template <class F>
void write_file(const std::string& path, F&& fn) {
  std::ostringstream os;
  fn(os);
  write_text(path, os.str());
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

Json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw InputError("'" + path + "' is not valid JSON: " + e.what());
  }
}

std::vector<ShiftQuery> read_queries(const std::string& path, const KernelSpec& kernel,
                                     std::optional<double> norm_certificate,
                                     std::vector<std::string>& ids) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open query file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw InputError("query file '" + path + "' has no header row");
  const auto header = split_csv_line(line);
  auto find = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    return std::nullopt;
  };
  const auto id_col = find("query");
  const auto coef_col = find("coef");
  const auto h_col = find("h");
  if (!coef_col && !h_col) throw InputError("query file needs a 'coef' or an 'h' column");
  std::vector<std::size_t> point_cols;
  if (coef_col) {
    for (const auto& c : kernel.columns) {
      const auto idx = find(c);
      if (!idx) throw InputError("query file lacks kernel column '" + c + "'");
      point_cols.push_back(*idx);
    }
  }

  std::map<std::string, std::size_t> slot;
  std::vector<std::vector<std::vector<double>>> points;
  std::vector<std::vector<double>> values;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row;
    const auto f = split_csv_line(line);
    if (f.size() != header.size()) {
      throw InputError("query row " + std::to_string(row) + " has " + std::to_string(f.size()) +
                       " fields, header has " + std::to_string(header.size()));
    }
    const std::string id = id_col ? trim(f[*id_col]) : std::string("query");
    auto [it, inserted] = slot.try_emplace(id, ids.size());
    if (inserted) {
      ids.push_back(id);
      points.emplace_back();
      values.emplace_back();
    }
    auto number = [&](std::size_t col) {
      const auto v = parse_double(trim(f[col]));
      if (!v) throw InputError("query row " + std::to_string(row) + ": '" + f[col] + "' is not a number");
      return *v;
    };
    values[it->second].push_back(number(coef_col ? *coef_col : *h_col));
    if (coef_col) {
      std::vector<double> p;
      for (auto c : point_cols) p.push_back(number(c));
      points[it->second].push_back(std::move(p));
    }
  }
  if (ids.empty()) throw InputError("query file has no rows");

  std::vector<ShiftQuery> out(ids.size());
  for (std::size_t q = 0; q < ids.size(); ++q) {
    if (coef_col) {
      const auto& p = points[q];
      out[q].anchor_points.resize(static_cast<Eigen::Index>(p.size()),
                                  static_cast<Eigen::Index>(kernel.columns.size()));
      for (std::size_t i = 0; i < p.size(); ++i) {
        for (std::size_t d = 0; d < p[i].size(); ++d) {
          out[q].anchor_points(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = p[i][d];
        }
      }
      out[q].coefficients = values[q];
    } else {
      out[q].values = values[q];
      out[q].norm_certificate = norm_certificate;
    }
  }
  return out;
}

}  // namespace

std::string column_role_name(ColumnRole r) {
  switch (r) {
    case ColumnRole::kLoss: return "loss";
    case ColumnRole::kCategorical: return "categorical";
    case ColumnRole::kNumeric: return "numeric";
    case ColumnRole::kReference: return "reference-indicator";
    case ColumnRole::kCustomPsi: return "custom-psi";
    case ColumnRole::kGroupLabel: return "group-label";
    default: return "record-id";
  }
}

ColumnRole parse_column_role(const std::string& name) {
  if (name == "loss") return ColumnRole::kLoss;
  if (name == "categorical" || name == "covariate:categorical") return ColumnRole::kCategorical;
  if (name == "numeric" || name == "covariate:numeric") return ColumnRole::kNumeric;
  if (name == "reference-indicator" || name == "reference") return ColumnRole::kReference;
  if (name == "custom-psi" || name == "psi") return ColumnRole::kCustomPsi;
  if (name == "group-label") return ColumnRole::kGroupLabel;
  if (name == "record-id") return ColumnRole::kRecordId;
  throw InputError("unknown column role '" + name + "'");
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  if (quoted) throw InputError("unterminated quoted field");
  out.push_back(std::move(cur));
  return out;
}

IngestResult ingest_csv(std::istream& in, const ColumnRoles& roles, const std::string& source) {
  std::string line;
  if (!std::getline(in, line)) throw InputError(source + ": missing header row");
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  auto header = split_csv_line(line);
  for (auto& h : header) h = trim(h);

  std::size_t losses = 0;
  std::vector<std::size_t> col(roles.size());
  std::set<std::string> seen;
  for (std::size_t r = 0; r < roles.size(); ++r) {
    const auto& [name, role] = roles[r];
    if (!seen.insert(name).second) throw InputError(source + ": column '" + name + "' has two roles");
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw InputError(source + ": column '" + name + "' not found in header");
    col[r] = static_cast<std::size_t>(it - header.begin());
    if (role == ColumnRole::kLoss) ++losses;
  }
  if (losses != 1) {
    throw InputError(source + ": exactly one loss column is required, got " + std::to_string(losses));
  }

  std::vector<std::vector<std::string>> raw(roles.size());
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row;
    std::vector<std::string> fields;
    try {
      fields = split_csv_line(line);
    } catch (const InputError& e) {
      throw InputError(source + ": row " + std::to_string(row) + ": " + e.what());
    }
    if (fields.size() != header.size()) {
      throw InputError(source + ": row " + std::to_string(row) + " has " +
                       std::to_string(fields.size()) + " fields, header has " +
                       std::to_string(header.size()));
    }
    for (std::size_t r = 0; r < roles.size(); ++r) raw[r].push_back(trim(fields[col[r]]));
  }
  if (row == 0) throw InputError(source + ": no data rows");

  IngestResult out;
  out.rows = row;
  std::vector<double> loss;
  std::vector<Covariate> covariates;
  std::vector<std::string> ids;

  for (std::size_t r = 0; r < roles.size(); ++r) {
    const auto& [name, role] = roles[r];
    const auto& v = raw[r];
    std::vector<std::size_t> missing;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (role != ColumnRole::kRecordId && is_missing(v[i])) missing.push_back(i + 1);
    }
    if (!missing.empty()) {
      throw InputError(source + ": column '" + name + "' has missing values at rows " + row_list(missing));
    }
    auto numbers = [&]() {
      std::vector<double> x(v.size());
      std::vector<std::size_t> bad;
      for (std::size_t i = 0; i < v.size(); ++i) {
        const auto d = parse_double(v[i]);
        if (d) {
          x[i] = *d;
        } else {
          bad.push_back(i + 1);
        }
      }
      if (!bad.empty()) {
        throw InputError(source + ": column '" + name + "' has non-numeric values at rows " + row_list(bad));
      }
      return x;
    };
    switch (role) {
      case ColumnRole::kLoss: loss = numbers(); break;
      case ColumnRole::kNumeric: covariates.push_back(Covariate::numeric(name, numbers())); break;
      case ColumnRole::kCustomPsi: out.custom_psi = numbers(); break;
      case ColumnRole::kCategorical:
      case ColumnRole::kGroupLabel: {
        std::map<std::string, std::int32_t> code;
        std::vector<std::string> levels;
        std::vector<std::int32_t> codes(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
          auto [it, inserted] = code.try_emplace(v[i], static_cast<std::int32_t>(levels.size()));
          if (inserted) levels.push_back(v[i]);
          codes[i] = it->second;
        }
        covariates.push_back(Covariate::categorical(name, std::move(codes), std::move(levels)));
        if (role == ColumnRole::kGroupLabel) out.group_label = name;
        break;
      }
      case ColumnRole::kReference: {
        std::vector<std::uint8_t> mask(v.size());
        std::vector<std::size_t> bad;
        for (std::size_t i = 0; i < v.size(); ++i) {
          const auto s = lower(v[i]);
          if (s == "1" || s == "true") {
            mask[i] = 1;
          } else if (s != "0" && s != "false") {
            bad.push_back(i + 1);
          }
        }
        if (!bad.empty()) {
          throw InputError(source + ": reference column '" + name + "' must be 0/1, bad rows " + row_list(bad));
        }
        out.reference = Membership::from_mask(mask);
        break;
      }
      case ColumnRole::kRecordId: ids = v; break;
    }
  }
  out.trail = AuditTrail(std::move(loss), std::move(covariates), std::move(ids));
  return out;
}

IngestResult ingest_csv(const std::string& path, const ColumnRoles& roles) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  return ingest_csv(in, roles, path);
}

ColumnRoles roles_for(const AuditTrail& trail) {
  ColumnRoles roles{{"loss", ColumnRole::kLoss}};
  for (const auto& c : trail.covariates()) {
    roles.emplace_back(c.name, c.kind == CovariateKind::kCategorical ? ColumnRole::kCategorical
                                                                     : ColumnRole::kNumeric);
  }
  if (!trail.record_ids().empty()) roles.emplace_back("record_id", ColumnRole::kRecordId);
  return roles;
}

void write_csv(std::ostream& out, const AuditTrail& trail) {
  const auto roles = roles_for(trail);
  std::set<std::string> names;
  for (std::size_t r = 0; r < roles.size(); ++r) {
    if (!names.insert(roles[r].first).second) {
      throw InputError("cannot write a trail with duplicate column name '" + roles[r].first + "'");
    }
    out << (r ? "," : "") << quote_field(roles[r].first);
  }
  out << '\n';
  const auto& cov = trail.covariates();
  for (std::size_t i = 0; i < trail.size(); ++i) {
    out << format_double(trail.loss()[i]);
    for (const auto& c : cov) {
      out << ',';
      if (c.kind == CovariateKind::kNumeric) {
        out << format_double(c.values[i]);
      } else {
        out << quote_field(c.levels[static_cast<std::size_t>(c.codes[i])]);
      }
    }
    if (!trail.record_ids().empty()) out << ',' << quote_field(trail.record_ids()[i]);
    out << '\n';
  }
}

void RunConfig::validate() const {
  if (!kProcedures.count(procedure)) throw InputError("unknown procedure '" + procedure + "'");
  if (procedure == "validate") {
    experiment.validate();
    return;
  }
  if (input.empty()) throw InputError(procedure + " needs an input file");
  std::size_t losses = 0;
  for (const auto& [name, role] : roles) losses += role == ColumnRole::kLoss;
  if (losses != 1) throw InputError("exactly one loss column is required, got " + std::to_string(losses));
  if (target == "reference-mean" && !column_with_role(roles, ColumnRole::kReference)) {
    throw InputError("reference-mean target needs a reference-indicator column");
  }
  if (target == "custom" && !column_with_role(roles, ColumnRole::kCustomPsi)) {
    throw InputError("custom target needs a custom-psi column");
  }
  if (target != "fixed" && target != "pooled-mean" && target != "reference-mean" && target != "custom") {
    throw InputError("unknown target '" + target + "'");
  }
  bootstrap_of(*this).validate();

  if (procedure.rfind("rkhs", 0) == 0) {
    if (procedure == "rkhs-bound") kernel.validate();
    if (!(quantile_divisor >= 1.0)) throw InputError("quantile divisor must be at least 1");
    if (procedure == "rkhs-query" && (run_file.empty() || query.empty())) {
      throw InputError("rkhs-query needs a run file and a query file");
    }
    return;
  }

  if (groups == "labels") {
    if (!column_with_role(roles, ColumnRole::kGroupLabel) && group_columns.size() != 1) {
      throw InputError("label groups need a group-label column");
    }
  } else if (groups == "intersect") {
    if (group_columns.empty()) throw InputError("intersection groups need at least one column");
  } else if (groups == "grid") {
    if (grid_covariate.empty()) throw InputError("grid groups need a numeric covariate");
    if (endpoints.size() < 2) throw InputError("grid groups need at least two endpoints");
  } else {
    throw InputError("unknown group kind '" + groups + "'");
  }

  if (procedure == "certify") {
    if (direction != "above" && direction != "below" && direction != "bioequivalence") {
      throw InputError("certify needs direction above, below or bioequivalence");
    }
    if (!std::isfinite(epsilon)) throw InputError("tolerance must be finite");
    if (direction == "bioequivalence" && !(epsilon > 0.0)) {
      throw InputError("bioequivalence needs a positive tolerance");
    }
  }
  if (procedure == "flag") {
    if (!direction.empty() && direction != "greater" && direction != "less" && direction != "two-sided") {
      throw InputError("flag direction must be greater, less or two-sided");
    }
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw InputError("flag tolerance must be finite and >= 0");
    if (recipe == "equalized-odds") {
      if (outcome_column.empty()) throw InputError("equalized-odds needs an outcome column");
    } else if (recipe == "multicalibration") {
      if (bins_column.empty()) throw InputError("multicalibration needs a prediction-bin column");
      if (!(gamma >= 0.0)) throw InputError("gamma must be >= 0");
    } else if (recipe != "plain") {
      throw InputError("unknown flag recipe '" + recipe + "'");
    }
  }
}

RunConfig config_from_json(const Json& j) {
  if (!j.is_object()) throw InputError("run config must be a JSON object");
  RunConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "procedure") c.procedure = v.get<std::string>();
      else if (key == "input") c.input = v.get<std::string>();
      else if (key == "columns") {
        if (!v.is_object()) throw InputError("columns must map column names to roles");
        for (const auto& [name, role] : v.items()) {
          c.roles.emplace_back(name, parse_column_role(role.get<std::string>()));
        }
      }
      else if (key == "target") c.target = v.get<std::string>();
      else if (key == "theta") c.theta = v.get<double>();
      else if (key == "groups") c.groups = v.get<std::string>();
      else if (key == "group_columns") c.group_columns = v.get<std::vector<std::string>>();
      else if (key == "include_marginals") c.include_marginals = v.get<bool>();
      else if (key == "grid_covariate") c.grid_covariate = v.get<std::string>();
      else if (key == "endpoints") c.endpoints = v.get<std::vector<double>>();
      else if (key == "alpha") c.alpha = v.get<double>();
      else if (key == "epsilon") c.epsilon = v.get<double>();
      else if (key == "gamma") c.gamma = v.get<double>();
      else if (key == "replicates") c.replicates = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "p_star") c.p_star = v.get<double>();
      else if (key == "w0") c.w0 = read_w0(v);
      else if (key == "rescaled") c.rescaled = v.get<bool>();
      else if (key == "direction") c.direction = v.get<std::string>();
      else if (key == "recipe") c.recipe = v.get<std::string>();
      else if (key == "outcome_column") c.outcome_column = v.get<std::string>();
      else if (key == "bins_column") c.bins_column = v.get<std::string>();
      else if (key == "kernel") c.kernel = kernel_from_json(v);
      else if (key == "estimated_theta") c.estimated_theta = v.get<bool>();
      else if (key == "quantile_divisor") c.quantile_divisor = v.get<double>();
      else if (key == "run_file") c.run_file = v.get<std::string>();
      else if (key == "query") c.query = v.get<std::string>();
      else if (key == "norm_certificate") {
        if (!v.is_null()) c.norm_certificate = v.get<double>();
      }
      else if (key == "output") c.output = v.get<std::string>();
      else if (key == "curve_output") c.curve_output = v.get<std::string>();
      else if (key == "grid_output") c.grid_output = v.get<std::string>();
      else if (key == "experiment") c.experiment = experiment_from_json(v);
      else if (key == "fast") c.fast = v.get<bool>();
      else throw InputError("unknown config key '" + key + "'");
    }
  } catch (const Json::exception& e) {
    throw InputError(std::string("malformed run config: ") + e.what());
  }
  return c;
}

RunConfig load_config(const std::string& path) { return config_from_json(load_json(path)); }

Json config_to_json(const RunConfig& c) {
  Json j;
  j["procedure"] = c.procedure;
  if (c.procedure == "validate") {
    j["experiment"] = experiment_json(c.experiment);
    j["fast"] = c.fast;
    j["output"] = c.output;
    return j;
  }
  j["input"] = c.input;
  Json cols = Json::object();
  for (const auto& [name, role] : c.roles) cols[name] = column_role_name(role);
  j["columns"] = cols;
  j["target"] = c.target;
  j["theta"] = c.theta;
  j["groups"] = c.groups;
  j["group_columns"] = c.group_columns;
  j["include_marginals"] = c.include_marginals;
  j["grid_covariate"] = c.grid_covariate;
  j["endpoints"] = c.endpoints;
  j["alpha"] = c.alpha;
  j["epsilon"] = num(c.epsilon);
  j["gamma"] = c.gamma;
  j["replicates"] = c.replicates;
  j["seed"] = c.seed;
  j["p_star"] = c.p_star;
  j["w0"] = num(c.w0);
  j["rescaled"] = c.rescaled;
  j["direction"] = c.direction;
  j["recipe"] = c.recipe;
  j["outcome_column"] = c.outcome_column;
  j["bins_column"] = c.bins_column;
  j["kernel"] = kernel_json(c.kernel);
  j["estimated_theta"] = c.estimated_theta;
  j["quantile_divisor"] = c.quantile_divisor;
  j["run_file"] = c.run_file;
  j["query"] = c.query;
  j["norm_certificate"] = opt(c.norm_certificate);
  j["output"] = c.output;
  j["curve_output"] = c.curve_output;
  j["grid_output"] = c.grid_output;
  return j;
}

Json to_json(const CertificationReport& r) {
  Json j = header("certification", r.config);
  j["mode"] = r.mode;
  j["target"] = {{"kind", r.target_kind}, {"theta_hat", r.theta_hat}};
  j["rescaled"] = r.rescaled;
  j["fast_path_used"] = r.fast_path_used;
  j["t_star"] = r.t_star;
  j["t_star_second"] = opt(r.t_star_second);
  j["tolerance"] = opt(r.tolerance);
  j["excluded_empty"] = r.excluded_empty;
  j["theta_fallbacks"] = r.theta_fallbacks;
  j["warnings"] = r.warnings;
  Json groups = Json::array();
  for (const auto& g : r.groups) {
    Json e;
    e["name"] = g.name;
    e["count"] = g.count;
    e["p_n"] = g.p_n;
    e["eps_hat"] = g.eps_hat;
    e["lower"] = opt(g.lower);
    e["upper"] = opt(g.upper);
    e["s_hat"] = opt(g.s_hat);
    e["sigma_clamped"] = g.sigma_clamped;
    e["degenerate"] = g.degenerate;
    e["certified"] = opt(g.certified);
    e["margin"] = opt(g.margin);
    e["margin_second"] = opt(g.margin_second);
    if (g.endpoints) e["endpoints"] = {g.endpoints->first, g.endpoints->second};
    groups.push_back(std::move(e));
  }
  j["groups"] = std::move(groups);
  return j;
}

Json to_json(const FlagReport& r) {
  Json j = header("flag", r.config);
  j["alpha"] = r.alpha;
  j["tolerance"] = r.tolerance;
  j["direction"] = flag_direction_name(r.direction);
  j["target"] = {{"kind", r.target_kind}, {"theta_hat", r.theta_hat}};
  j["fdr_guarantee"] = r.fdr_guarantee;
  j["scale"] = "s* = median |bootstrap delta| / 0.6744897501960817";
  j["excluded_empty"] = r.excluded_empty;
  j["missing_replicates"] = r.missing_replicates;
  j["theta_fallbacks"] = r.theta_fallbacks;
  Json groups = Json::array();
  std::size_t flagged = 0;
  for (const auto& g : r.groups) {
    flagged += g.flagged;
    groups.push_back({{"name", g.name},
                      {"count", g.count},
                      {"p_n", g.p_n},
                      {"eps_hat", g.eps_hat},
                      {"s_star", g.s_star},
                      {"p_value", g.p_value},
                      {"flagged", g.flagged},
                      {"degenerate", g.degenerate},
                      {"missing_replicates", g.missing_replicates}});
  }
  j["flagged"] = flagged;
  j["groups"] = std::move(groups);
  return j;
}

Json to_json(const RecipeReport& r) {
  Json j = to_json(r.tests);
  j["report"] = "flag-recipe";
  j["recipe"] = r.recipe;
  Json flags = Json::array();
  for (const auto& f : r.flags) {
    flags.push_back({{"group", f.group}, {"flagged", f.flagged}, {"triggered_by", f.triggered_by}});
  }
  j["recipe_flags"] = std::move(flags);
  return j;
}

Json to_json(const RkhsRun& r) {
  Json j = header("rkhs-bound", r.config);
  j["kernel"] = kernel_json(r.kernel);
  j["target"] = {{"kind", r.target_kind}, {"theta_hat", r.theta_hat}};
  j["estimated_theta"] = r.estimated_theta;
  j["quantile_level"] = r.quantile_level;
  j["t_star"] = r.t_star;
  j["anchors"] = r.anchors;
  j["replicates"] = r.replicates;
  return j;
}

Json to_json(const ExperimentTable& t) {
  Json j;
  j["tool"] = "groupaudit";
  j["report"] = "validate";
  j["seed"] = t.spec.seed;
  j["quantile_convention"] = kQuantileConvention;
  j["rng"] = kRngConvention;
  j["experiment"] = experiment_json(t.spec);
  Json rows = Json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"n", r.n},
                    {"bandwidth", num(r.bandwidth)},
                    {"trials", r.trials},
                    {"metric", r.metric},
                    {"rate", r.rate},
                    {"rate_se", r.rate_se},
                    {"power", num(r.power)},
                    {"power_se", num(r.power_se)},
                    {"power_trials", r.power_trials}});
  }
  j["rows"] = std::move(rows);
  return j;
}

void write_curve_csv(std::ostream& out, const std::vector<CurvePoint>& curve) {
  out << "width,intervals,min_eps_hat,min_lower,min_upper\n";
  auto cell = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (const auto& p : curve) {
    out << format_double(p.width) << ',' << p.intervals << ',' << format_double(p.min_eps_hat) << ','
        << cell(p.min_lower) << ',' << cell(p.min_upper) << '\n';
  }
}

void write_flag_grid_csv(std::ostream& out, const FlagReport& r) {
  out << "group,count,eps_hat,s_star,p_value,flagged\n";
  for (const auto& g : r.groups) {
    out << quote_field(g.name) << ',' << g.count << ',' << format_double(g.eps_hat) << ','
        << format_double(g.s_star) << ',' << format_double(g.p_value) << ',' << (g.flagged ? 1 : 0)
        << '\n';
  }
}

void write_recipe_grid_csv(std::ostream& out, const RecipeReport& r) {
  out << "group,flagged,triggered_by\n";
  for (const auto& f : r.flags) {
    std::string by;
    for (std::size_t i = 0; i < f.triggered_by.size(); ++i) by += (i ? ";" : "") + f.triggered_by[i];
    out << quote_field(f.group) << ',' << (f.flagged ? 1 : 0) << ',' << quote_field(by) << '\n';
  }
}

std::uint64_t trail_fingerprint(const AuditTrail& trail) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* p, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::uint64_t n = trail.size();
  mix(&n, sizeof n);
  mix(trail.loss().data(), trail.loss().size_bytes());
  for (const auto& c : trail.covariates()) {
    mix(c.name.data(), c.name.size());
    if (c.kind == CovariateKind::kNumeric) {
      mix(c.values.data(), c.values.size() * sizeof(double));
    } else {
      mix(c.codes.data(), c.codes.size() * sizeof(std::int32_t));
    }
  }
  return h;
}

Json run(const RunConfig& config, std::ostream& log) {
  in_context("config", [&] { config.validate(); });
  Json report;

  if (config.procedure == "validate") {
    auto spec = config.experiment;
    if (config.fast) spec.make_fast();
    const auto table = in_context("validate", [&] { return run_experiment(spec); });
    log << table.to_text();
    report = to_json(table);
  } else {
    const auto data = in_context("ingest", [&] { return ingest_csv(config.input, config.roles); });
    log << "read " << data.rows << " rows from " << config.input << '\n';
    const auto target = in_context("target", [&] { return build_target(config, data); });
    const auto boot = bootstrap_of(config);

    if (config.procedure.rfind("bounds-", 0) == 0 || config.procedure == "certify") {
      const auto groups = in_context("groups", [&] { return build_groups(config, data); });
      log << groups.size() << " groups";
      if (groups.dropped_empty()) log << " (" << groups.dropped_empty() << " empty groups excluded)";
      log << '\n';
      CertifyOptions opt;
      opt.rescaled = config.rescaled;
      const auto r = in_context("certify", [&] {
        if (config.procedure == "certify") {
          const Direction d = config.direction == "above"   ? Direction::kAbove
                              : config.direction == "below" ? Direction::kBelow
                                                            : Direction::kBioequivalence;
          return boolean_certify(data.trail, target, groups, config.epsilon, boot, d, opt);
        }
        const BoundSide side = config.procedure == "bounds-lower"   ? BoundSide::kLower
                               : config.procedure == "bounds-upper" ? BoundSide::kUpper
                                                                    : BoundSide::kTwoSided;
        return certify_bounds(data.trail, target, groups, boot, side, opt);
      });
      for (const auto& w : r.warnings) log << "warning: " << w << '\n';
      log << "t* = " << r.t_star << '\n';
      if (!config.curve_output.empty()) {
        if (!groups.is_grid()) throw InputError("curve export needs grid groups");
        write_file(config.curve_output,
                   [&](std::ostream& os) { write_curve_csv(os, width_curve(r, groups.grid())); });
      }
      report = to_json(r);
    } else if (config.procedure == "flag") {
      const auto groups = in_context("groups", [&] { return build_groups(config, data); });
      if (config.recipe == "plain") {
        const FlagDirection d = config.direction == "less"        ? FlagDirection::kLess
                                : config.direction == "two-sided" ? FlagDirection::kTwoSided
                                                                  : FlagDirection::kGreater;
        const auto r = in_context("flag", [&] {
          return flag_p_values(data.trail, target, groups, config.epsilon, boot, d);
        });
        std::size_t flagged = 0;
        for (const auto& g : r.groups) flagged += g.flagged;
        log << flagged << " of " << r.groups.size() << " groups flagged\n";
        if (!config.grid_output.empty()) {
          write_file(config.grid_output, [&](std::ostream& os) { write_flag_grid_csv(os, r); });
        }
        report = to_json(r);
      } else {
        const auto r = in_context("flag", [&] {
          if (config.recipe == "equalized-odds") {
            return equalized_odds_flag(data.trail, groups, config.outcome_column, config.epsilon, boot);
          }
          return multicalibration_flag(data.trail, groups, config.bins_column, config.gamma,
                                       config.epsilon, boot);
        });
        std::size_t flagged = 0;
        for (const auto& f : r.flags) flagged += f.flagged;
        log << flagged << " of " << r.flags.size() << " groups flagged\n";
        if (!config.grid_output.empty()) {
          write_file(config.grid_output, [&](std::ostream& os) { write_recipe_grid_csv(os, r); });
        }
        report = to_json(r);
      }
    } else if (config.procedure == "rkhs-bound") {
      RkhsOptions opt;
      opt.estimated_theta = config.estimated_theta;
      opt.quantile_divisor = config.quantile_divisor;
      const auto r = in_context("rkhs", [&] {
        return rkhs_critical_value(data.trail, target, config.kernel, boot, opt);
      });
      log << "t* = " << r.t_star << " over " << r.anchors << " distinct points\n";
      report = to_json(r);
      report["trail_fingerprint"] = trail_fingerprint(data.trail);
    } else {
      const Json saved = in_context("run file", [&] { return load_json(config.run_file); });
      double t_star = 0.0;
      KernelSpec kernel;
      std::string target_kind;
      std::uint64_t fingerprint = 0;
      in_context("run file", [&] {
        try {
          if (saved.value("report", "") != "rkhs-bound") throw InputError("not an rkhs-bound run");
          t_star = saved.at("t_star").get<double>();
          kernel = kernel_from_json(saved.at("kernel"));
          target_kind = saved.at("target").at("kind").get<std::string>();
          fingerprint = saved.at("trail_fingerprint").get<std::uint64_t>();
        } catch (const Json::exception& e) {
          throw InputError(std::string("malformed: ") + e.what());
        }
      });
      if (fingerprint != trail_fingerprint(data.trail)) {
        throw InputError("run file: computed on a different audit trail");
      }
      if (target_kind != target_kind_name(target)) {
        throw InputError("run file: target kind " + target_kind + " does not match " +
                         target_kind_name(target));
      }
      std::vector<std::string> ids;
      const auto queries = in_context("query", [&] {
        return read_queries(config.query, kernel, config.norm_certificate, ids);
      });
      report["tool"] = "groupaudit";
      report["report"] = "rkhs-query";
      report["seed"] = saved.at("seed");
      report["quantile_convention"] = kQuantileConvention;
      report["rng"] = kRngConvention;
      report["run_file"] = config.run_file;
      report["kernel"] = kernel_json(kernel);
      report["t_star"] = t_star;
      Json results = Json::array();
      for (std::size_t q = 0; q < queries.size(); ++q) {
        const auto e = in_context("query " + ids[q], [&] {
          return evaluate_shift(data.trail, target, kernel, queries[q], t_star);
        });
        log << ids[q] << ": eps_hat = " << e.eps_hat << ", lower = " << e.lower << '\n';
        results.push_back({{"query", ids[q]},
                           {"mean_h", e.mean_h},
                           {"eps_hat", e.eps_hat},
                           {"lower", e.lower},
                           {"rkhs_norm", opt(e.rkhs_norm)},
                           {"norm_verified", e.norm_verified},
                           {"norm_note", e.norm_note},
                           {"nonnegativity_note", e.nonnegativity_note}});
      }
      report["queries"] = std::move(results);
    }
  }

  report["run_config"] = config_to_json(config);
  if (config.procedure == "rkhs-bound" && !config.run_file.empty()) {
    write_text(config.run_file, dump(report));
  }
  if (!config.output.empty()) write_text(config.output, dump(report));
  return report;
}

}  // namespace groupaudit
