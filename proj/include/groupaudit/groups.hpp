#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "groupaudit/audit_trail.hpp"

namespace groupaudit {

struct NamedGroup {
  std::string name;
  Membership members;
};

struct ExplicitGroups {
  std::vector<NamedGroup> groups;
};

// All intervals (e_j, e_k], j < k, over a sorted endpoint grid. A record with
// value exactly e_0 is placed in the first cell.
struct IntervalGrid {
  std::string covariate;
  std::vector<double> endpoints;
  std::vector<std::int32_t> cell;  // per record, in [0, endpoints.size() - 1)

  std::size_t cells() const { return endpoints.size() - 1; }
  std::size_t intervals() const { return cells() * (cells() + 1) / 2; }
  // Endpoint index pair of the idx-th interval in lexicographic (j, k) order.
  std::pair<std::size_t, std::size_t> pair(std::size_t idx) const;
  std::string name(std::size_t j, std::size_t k) const;
};

class GroupCollection {
 public:
  GroupCollection(std::size_t n, ExplicitGroups groups, std::size_t dropped_empty = 0);
  GroupCollection(std::size_t n, IntervalGrid grid);

  std::size_t records() const { return n_; }
  std::size_t size() const;
  std::size_t dropped_empty() const { return dropped_empty_; }

  bool is_grid() const { return std::holds_alternative<IntervalGrid>(kind_); }
  const IntervalGrid& grid() const { return std::get<IntervalGrid>(kind_); }
  const ExplicitGroups& explicit_groups() const { return std::get<ExplicitGroups>(kind_); }

  // Visits every group exactly once; grids in lexicographic (j, k) order.
  void for_each(const std::function<void(const std::string&, const Membership&)>& fn) const;
  std::vector<NamedGroup> enumerate() const;

 private:
  std::size_t n_;
  std::variant<ExplicitGroups, IntervalGrid> kind_;
  std::size_t dropped_empty_ = 0;
};

// Explicit collection; empty groups are dropped and counted, names must be unique.
GroupCollection make_explicit(std::size_t n, std::vector<NamedGroup> groups);

GroupCollection intersect_categorical(const AuditTrail& trail,
                                      const std::vector<std::string>& columns,
                                      bool include_marginals);

GroupCollection interval_grid(const AuditTrail& trail, const std::string& covariate,
                              std::vector<double> endpoints);

// One group per level of a categorical column.
GroupCollection groups_from_labels(const AuditTrail& trail, const std::string& column);

struct MulticalibrationGroups {
  GroupCollection groups;
  std::vector<std::size_t> base_index;  // base group of each expanded group
  std::vector<std::int32_t> bin;        // bin code of each expanded group
  std::vector<std::string> base_names;
};

// Every non-empty G ∩ {bin = v}, named "G@v".
MulticalibrationGroups multicalibration_expand(const AuditTrail& trail, const GroupCollection& base,
                                               const std::string& prediction_bins);

}  // namespace groupaudit
