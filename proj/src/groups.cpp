#include "groupaudit/groups.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "groupaudit/error.hpp"

namespace groupaudit {

namespace {

std::string format_endpoint(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace

std::pair<std::size_t, std::size_t> IntervalGrid::pair(std::size_t idx) const {
  const std::size_t m = endpoints.size();
  for (std::size_t j = 0; j + 1 < m; ++j) {
    const std::size_t row = m - 1 - j;
    if (idx < row) return {j, j + 1 + idx};
    idx -= row;
  }
  throw InputError("interval index out of range");
}

std::string IntervalGrid::name(std::size_t j, std::size_t k) const {
  return (j == 0 ? "[" : "(") + format_endpoint(endpoints[j]) + "," + format_endpoint(endpoints[k]) + "]";
}

GroupCollection::GroupCollection(std::size_t n, ExplicitGroups groups, std::size_t dropped_empty)
    : n_(n), kind_(std::move(groups)), dropped_empty_(dropped_empty) {
  std::set<std::string> names;
  for (const auto& g : std::get<ExplicitGroups>(kind_).groups) {
    if (g.members.universe() != n) {
      throw InputError("group '" + g.name + "' membership length does not match record count");
    }
    if (!names.insert(g.name).second) throw InputError("duplicate group name '" + g.name + "'");
  }
}

GroupCollection::GroupCollection(std::size_t n, IntervalGrid grid) : n_(n), kind_(std::move(grid)) {
  const auto& g = std::get<IntervalGrid>(kind_);
  if (g.endpoints.size() < 2) throw InputError("interval grid needs at least two endpoints");
  if (g.cell.size() != n) throw InputError("interval grid cell vector length mismatch");
}

std::size_t GroupCollection::size() const {
  if (is_grid()) return grid().intervals();
  return explicit_groups().groups.size();
}

void GroupCollection::for_each(
    const std::function<void(const std::string&, const Membership&)>& fn) const {
  if (!is_grid()) {
    for (const auto& g : explicit_groups().groups) fn(g.name, g.members);
    return;
  }
  const auto& g = grid();
  const std::size_t cells = g.cells();
  std::vector<std::vector<std::uint32_t>> by_cell(cells);
  for (std::size_t i = 0; i < g.cell.size(); ++i) {
    by_cell[static_cast<std::size_t>(g.cell[i])].push_back(static_cast<std::uint32_t>(i));
  }
  for (std::size_t j = 0; j < cells; ++j) {
    std::vector<std::uint32_t> acc;
    for (std::size_t k = j + 1; k <= cells; ++k) {
      const auto& add = by_cell[k - 1];
      acc.insert(acc.end(), add.begin(), add.end());
      fn(g.name(j, k), Membership(n_, acc));
    }
  }
}

std::vector<NamedGroup> GroupCollection::enumerate() const {
  std::vector<NamedGroup> out;
  out.reserve(size());
  for_each([&](const std::string& name, const Membership& m) { out.push_back({name, m}); });
  return out;
}

GroupCollection make_explicit(std::size_t n, std::vector<NamedGroup> groups) {
  ExplicitGroups kept;
  std::size_t dropped = 0;
  for (auto& g : groups) {
    if (g.members.empty()) {
      ++dropped;
      continue;
    }
    kept.groups.push_back(std::move(g));
  }
  return GroupCollection(n, std::move(kept), dropped);
}

GroupCollection intersect_categorical(const AuditTrail& trail,
                                      const std::vector<std::string>& columns,
                                      bool include_marginals) {
  if (columns.empty()) throw InputError("intersection needs at least one column");
  std::vector<const Covariate*> cols;
  for (const auto& name : columns) {
    const auto& c = trail.covariate(name);
    if (c.kind != CovariateKind::kCategorical) {
      throw InputError("covariate '" + name + "' is not categorical");
    }
    cols.push_back(&c);
  }
  const std::size_t n = trail.size();
  const std::size_t k = cols.size();

  // Column subsets, largest first; within a size, by bitmask order of column position.
  std::vector<std::uint32_t> subsets;
  const std::uint32_t full = (1u << k) - 1u;
  if (include_marginals) {
    for (std::uint32_t s = 1; s <= full; ++s) subsets.push_back(s);
  } else {
    subsets.push_back(full);
  }
  std::stable_sort(subsets.begin(), subsets.end(), [](std::uint32_t a, std::uint32_t b) {
    return std::popcount(a) > std::popcount(b);
  });

  std::vector<NamedGroup> groups;
  for (auto s : subsets) {
    std::map<std::vector<std::int32_t>, std::vector<std::uint32_t>> cells;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::int32_t> key;
      for (std::size_t c = 0; c < k; ++c) {
        if (s & (1u << c)) key.push_back(cols[c]->codes[i]);
      }
      cells[key].push_back(static_cast<std::uint32_t>(i));
    }
    for (auto& [key, idx] : cells) {
      std::string name;
      std::size_t pos = 0;
      for (std::size_t c = 0; c < k; ++c) {
        if (!(s & (1u << c))) continue;
        if (!name.empty()) name += "&";
        name += cols[c]->name + "=" + cols[c]->levels[static_cast<std::size_t>(key[pos++])];
      }
      groups.push_back({std::move(name), Membership(n, std::move(idx))});
    }
  }
  if (groups.empty()) throw InputError("categorical intersection produced no groups");
  return make_explicit(n, std::move(groups));
}

GroupCollection interval_grid(const AuditTrail& trail, const std::string& covariate,
                              std::vector<double> endpoints) {
  const auto& c = trail.covariate(covariate);
  if (c.kind != CovariateKind::kNumeric) {
    throw InputError("covariate '" + covariate + "' is not numeric");
  }
  if (endpoints.size() < 2) throw InputError("interval grid needs at least two endpoints");
  for (std::size_t i = 0; i < endpoints.size(); ++i) {
    if (!std::isfinite(endpoints[i])) throw InputError("interval grid endpoints must be finite");
    if (i > 0 && !(endpoints[i] > endpoints[i - 1])) {
      throw InputError("interval grid endpoints must be strictly increasing");
    }
  }

  IntervalGrid grid;
  grid.covariate = covariate;
  grid.cell.resize(trail.size());
  std::vector<std::size_t> outside;
  for (std::size_t i = 0; i < trail.size(); ++i) {
    const double x = c.values[i];
    if (!(x >= endpoints.front() && x <= endpoints.back())) {
      outside.push_back(i);
      continue;
    }
    // First endpoint >= x closes the cell (e_{a}, e_{a+1}].
    auto it = std::lower_bound(endpoints.begin() + 1, endpoints.end(), x);
    grid.cell[i] = static_cast<std::int32_t>(std::distance(endpoints.begin(), it) - 1);
  }
  if (!outside.empty()) {
    std::ostringstream os;
    os << outside.size() << " value(s) of '" << covariate << "' outside the grid range ["
       << endpoints.front() << ", " << endpoints.back() << "] at records";
    for (std::size_t i = 0; i < outside.size() && i < 20; ++i) os << ' ' << outside[i];
    if (outside.size() > 20) os << " ...";
    throw InputError(os.str());
  }
  grid.endpoints = std::move(endpoints);
  return GroupCollection(trail.size(), std::move(grid));
}

GroupCollection groups_from_labels(const AuditTrail& trail, const std::string& column) {
  const auto& c = trail.covariate(column);
  if (c.kind != CovariateKind::kCategorical) {
    throw InputError("group-label column '" + column + "' must be categorical");
  }
  std::vector<std::vector<std::uint32_t>> idx(c.levels.size());
  for (std::size_t i = 0; i < trail.size(); ++i) {
    idx[static_cast<std::size_t>(c.codes[i])].push_back(static_cast<std::uint32_t>(i));
  }
  std::vector<NamedGroup> groups;
  for (std::size_t l = 0; l < idx.size(); ++l) {
    groups.push_back({c.levels[l], Membership(trail.size(), std::move(idx[l]))});
  }
  return make_explicit(trail.size(), std::move(groups));
}

MulticalibrationGroups multicalibration_expand(const AuditTrail& trail, const GroupCollection& base,
                                               const std::string& prediction_bins) {
  if (base.is_grid()) throw InputError("multicalibration expansion needs an explicit collection");
  const auto& bins = trail.covariate(prediction_bins);
  if (bins.kind != CovariateKind::kCategorical) {
    throw InputError("prediction-bin column '" + prediction_bins + "' must be categorical");
  }
  const std::size_t n = trail.size();
  std::vector<Membership> by_bin;
  {
    std::vector<std::vector<std::uint32_t>> idx(bins.levels.size());
    for (std::size_t i = 0; i < n; ++i) {
      idx[static_cast<std::size_t>(bins.codes[i])].push_back(static_cast<std::uint32_t>(i));
    }
    for (auto& v : idx) by_bin.emplace_back(n, std::move(v));
  }

  std::vector<NamedGroup> groups;
  std::vector<std::size_t> base_index;
  std::vector<std::int32_t> bin;
  std::vector<std::string> base_names;
  std::size_t dropped = 0;
  const auto& base_groups = base.explicit_groups().groups;
  for (std::size_t g = 0; g < base_groups.size(); ++g) {
    base_names.push_back(base_groups[g].name);
    for (std::size_t v = 0; v < by_bin.size(); ++v) {
      auto cell = base_groups[g].members.intersect(by_bin[v]);
      if (cell.empty()) {
        ++dropped;
        continue;
      }
      groups.push_back({base_groups[g].name + "@" + bins.levels[v], std::move(cell)});
      base_index.push_back(g);
      bin.push_back(static_cast<std::int32_t>(v));
    }
  }
  ExplicitGroups eg{std::move(groups)};
  return {GroupCollection(n, std::move(eg), dropped), std::move(base_index), std::move(bin),
          std::move(base_names)};
}

}  // namespace groupaudit
