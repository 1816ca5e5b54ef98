#include "protocol/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace magmix {

bool CrossMagMatrix::complete() const { return missing().empty(); }

std::vector<std::pair<int, int>> CrossMagMatrix::missing() const {
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < kNumMags; ++i)
    for (int j = 0; j < kNumMags; ++j)
      if (!cells[i][j].accuracy) out.emplace_back(i, j);
  return out;
}

double CrossMagMatrix::at(int i, int j) const {
  const auto& c = cells.at(i).at(j);
  if (!c.accuracy) {
    throw ConfigError("matrix " + arch + ": cell (" + std::string(kMagLevels[i].label) + ", " +
                      std::string(kMagLevels[j].label) + ") is missing");
  }
  return *c.accuracy;
}

void CrossMagMatrix::set(int i, int j, double acc) {
  if (!(acc >= 0.0 && acc <= 1.0)) throw ConfigError("matrix " + arch + ": accuracy outside [0, 1]");
  cells.at(i).at(j).accuracy = acc;
}

nlohmann::json to_json(const CrossMagMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < kNumMags; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int j = 0; j < kNumMags; ++j) {
      const auto& c = m.cells[i][j];
      row.push_back({{"accuracy", c.accuracy ? nlohmann::json(*c.accuracy) : nlohmann::json(nullptr)},
                     {"run_seed", c.run_seed},
                     {"record", c.record}});
    }
    rows.push_back(row);
  }
  nlohmann::json missing = nlohmann::json::array();
  for (auto [i, j] : m.missing())
    missing.push_back({std::string(kMagLevels[i].label), std::string(kMagLevels[j].label)});
  nlohmann::json mags = nlohmann::json::array();
  for (const auto& l : kMagLevels) mags.push_back(l.label);
  nlohmann::json errors = nlohmann::json::object();
  for (int i = 0; i < kNumMags; ++i)
    if (!m.row_errors[i].empty()) errors[std::string(kMagLevels[i].label)] = m.row_errors[i];
  return nlohmann::json{{"arch", m.arch},
                        {"magnifications", mags},
                        {"cells", rows},
                        {"complete", m.complete()},
                        {"missing", missing},
                        {"row_errors", errors},
                        {"dataset_fingerprint", m.dataset_fingerprint},
                        {"param_count", m.param_count},
                        {"activation_elems", m.activation_elems}};
}

CrossMagMatrix matrix_from_json(const nlohmann::json& j) {
  CrossMagMatrix m;
  try {
    m.arch = j.at("arch").get<std::string>();
    const auto& rows = j.at("cells");
    if (!rows.is_array() || rows.size() != kNumMags) throw ConfigError("matrix: 'cells' must be a 4x4 array");
    for (int i = 0; i < kNumMags; ++i) {
      const auto& row = rows[i];
      if (!row.is_array() || row.size() != kNumMags) throw ConfigError("matrix: 'cells' must be a 4x4 array");
      for (int k = 0; k < kNumMags; ++k) {
        const auto& c = row[k];
        // Bare numbers (or null) are accepted for hand-written matrices.
        if (c.is_number()) {
          m.set(i, k, c.get<double>());
        } else if (c.is_object()) {
          if (c.contains("accuracy") && !c.at("accuracy").is_null()) m.set(i, k, c.at("accuracy").get<double>());
          if (c.contains("run_seed")) m.cells[i][k].run_seed = c.at("run_seed").get<std::uint64_t>();
          if (c.contains("record")) m.cells[i][k].record = c.at("record").get<std::string>();
        } else if (!c.is_null()) {
          throw ConfigError("matrix: cell must be a number, null or object");
        }
      }
    }
    if (j.contains("row_errors"))
      for (const auto& [label, msg] : j.at("row_errors").items()) m.row_errors[parse_mag(label)] = msg.get<std::string>();
    if (j.contains("dataset_fingerprint")) m.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
    if (j.contains("param_count")) m.param_count = j.at("param_count").get<Index>();
    if (j.contains("activation_elems")) m.activation_elems = j.at("activation_elems").get<Index>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed matrix: ") + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------

namespace {

// Sum with a single final rounding (Shewchuk's non-overlapping partials with
// round-half-even correction on the way out).
double fsum(std::span<const double> xs) {
  std::vector<double> partials;
  for (double x : xs) {
    std::size_t i = 0;
    for (double y : partials) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials[i++] = lo;
      x = hi;
    }
    partials.resize(i);
    partials.push_back(x);
  }
  if (partials.empty()) return 0.0;
  std::size_t n = partials.size();
  double hi = partials[--n], lo = 0.0;
  while (n > 0) {
    const double x = hi, y = partials[--n];
    hi = x + y;
    lo = y - (hi - x);
    if (lo != 0.0) break;
  }
  if (n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0))) {
    const double y = lo * 2.0, x = hi + y;
    if (y == x - hi) hi = x;
  }
  return hi;
}

}  // namespace

double exact_mean(std::span<const double> values) {
  if (values.empty()) throw ConfigError("mean of an empty set");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  const double m = fsum(v) / n;
  // Residual sum(x - m), with each difference split exactly into two terms.
  std::vector<double> resid;
  resid.reserve(2 * v.size());
  for (double x : v) {
    const double d = x - m;
    const double bv = d - x;
    resid.push_back(d);
    resid.push_back((x - (d - bv)) + (-m - bv));
  }
  std::sort(resid.begin(), resid.end());
  return m + fsum(resid) / n;
}

ArchSummary summarize(const CrossMagMatrix& m) {
  if (!m.complete()) {
    std::string cells;
    for (auto [i, j] : m.missing()) {
      cells += cells.empty() ? "" : ", ";
      cells += std::string(kMagLevels[i].label) + "->" + std::string(kMagLevels[j].label);
    }
    throw ConfigError("cannot summarize incomplete matrix for " + m.arch + "; missing cells: " + cells);
  }
  ArchSummary s;
  s.arch = m.arch;
  s.param_count = m.param_count;
  s.activation_elems = m.activation_elems;
  s.dataset_fingerprint = m.dataset_fingerprint;
  std::vector<double> all, diag, off;
  for (int i = 0; i < kNumMags; ++i) {
    std::vector<double> row;
    for (int j = 0; j < kNumMags; ++j) {
      const double a = m.at(i, j);
      row.push_back(a);
      all.push_back(a);
      (i == j ? diag : off).push_back(a);
    }
    s.row_means[i] = exact_mean(row);
  }
  s.overall_mean = exact_mean(all);
  s.diagonal_mean = exact_mean(diag);
  s.offdiag_mean = exact_mean(off);
  s.min_cell = *std::min_element(all.begin(), all.end());
  s.min_offdiag_cell = *std::min_element(off.begin(), off.end());
  s.generalization_gap = s.diagonal_mean - s.offdiag_mean;
  return s;
}

nlohmann::json to_json(const ArchSummary& s) {
  return nlohmann::json{{"arch", s.arch},
                        {"row_means", s.row_means},
                        {"overall_mean", s.overall_mean},
                        {"diagonal_mean", s.diagonal_mean},
                        {"offdiag_mean", s.offdiag_mean},
                        {"min_cell", s.min_cell},
                        {"min_offdiag_cell", s.min_offdiag_cell},
                        {"generalization_gap", s.generalization_gap},
                        {"param_count", s.param_count},
                        {"activation_elems", s.activation_elems},
                        {"dataset_fingerprint", s.dataset_fingerprint}};
}

// ---------------------------------------------------------------------------

namespace {

RobustnessReport::Ranking rank(const std::vector<ArchSummary>& ss, double ArchSummary::*field) {
  RobustnessReport::Ranking r;
  for (const auto& s : ss) r.emplace_back(s.arch, s.*field);
  std::sort(r.begin(), r.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return r;
}

}  // namespace

RobustnessReport compare(const std::vector<ArchSummary>& summaries) {
  if (summaries.empty()) throw ConfigError("compare: no summaries given");
  std::set<std::string> names;
  for (const auto& s : summaries) {
    if (s.dataset_fingerprint != summaries.front().dataset_fingerprint) {
      throw ConfigError("compare: dataset snapshot mismatch (" + summaries.front().arch + " on '" +
                        summaries.front().dataset_fingerprint + "', " + s.arch + " on '" + s.dataset_fingerprint +
                        "'); summaries from different data cannot be compared");
    }
    if (!names.insert(s.arch).second) throw ConfigError("compare: duplicate architecture '" + s.arch + "'");
  }
  RobustnessReport r;
  r.dataset_fingerprint = summaries.front().dataset_fingerprint;
  r.by_overall_mean = rank(summaries, &ArchSummary::overall_mean);
  r.by_diagonal_mean = rank(summaries, &ArchSummary::diagonal_mean);
  r.by_min_cell = rank(summaries, &ArchSummary::min_cell);
  for (const auto& s : summaries) r.generalization_gap.emplace_back(s.arch, s.generalization_gap);
  return r;
}

nlohmann::json to_json(const RobustnessReport& r) {
  auto ranking = [](const RobustnessReport::Ranking& rk) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& [name, v] : rk) a.push_back({{"arch", name}, {"value", v}});
    return a;
  };
  nlohmann::json gap = nlohmann::json::array();
  for (const auto& [name, v] : r.generalization_gap) gap.push_back({{"arch", name}, {"value", v}});
  return nlohmann::json{{"by_overall_mean", ranking(r.by_overall_mean)},
                        {"by_diagonal_mean", ranking(r.by_diagonal_mean)},
                        {"by_min_cell", ranking(r.by_min_cell)},
                        {"generalization_gap", gap},
                        {"dataset_fingerprint", r.dataset_fingerprint}};
}

std::vector<TrendCheck> check_reference_trends(const RobustnessReport& r) {
  auto check = [](const std::string& stat, const std::string& expected, const RobustnessReport::Ranking& rk) {
    TrendCheck t{stat, expected, rk.empty() ? std::string() : rk.front().first, std::nullopt};
    for (const auto& [name, v] : rk)
      if (name == expected) t.agrees = v == rk.front().second;
    return t;
  };
  return {check("overall_mean", "WaveMixNet", r.by_overall_mean),
          check("min_cell", "WaveMixNet", r.by_min_cell),
          check("diagonal_mean", "ConvMixerNet", r.by_diagonal_mean)};
}

}  // namespace magmix
