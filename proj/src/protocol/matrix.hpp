#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "data/dataset.hpp"

namespace magmix {

// Rows: training magnification. Columns: testing magnification. Both in
// kMagLevels order.
struct CrossMagMatrix {
  struct Cell {
    std::optional<double> accuracy;
    std::uint64_t run_seed = 0;
    std::string record;  // run record path relative to the results root; empty if none
  };

  std::string arch;
  std::array<std::array<Cell, kNumMags>, kNumMags> cells{};
  std::array<std::string, kNumMags> row_errors{};
  std::array<std::optional<ErrorKind>, kNumMags> row_error_kinds{};  // not serialized
  std::string dataset_fingerprint;
  Index param_count = 0;
  Index activation_elems = 0;

  bool complete() const;
  std::vector<std::pair<int, int>> missing() const;
  double at(int i, int j) const;  // throws if the cell is missing
  void set(int i, int j, double acc);
};

nlohmann::json to_json(const CrossMagMatrix& m);
CrossMagMatrix matrix_from_json(const nlohmann::json& j);

struct ArchSummary {
  std::string arch;
  std::array<double, kNumMags> row_means{};
  double overall_mean = 0.0;
  double diagonal_mean = 0.0;
  double offdiag_mean = 0.0;
  double min_cell = 0.0;
  double min_offdiag_cell = 0.0;
  double generalization_gap = 0.0;  // diagonal_mean - offdiag_mean
  Index param_count = 0;
  Index activation_elems = 0;
  std::string dataset_fingerprint;
};

nlohmann::json to_json(const ArchSummary& s);

// Exact (correctly rounded) mean: the values are sorted, summed without
// intermediate rounding, and the quotient corrected by one residual pass.
// A constant input returns that constant.
double exact_mean(std::span<const double> values);

// Throws ConfigError listing missing cells for an incomplete matrix.
ArchSummary summarize(const CrossMagMatrix& m);

struct RobustnessReport {
  using Ranking = std::vector<std::pair<std::string, double>>;
  Ranking by_overall_mean;  // descending, ties by name
  Ranking by_diagonal_mean;
  Ranking by_min_cell;
  std::vector<std::pair<std::string, double>> generalization_gap;  // in input order
  std::string dataset_fingerprint;
};

nlohmann::json to_json(const RobustnessReport& r);

// Refuses summaries computed on different dataset snapshots.
RobustnessReport compare(const std::vector<ArchSummary>& summaries);

// Reference expectations for the observed rankings: WaveMixNet leads overall
// mean and min cell, ConvMixerNet leads diagonal mean. An expectation agrees
// when the expected architecture attains the top value (ties count); it is
// not evaluated when that architecture is absent.
struct TrendCheck {
  std::string statistic;
  std::string expected_leader;
  std::string observed_leader;
  std::optional<bool> agrees;
};
std::vector<TrendCheck> check_reference_trends(const RobustnessReport& r);

}  // namespace magmix
