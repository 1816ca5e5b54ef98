#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "protocol/matrix.hpp"
#include "train/trainer.hpp"

namespace magmix {

// Stub architecture that reads labels; exercises the protocol without training.
inline constexpr std::string_view kOracleArch = "oracle";

// Version of the defaults table below; echoed into every effective config.
inline constexpr std::string_view kDefaultsVersion = "2026.10-1";

// Every default the pipeline uses: per-family model configs, training,
// synthetic data, split and protocol settings.
nlohmann::json defaults_json();

struct MatrixRequest {
  std::string arch;                  // family name or kOracleArch
  nlohmann::json model_overrides = nlohmann::json::object();
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::uint64_t split_seed = 0;
  std::string results_dir = "results";
  int jobs = 1;
  bool resume = true;

  // Family defaults, then overrides, then the dataset resolution for the input size.
  ModelConfig model_config(const MagDataset& ds) const;
};

struct RowResult {
  int train_mag = 0;
  std::array<double, kNumMags> accuracies{};
  std::uint64_t best_seed = 0;
  std::string best_record;  // relative to results_dir
  bool resumed = false;
};

// Trains best-of-k on one training magnification and tests on all four.
// Writes <results>/<arch>/<mag>/run_<seed>/{checkpoint.mmix,record.json,history.csv}
// and <results>/<arch>/<mag>/row.json.
RowResult run_row(const MatrixRequest& req, const MagDataset& ds, const Split& split, int train_mag);

// All four rows (up to req.jobs concurrently); a failing row leaves its cells
// missing and its message in row_errors. Writes <results>/<arch>/matrix.json.
CrossMagMatrix run_matrix(const MatrixRequest& req, const MagDataset& ds);

// Reads every <results>/<arch>/matrix.json, sorted by arch.
std::vector<CrossMagMatrix> load_matrices(const std::string& results_dir);

}  // namespace magmix
