#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "data/dataset.hpp"
#include "models/model.hpp"
#include "tensor/optim.hpp"

namespace magmix {

inline constexpr int kMaxEpochs = 300;
inline constexpr int kMaxBatch = 128;

struct TrainConfig {
  int epochs = 50;
  int batch_size = 32;
  AdamWConfig optim;
  int patience = 10;  // epochs without a validation improvement; 0 disables early stopping
  // Stop once validation accuracy is 1.0. Best-epoch selection keeps the
  // first epoch reaching the maximum, so this never changes the returned model.
  bool stop_at_perfect_val = true;
  bool record_wall_time = true;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double train_top1 = 0.0;
  double val_top1 = 0.0;
};

struct ClassCount {
  std::string name;
  std::size_t correct = 0;
  std::size_t total = 0;
};

struct EvalResult {
  double top1 = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<ClassCount> per_class;
};

struct RunRecord {
  std::string arch;
  nlohmann::json model_config;
  nlohmann::json train_config;
  std::uint64_t seed = 0;
  std::string train_mag;
  std::string dataset_fingerprint;
  std::vector<EpochStats> history;
  int best_epoch = 0;  // 0 = initial weights
  double best_val_top1 = 0.0;
  std::string stop_reason;
  std::optional<EvalResult> test;
  std::optional<double> wall_time_s;
  std::string checkpoint;
  std::vector<std::string> substitutions;
};

nlohmann::json to_json(const RunRecord& r);
RunRecord run_record_from_json(const nlohmann::json& j);
std::string history_csv(const RunRecord& r);

// Anything that maps dataset items to class predictions.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual std::vector<int> predict(const MagDataset& ds, std::span<const std::size_t> idx) = 0;
};

// Argmax of a model's eval-mode logits; ties go to the lowest class index.
// Fixed-resolution models receive inputs resized to their configured size.
class ModelClassifier final : public Classifier {
 public:
  explicit ModelClassifier(Model<float>& model) : model_(model) {}
  std::vector<int> predict(const MagDataset& ds, std::span<const std::size_t> idx) override;

 private:
  Model<float>& model_;
};

// Reads the labels: the upper bound used to test plumbing.
class OracleClassifier final : public Classifier {
 public:
  std::vector<int> predict(const MagDataset& ds, std::span<const std::size_t> idx) override;
};

class ConstantClassifier final : public Classifier {
 public:
  explicit ConstantClassifier(int cls) : cls_(cls) {}
  std::vector<int> predict(const MagDataset& ds, std::span<const std::size_t> idx) override;

 private:
  int cls_;
};

// Index of the largest value; the lowest index wins ties.
int argmax_lowest(std::span<const float> row);

EvalResult evaluate(Classifier& clf, const MagDataset& ds, const std::vector<std::size_t>& idx, int batch_size);

// Trains in place and leaves the model at its best-validation epoch (in eval
// mode). The record carries history and selection but no test metrics.
RunRecord train(Model<float>& model, const MagDataset& ds, const std::vector<std::size_t>& train_idx,
                const std::vector<std::size_t>& val_idx, const TrainConfig& cfg, std::uint64_t seed);

struct RunResult {
  RunRecord record;
  std::unique_ptr<Model<float>> model;
};

struct BestOfRuns {
  std::vector<RunResult> runs;
  std::size_t best = 0;
};

// k = seeds.size() independent trainings; each is tested on test_idx. The best
// run has the highest test top-1, then the highest best-validation top-1,
// then the lowest seed.
BestOfRuns best_of_runs(const ModelConfig& model_cfg, const MagDataset& ds, const std::vector<std::size_t>& train_idx,
                        const std::vector<std::size_t>& val_idx, const std::vector<std::size_t>& test_idx,
                        const TrainConfig& cfg, const std::vector<std::uint64_t>& seeds);

// Selection rule of best_of_runs over (test, val, seed) triples.
std::size_t select_best(std::span<const RunRecord> records);

}  // namespace magmix
