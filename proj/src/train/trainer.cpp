#include "train/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "common/hash.hpp"
#include "common/log.hpp"

namespace magmix {

void TrainConfig::validate() const {
  if (epochs < 0 || epochs > kMaxEpochs) {
    throw ConfigError("epochs=" + std::to_string(epochs) + " outside [0, " + std::to_string(kMaxEpochs) +
                      "]; the training protocol caps epochs at " + std::to_string(kMaxEpochs));
  }
  if (batch_size < 1 || batch_size > kMaxBatch) {
    throw ConfigError("batch_size=" + std::to_string(batch_size) + " outside [1, " + std::to_string(kMaxBatch) + "]");
  }
  if (patience < 0) throw ConfigError("patience must be >= 0");
  if (!(optim.lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0)) throw ConfigError("beta1 must be in [0, 1)");
  if (!(optim.beta2 >= 0.0 && optim.beta2 < 1.0)) throw ConfigError("beta2 must be in [0, 1)");
  if (!(optim.eps > 0.0)) throw ConfigError("eps must be positive");
  if (!(optim.weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  return nlohmann::json{{"epochs", c.epochs},
                        {"batch_size", c.batch_size},
                        {"lr", c.optim.lr},
                        {"beta1", c.optim.beta1},
                        {"beta2", c.optim.beta2},
                        {"eps", c.optim.eps},
                        {"weight_decay", c.optim.weight_decay},
                        {"schedule", "cosine"},
                        {"patience", c.patience},
                        {"stop_at_perfect_val", c.stop_at_perfect_val}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "epochs") c.epochs = value.get<int>();
      else if (key == "batch_size") c.batch_size = value.get<int>();
      else if (key == "lr") c.optim.lr = value.get<double>();
      else if (key == "beta1") c.optim.beta1 = value.get<double>();
      else if (key == "beta2") c.optim.beta2 = value.get<double>();
      else if (key == "eps") c.optim.eps = value.get<double>();
      else if (key == "weight_decay") c.optim.weight_decay = value.get<double>();
      else if (key == "patience") c.patience = value.get<int>();
      else if (key == "stop_at_perfect_val") c.stop_at_perfect_val = value.get<bool>();
      else if (key == "schedule") {
        if (value.get<std::string>() != "cosine") throw ConfigError("train config: only the cosine schedule is supported");
      } else throw ConfigError("train config: unknown field '" + key + "'");
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("train config: field '" + key + "' has the wrong type");
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json eval_json(const EvalResult& e) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& c : e.per_class) per.push_back({{"class", c.name}, {"correct", c.correct}, {"total", c.total}});
  return {{"top1", e.top1}, {"correct", e.correct}, {"total", e.total}, {"per_class", per}};
}

EvalResult eval_from_json(const nlohmann::json& j) {
  EvalResult e;
  e.top1 = j.at("top1").get<double>();
  e.correct = j.at("correct").get<std::size_t>();
  e.total = j.at("total").get<std::size_t>();
  for (const auto& c : j.at("per_class"))
    e.per_class.push_back({c.at("class").get<std::string>(), c.at("correct").get<std::size_t>(),
                           c.at("total").get<std::size_t>()});
  return e;
}

}  // namespace

nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& h : r.history)
    hist.push_back({{"epoch", h.epoch}, {"train_loss", h.train_loss}, {"train_top1", h.train_top1},
                    {"val_top1", h.val_top1}});
  return nlohmann::json{{"arch", r.arch},
                        {"model_config", r.model_config},
                        {"train_config", r.train_config},
                        {"seed", r.seed},
                        {"train_mag", r.train_mag},
                        {"dataset_fingerprint", r.dataset_fingerprint},
                        {"history", hist},
                        {"best_epoch", r.best_epoch},
                        {"best_val_top1", r.best_val_top1},
                        {"stop_reason", r.stop_reason},
                        {"test", r.test ? eval_json(*r.test) : nlohmann::json(nullptr)},
                        {"wall_time_s", r.wall_time_s ? nlohmann::json(*r.wall_time_s) : nlohmann::json(nullptr)},
                        {"checkpoint", r.checkpoint},
                        {"substitutions", r.substitutions}};
}

RunRecord run_record_from_json(const nlohmann::json& j) {
  try {
    RunRecord r;
    r.arch = j.at("arch").get<std::string>();
    r.model_config = j.at("model_config");
    r.train_config = j.at("train_config");
    r.seed = j.at("seed").get<std::uint64_t>();
    r.train_mag = j.at("train_mag").get<std::string>();
    r.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
    for (const auto& h : j.at("history"))
      r.history.push_back({h.at("epoch").get<int>(), h.at("train_loss").get<double>(), h.at("train_top1").get<double>(),
                           h.at("val_top1").get<double>()});
    r.best_epoch = j.at("best_epoch").get<int>();
    r.best_val_top1 = j.at("best_val_top1").get<double>();
    r.stop_reason = j.at("stop_reason").get<std::string>();
    if (!j.at("test").is_null()) r.test = eval_from_json(j.at("test"));
    if (!j.at("wall_time_s").is_null()) r.wall_time_s = j.at("wall_time_s").get<double>();
    r.checkpoint = j.at("checkpoint").get<std::string>();
    r.substitutions = j.at("substitutions").get<std::vector<std::string>>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed run record: ") + e.what());
  }
}

std::string history_csv(const RunRecord& r) {
  std::string out = "epoch,train_loss,val_top1\n";
  char line[96];
  for (const auto& h : r.history) {
    std::snprintf(line, sizeof(line), "%d,%.9g,%.9g\n", h.epoch, h.train_loss, h.val_top1);
    out += line;
  }
  return out;
}

// ---------------------------------------------------------------------------

int argmax_lowest(std::span<const float> row) {
  int best = 0;
  for (std::size_t k = 1; k < row.size(); ++k)
    if (row[k] > row[best]) best = static_cast<int>(k);
  return best;
}

std::vector<int> ModelClassifier::predict(const MagDataset& ds, std::span<const std::size_t> idx) {
  const ModelConfig& cfg = model_.config();
  Index h = ds.height, w = ds.width;
  if (!accepts_any_resolution(cfg.family)) {
    h = cfg.input_h;
    w = cfg.input_w;
  }
  const Tensor<float> logits =
      model_.predict(make_batch<float>(ds, std::vector<std::size_t>(idx.begin(), idx.end()), h, w));
  const Index k = logits.dim(1);
  std::vector<int> out;
  for (Index i = 0; i < logits.dim(0); ++i)
    out.push_back(argmax_lowest(std::span<const float>(logits.data() + i * k, static_cast<std::size_t>(k))));
  return out;
}

std::vector<int> OracleClassifier::predict(const MagDataset& ds, std::span<const std::size_t> idx) {
  return batch_labels(ds, std::vector<std::size_t>(idx.begin(), idx.end()));
}

std::vector<int> ConstantClassifier::predict(const MagDataset&, std::span<const std::size_t> idx) {
  return std::vector<int>(idx.size(), cls_);
}

EvalResult evaluate(Classifier& clf, const MagDataset& ds, const std::vector<std::size_t>& idx, int batch_size) {
  if (idx.empty()) throw ConfigError("evaluate: empty test set");
  if (batch_size < 1) throw ConfigError("evaluate: batch_size must be >= 1");
  EvalResult r;
  for (const auto& name : ds.class_names) r.per_class.push_back({name, 0, 0});
  for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(batch_size));
    const std::span<const std::size_t> chunk(idx.data() + start, end - start);
    const std::vector<int> pred = clf.predict(ds, chunk);
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      const int label = ds.items[chunk[k]].class_id;
      auto& pc = r.per_class.at(static_cast<std::size_t>(label));
      ++pc.total;
      if (pred[k] == label) {
        ++pc.correct;
        ++r.correct;
      }
    }
  }
  r.total = idx.size();
  r.top1 = static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> substitutions(const TrainConfig& cfg) {
  char buf[160];
  std::vector<std::string> out;
  std::snprintf(buf, sizeof(buf), "optimizer AdamW lr=%g betas=(%g,%g) eps=%g weight_decay=%g", cfg.optim.lr,
                cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps, cfg.optim.weight_decay);
  out.emplace_back(buf);
  out.emplace_back("per-step cosine learning-rate decay to 0");
  std::snprintf(buf, sizeof(buf), "epoch budget %d (protocol cap %d)", cfg.epochs, kMaxEpochs);
  out.emplace_back(buf);
  if (cfg.patience > 0) {
    std::snprintf(buf, sizeof(buf), "early stopping after %d epochs without validation improvement", cfg.patience);
    out.emplace_back(buf);
  }
  out.emplace_back("checkpoint = best validation top-1 epoch");
  out.emplace_back("no data augmentation");
  return out;
}

[[noreturn]] void rethrow_with(const Error& e, const std::string& prefix) {
  throw Error(e.kind(), prefix + e.what());
}

}  // namespace

RunRecord train(Model<float>& model, const MagDataset& ds, const std::vector<std::size_t>& train_idx,
                const std::vector<std::size_t>& val_idx, const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  RunRecord rec;
  rec.arch = std::string(to_string(model.config().family));
  rec.model_config = to_json(model.config());
  rec.train_config = to_json(cfg);
  rec.seed = seed;
  rec.substitutions = substitutions(cfg);
  if (cfg.epochs > 0 && train_idx.empty()) throw ConfigError("train: empty training set");
  if (cfg.epochs > 0 && val_idx.empty() && cfg.patience > 0) {
    throw ConfigError("train: early stopping requested but the validation set is empty");
  }
  const auto t0 = std::chrono::steady_clock::now();

  const Index h = model.config().input_h, w = model.config().input_w;
  const auto params = model.store().parameters();
  AdamWState<float> opt;
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::int64_t steps_per_epoch = static_cast<std::int64_t>((train_idx.size() + bs - 1) / bs);
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  std::int64_t step = 0;

  std::vector<Tensor<float>> best_state = model.snapshot();
  double best_val = -1.0;
  int since_best = 0;
  ModelClassifier clf(model);
  rec.stop_reason = cfg.epochs == 0 ? "no epochs requested" : "epoch budget exhausted";

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    Rng rng(derive_seed(seed, 0x73687566ULL, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order.begin(), order.end());
    model.set_training(true);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += bs, ++step) {
      const std::vector<std::size_t> chunk(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + bs)));
      const std::vector<int> labels = batch_labels(ds, chunk);
      try {
        Tape<float> tape;
        Var<float> logits = model.forward(tape, tape.input(make_batch<float>(ds, chunk, h, w)));
        Var<float> loss = softmax_cross_entropy(logits, std::span<const int>(labels));
        tape.backward(loss);
        adamw_step<float>(params, opt, cosine_lr(cfg.optim.lr, step, total_steps), cfg.optim);
        model.store().zero_grad();
        loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(chunk.size());
        const Index k = logits.dim(1);
        for (std::size_t i = 0; i < chunk.size(); ++i) {
          const int p = argmax_lowest(std::span<const float>(logits.value().data() + static_cast<Index>(i) * k,
                                                             static_cast<std::size_t>(k)));
          if (p == labels[i]) ++correct;
        }
      } catch (const NumericError& e) {
        rethrow_with(e, "training aborted at epoch " + std::to_string(epoch) + " step " + std::to_string(step) + ": ");
      }
    }
    EpochStats st;
    st.epoch = epoch;
    st.train_loss = loss_sum / static_cast<double>(order.size());
    st.train_top1 = static_cast<double>(correct) / static_cast<double>(order.size());
    model.set_training(false);
    st.val_top1 = val_idx.empty() ? 0.0 : evaluate(clf, ds, val_idx, kMaxBatch).top1;
    rec.history.push_back(st);
    log::debug(rec.arch, " seed ", seed, " epoch ", epoch, " loss ", st.train_loss, " val ", st.val_top1);

    if (val_idx.empty() || st.val_top1 > best_val) {
      best_val = st.val_top1;
      best_state = model.snapshot();
      rec.best_epoch = epoch;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (!val_idx.empty() && cfg.stop_at_perfect_val && st.val_top1 >= 1.0) {
      rec.stop_reason = "validation accuracy reached 1.0";
      break;
    }
    if (cfg.patience > 0 && since_best >= cfg.patience) {
      rec.stop_reason = "no validation improvement for " + std::to_string(cfg.patience) + " epochs";
      break;
    }
  }
  model.restore(best_state);
  model.set_training(false);
  rec.best_val_top1 = best_val < 0.0 ? 0.0 : best_val;
  if (cfg.record_wall_time) {
    rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return rec;
}

std::size_t select_best(std::span<const RunRecord> records) {
  if (records.empty()) throw ConfigError("select_best: no runs");
  auto key = [](const RunRecord& r) { return r.test ? r.test->top1 : -1.0; };
  std::size_t best = 0;
  for (std::size_t i = 1; i < records.size(); ++i) {
    const RunRecord& a = records[i];
    const RunRecord& b = records[best];
    if (key(a) != key(b)) {
      if (key(a) > key(b)) best = i;
    } else if (a.best_val_top1 != b.best_val_top1) {
      if (a.best_val_top1 > b.best_val_top1) best = i;
    } else if (a.seed < b.seed) {
      best = i;
    }
  }
  return best;
}

BestOfRuns best_of_runs(const ModelConfig& model_cfg, const MagDataset& ds, const std::vector<std::size_t>& train_idx,
                        const std::vector<std::size_t>& val_idx, const std::vector<std::size_t>& test_idx,
                        const TrainConfig& cfg, const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("best_of_runs: at least one seed is required");
  for (std::size_t i = 0; i < seeds.size(); ++i)
    for (std::size_t j = i + 1; j < seeds.size(); ++j)
      if (seeds[i] == seeds[j]) throw ConfigError("best_of_runs: seeds must be distinct");
  BestOfRuns out;
  for (std::uint64_t seed : seeds) {
    try {
      auto model = std::make_unique<Model<float>>(model_cfg, seed);
      RunRecord rec = train(*model, ds, train_idx, val_idx, cfg, seed);
      rec.dataset_fingerprint = ds.fingerprint();
      ModelClassifier clf(*model);
      rec.test = evaluate(clf, ds, test_idx, kMaxBatch);
      out.runs.push_back({std::move(rec), std::move(model)});
    } catch (const Error& e) {
      rethrow_with(e, "run seed " + std::to_string(seed) + ": ");
    }
  }
  std::vector<RunRecord> recs;
  for (const auto& r : out.runs) recs.push_back(r.record);
  out.best = select_best(recs);
  return out;
}

}  // namespace magmix
