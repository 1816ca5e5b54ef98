#include "protocol/runner.hpp"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "common/hash.hpp"
#include "common/log.hpp"

namespace magmix {

namespace fs = std::filesystem;

nlohmann::json defaults_json() {
  nlohmann::json models = nlohmann::json::object();
  for (Family f : kAllFamilies) models[std::string(to_string(f))] = to_json(ModelConfig::defaults(f));
  const SynthConfig synth;
  const MatrixRequest req;
  return nlohmann::json{
      {"version", std::string(kDefaultsVersion)},
      {"model", models},
      {"train", to_json(TrainConfig{})},
      {"data", {{"per_class", synth.per_class}, {"size", synth.out_size}, {"imbalance", synth.imbalance}, {"seed", synth.seed}}},
      {"split", {{"ratios", {7, 1, 2}}, {"seed", req.split_seed}}},
      {"protocol", {{"runs", req.seeds.size()}, {"jobs", req.jobs}, {"eval_batch_size", kMaxBatch}}}};
}

ModelConfig MatrixRequest::model_config(const MagDataset& ds) const {
  nlohmann::json j = to_json(ModelConfig::defaults(parse_family(arch)));
  j["input_h"] = ds.height;
  j["input_w"] = ds.width;
  j["num_classes"] = static_cast<int>(std::max<std::size_t>(2, ds.class_names.size()));
  for (const auto& [k, v] : model_overrides.items()) j[k] = v;
  return model_config_from_json(j);
}

namespace {

void write_text(const fs::path& p, const std::string& text) {
  std::error_code ec;
  fs::create_directories(p.parent_path(), ec);
  if (ec) throw IoError("cannot create '" + p.parent_path().string() + "': " + ec.message());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + p.string() + "'");
  f << text;
  if (!f) throw IoError("failed writing '" + p.string() + "'");
}

std::optional<nlohmann::json> read_json_if_exists(const fs::path& p) {
  std::error_code ec;
  if (!fs::exists(p, ec)) return std::nullopt;
  std::ifstream f(p);
  if (!f) return std::nullopt;
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

bool is_oracle(const MatrixRequest& req) { return req.arch == kOracleArch; }

std::string row_key(const MatrixRequest& req, const MagDataset& ds) {
  Fnv1a h;
  h.update(req.arch);
  if (!is_oracle(req)) {
    h.update(to_json(req.model_config(ds)).dump());
    h.update(to_json(req.train).dump());
  }
  for (auto s : req.seeds) h.update_value(s);
  h.update_value(req.split_seed);
  h.update(ds.fingerprint());
  return h.hex();
}

std::string mag_label(int i) { return std::string(kMagLevels[i].label); }

}  // namespace

RowResult run_row(const MatrixRequest& req, const MagDataset& ds, const Split& split, int mag) {
  const fs::path root(req.results_dir);
  const fs::path row_dir = root / req.arch / mag_label(mag);
  const std::string key = row_key(req, ds);
  RowResult out;
  out.train_mag = mag;

  if (req.resume) {
    if (auto j = read_json_if_exists(row_dir / "row.json")) {
      try {
        if (j->at("key").get<std::string>() == key) {
          const auto acc = j->at("accuracies").get<std::vector<double>>();
          if (acc.size() == kNumMags) {
            std::copy(acc.begin(), acc.end(), out.accuracies.begin());
            out.best_seed = j->at("best_seed").get<std::uint64_t>();
            out.best_record = j->at("best_record").get<std::string>();
            out.resumed = true;
            log::info(req.arch, " ", mag_label(mag), ": resumed from ", (row_dir / "row.json").string());
            return out;
          }
        }
      } catch (const nlohmann::json::exception&) {
        // stale or hand-edited row file: recompute
      }
    }
  }

  std::vector<std::vector<std::size_t>> tests(kNumMags);
  for (int j = 0; j < kNumMags; ++j) tests[j] = filter_mag(ds, split.test, j);

  if (is_oracle(req)) {
    OracleClassifier oracle;
    for (int j = 0; j < kNumMags; ++j) out.accuracies[j] = evaluate(oracle, ds, tests[j], kMaxBatch).top1;
    out.best_seed = req.seeds.empty() ? 0 : req.seeds.front();
  } else {
    const ModelConfig cfg = req.model_config(ds);
    const auto train_idx = filter_mag(ds, split.train, mag);
    const auto val_idx = filter_mag(ds, split.val, mag);
    log::info(req.arch, " ", mag_label(mag), ": training ", req.seeds.size(), " run(s) on ", train_idx.size(),
              " images");
    BestOfRuns b = best_of_runs(cfg, ds, train_idx, val_idx, tests[mag], req.train, req.seeds);
    for (auto& run : b.runs) {
      RunRecord& rec = run.record;
      rec.train_mag = mag_label(mag);
      const fs::path run_dir = row_dir / ("run_" + std::to_string(rec.seed));
      rec.checkpoint = "checkpoint.mmix";
      fs::create_directories(run_dir);
      save_checkpoint((run_dir / rec.checkpoint).string(), *run.model);
      write_text(run_dir / "record.json", to_json(rec).dump(2) + "\n");
      write_text(run_dir / "history.csv", history_csv(rec));
    }
    RunResult& best = b.runs[b.best];
    out.best_seed = best.record.seed;
    out.best_record = (fs::path(req.arch) / mag_label(mag) / ("run_" + std::to_string(out.best_seed)) / "record.json")
                          .generic_string();
    ModelClassifier clf(*best.model);
    for (int j = 0; j < kNumMags; ++j) {
      out.accuracies[j] = j == mag ? best.record.test->top1 : evaluate(clf, ds, tests[j], kMaxBatch).top1;
    }
    log::info(req.arch, " ", mag_label(mag), ": best seed ", out.best_seed, " same-magnification test top-1 ",
              out.accuracies[mag]);
  }

  const nlohmann::json row{{"arch", req.arch},
                           {"train_mag", mag_label(mag)},
                           {"key", key},
                           {"accuracies", out.accuracies},
                           {"best_seed", out.best_seed},
                           {"best_record", out.best_record}};
  write_text(row_dir / "row.json", row.dump(2) + "\n");
  return out;
}

CrossMagMatrix run_matrix(const MatrixRequest& req, const MagDataset& ds) {
  if (!is_oracle(req)) {
    parse_family(req.arch);
    req.train.validate();
  }
  if (req.seeds.empty()) throw ConfigError("run_matrix: at least one run is required");
  if (req.jobs < 1) throw ConfigError("run_matrix: jobs must be >= 1");
  std::array<std::size_t, kNumMags> per_mag{};
  for (const auto& it : ds.items) ++per_mag[it.mag];
  for (int m = 0; m < kNumMags; ++m)
    if (per_mag[m] == 0) throw ConfigError("run_matrix: dataset has no images at " + mag_label(m));

  CrossMagMatrix matrix;
  matrix.arch = req.arch;
  matrix.dataset_fingerprint = ds.fingerprint();
  if (!is_oracle(req)) {
    Model<float> probe(req.model_config(ds), 0);
    const ModelProfile p = probe.profile(ds.height, ds.width);
    matrix.param_count = p.param_count;
    matrix.activation_elems = p.activation_elems;
  }
  const Split split = split_dataset(ds, req.split_seed);

  std::array<std::optional<RowResult>, kNumMags> rows;
  std::atomic<int> next{0};
  std::mutex mu;
  auto worker = [&] {
    for (int mag = next++; mag < kNumMags; mag = next++) {
      try {
        RowResult r = run_row(req, ds, split, mag);
        std::lock_guard lock(mu);
        rows[mag] = r;
      } catch (const Error& e) {
        log::warn(req.arch, " ", mag_label(mag), ": row failed: ", e.what());
        std::lock_guard lock(mu);
        matrix.row_errors[mag] = e.what();
        matrix.row_error_kinds[mag] = e.kind();
      } catch (const std::exception& e) {
        log::warn(req.arch, " ", mag_label(mag), ": row failed: ", e.what());
        std::lock_guard lock(mu);
        matrix.row_errors[mag] = e.what();
        matrix.row_error_kinds[mag] = ErrorKind::Io;
      }
    }
  };
  const int n_threads = std::min(req.jobs, kNumMags);
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (int i = 0; i < kNumMags; ++i) {
    if (!rows[i]) continue;
    for (int j = 0; j < kNumMags; ++j) {
      matrix.set(i, j, rows[i]->accuracies[j]);
      matrix.cells[i][j].run_seed = rows[i]->best_seed;
      matrix.cells[i][j].record = rows[i]->best_record;
    }
  }
  write_text(fs::path(req.results_dir) / req.arch / "matrix.json", to_json(matrix).dump(2) + "\n");
  return matrix;
}

std::vector<CrossMagMatrix> load_matrices(const std::string& results_dir) {
  std::error_code ec;
  if (!fs::is_directory(results_dir, ec)) throw IoError("results directory '" + results_dir + "' does not exist");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(results_dir, ec))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<CrossMagMatrix> out;
  for (const auto& d : dirs) {
    const fs::path p = d / "matrix.json";
    if (!fs::exists(p, ec)) continue;
    std::ifstream f(p);
    if (!f) throw IoError("cannot read '" + p.string() + "'");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed '" + p.string() + "': " + e.what());
    }
    out.push_back(matrix_from_json(j));
  }
  if (out.empty()) throw IoError("no matrix.json files under '" + results_dir + "'");
  return out;
}

}  // namespace magmix
