#include "magmix/magmix.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <new>
#include <string>

#include "common/log.hpp"
#include "protocol/report.hpp"
#include "protocol/runner.hpp"
#include "tensor/gemm.hpp"

struct mmx_dataset {
  magmix::MagDataset ds;
};

struct mmx_model {
  std::unique_ptr<magmix::Model<float>> model;
};

namespace {

using namespace magmix;
using json = nlohmann::json;

thread_local std::string g_last_error;

mmx_status status_of(ErrorKind k) {
  switch (k) {
    case ErrorKind::Invalid: return MMX_ERR_INVALID;
    case ErrorKind::Io: return MMX_ERR_IO;
    case ErrorKind::Numeric: return MMX_ERR_NUMERIC;
  }
  return MMX_ERR_INTERNAL;
}

template <typename F>
mmx_status guard(F&& f) {
  try {
    g_last_error.clear();
    return f();
  } catch (const Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const json::exception& e) {
    g_last_error = std::string("invalid JSON: ") + e.what();
    return MMX_ERR_INVALID;
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return MMX_ERR_IO;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return MMX_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return MMX_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return MMX_ERR_INTERNAL;
  }
}

mmx_status fail(mmx_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

json parse_request(const char* text) {
  if (!text || !*text) return json::object();
  json j = json::parse(text);
  if (!j.is_object()) throw ConfigError("request must be a JSON object");
  return j;
}

// Builds a matrix request from the shared request keys.
MatrixRequest matrix_request(const json& j) {
  static const char* const kKeys[] = {"arch", "train_mag", "runs", "seed", "split_seed", "results_dir",
                                      "deterministic", "resume", "model", "train", "jobs"};
  for (const auto& [k, v] : j.items()) {
    if (std::find_if(std::begin(kKeys), std::end(kKeys), [&](const char* s) { return k == s; }) == std::end(kKeys)) {
      throw ConfigError("unknown request field '" + k + "'");
    }
  }
  MatrixRequest req;
  if (!j.contains("arch")) throw ConfigError("request needs an 'arch'");
  req.arch = j.at("arch").get<std::string>();
  if (req.arch != kOracleArch) parse_family(req.arch);
  const int runs = j.value("runs", static_cast<int>(req.seeds.size()));
  if (runs < 1) throw ConfigError("runs must be >= 1");
  const std::uint64_t seed = j.value("seed", std::uint64_t{0});
  req.seeds.clear();
  for (int r = 0; r < runs; ++r) req.seeds.push_back(seed + static_cast<std::uint64_t>(r));
  req.split_seed = j.value("split_seed", req.split_seed);
  req.results_dir = j.value("results_dir", req.results_dir);
  req.resume = j.value("resume", req.resume);
  req.jobs = j.value("jobs", req.jobs);
  if (j.contains("model")) {
    if (!j.at("model").is_object()) throw ConfigError("'model' must be an object");
    req.model_overrides = j.at("model");
  }
  if (j.contains("train")) req.train = train_config_from_json(j.at("train"));
  if (j.value("deterministic", false)) {
    req.train.record_wall_time = false;
    req.jobs = 1;
  }
  return req;
}

json row_json(const RowResult& r) {
  return json{{"train_mag", std::string(kMagLevels[r.train_mag].label)},
              {"accuracies", r.accuracies},
              {"best_seed", r.best_seed},
              {"best_record", r.best_record}};
}

json effective(const MatrixRequest& req, const MagDataset& ds) {
  json e{{"arch", req.arch},
         {"seeds", req.seeds},
         {"split_seed", req.split_seed},
         {"jobs", req.jobs},
         {"resume", req.resume},
         {"record_wall_time", req.train.record_wall_time},
         {"dataset_fingerprint", ds.fingerprint()}};
  if (req.arch != kOracleArch) {
    e["model_config"] = to_json(req.model_config(ds));
    e["train_config"] = to_json(req.train);
  }
  return e;
}

}  // namespace

extern "C" {

const char* mmx_version(void) { return "1.0.0"; }

const char* mmx_last_error(void) { return g_last_error.c_str(); }

void mmx_string_free(char* s) { std::free(s); }

mmx_status mmx_set_threads(int n) {
  if (n < 1) return fail(MMX_ERR_INVALID, "threads must be >= 1");
  set_num_threads(n);
  return MMX_OK;
}

mmx_status mmx_set_log_level(int level) {
  if (level < 0 || level > 4) return fail(MMX_ERR_INVALID, "log level must be in [0, 4]");
  log::set_level(static_cast<log::Level>(level));
  return MMX_OK;
}

mmx_status mmx_defaults_json(char** out_json) {
  if (!out_json) return fail(MMX_ERR_INVALID, "null output pointer");
  return guard([&] {
    *out_json = dup_string(defaults_json().dump(2));
    return MMX_OK;
  });
}

mmx_status mmx_dataset_generate(uint64_t seed, int per_class, int size, double imbalance, mmx_dataset** out) {
  if (!out) return fail(MMX_ERR_INVALID, "null output pointer");
  return guard([&] {
    SynthConfig cfg;
    cfg.seed = seed;
    cfg.per_class = per_class;
    cfg.out_size = size;
    cfg.imbalance = imbalance;
    auto h = std::make_unique<mmx_dataset>();
    h->ds = generate_synthetic(cfg);
    *out = h.release();
    return MMX_OK;
  });
}

mmx_status mmx_dataset_load(const char* root, mmx_dataset** out) {
  if (!root || !out) return fail(MMX_ERR_INVALID, "null argument");
  return guard([&] {
    auto h = std::make_unique<mmx_dataset>();
    h->ds = load_image_folder(root);
    *out = h.release();
    return MMX_OK;
  });
}

mmx_status mmx_dataset_save(const mmx_dataset* ds, const char* root, const char* manifest_extra_json) {
  if (!ds || !root) return fail(MMX_ERR_INVALID, "null argument");
  return guard([&] {
    write_dataset(ds->ds, root, parse_request(manifest_extra_json));
    return MMX_OK;
  });
}

size_t mmx_dataset_size(const mmx_dataset* ds) { return ds ? ds->ds.size() : 0; }

mmx_status mmx_dataset_fingerprint(const mmx_dataset* ds, char** out) {
  if (!ds || !out) return fail(MMX_ERR_INVALID, "null argument");
  return guard([&] {
    *out = dup_string(ds->ds.fingerprint());
    return MMX_OK;
  });
}

void mmx_dataset_free(mmx_dataset* ds) { delete ds; }

mmx_status mmx_train(const mmx_dataset* ds, const char* request_json, char** out_json) {
  if (!ds || !out_json) return fail(MMX_ERR_INVALID, "null argument");
  return guard([&] {
    const json j = parse_request(request_json);
    MatrixRequest req = matrix_request(j);
    if (req.arch == kOracleArch) throw ConfigError("the oracle stub cannot be trained; use it with the matrix command");
    req.train.validate();
    const int mag = parse_mag(j.value("train_mag", std::string("40X")));
    const Split split = split_dataset(ds->ds, req.split_seed);
    const RowResult r = run_row(req, ds->ds, split, mag);
    json out = row_json(r);
    out["effective"] = effective(req, ds->ds);
    *out_json = dup_string(out.dump(2));
    return MMX_OK;
  });
}

mmx_status mmx_check_request(const char* request_json) {
  return guard([&] {
    const json j = parse_request(request_json);
    const MatrixRequest req = matrix_request(j);
    req.train.validate();
    if (j.contains("train_mag")) parse_mag(j.at("train_mag").get<std::string>());
    if (req.jobs < 1) throw ConfigError("jobs must be >= 1");
    if (req.arch != kOracleArch) {
      nlohmann::json m = to_json(ModelConfig::defaults(parse_family(req.arch)));
      for (const auto& [k, v] : req.model_overrides.items()) m[k] = v;
      model_config_from_json(m);
    }
    return MMX_OK;
  });
}

mmx_status mmx_matrix(const mmx_dataset* ds, const char* request_json, char** out_json) {
  if (!ds || !out_json) return fail(MMX_ERR_INVALID, "null argument");
  *out_json = nullptr;
  return guard([&] {
    const MatrixRequest req = matrix_request(parse_request(request_json));
    const CrossMagMatrix m = run_matrix(req, ds->ds);
    json out{{"matrix", to_json(m)}, {"effective", effective(req, ds->ds)}};
    if (m.complete()) out["summary"] = to_json(summarize(m));
    *out_json = dup_string(out.dump(2));
    for (int i = 0; i < kNumMags; ++i) {
      if (m.row_error_kinds[i]) {
        return fail(status_of(*m.row_error_kinds[i]),
                    req.arch + " " + std::string(kMagLevels[i].label) + ": " + m.row_errors[i]);
      }
    }
    return MMX_OK;
  });
}

mmx_status mmx_report(const char* results_dir, const char* out_dir, const char* format, char** out_json) {
  if (!results_dir) return fail(MMX_ERR_INVALID, "null results directory");
  return guard([&] {
    const ReportFormat f = parse_report_format(format ? format : "all");
    const std::vector<CrossMagMatrix> matrices = load_matrices(results_dir);
    std::vector<ArchSummary> summaries;
    for (const auto& m : matrices)
      if (m.complete()) summaries.push_back(summarize(m));
    std::optional<RobustnessReport> report;
    if (!summaries.empty()) report = compare(summaries);
    const auto files = emit_report(matrices, summaries, report ? &*report : nullptr, out_dir ? out_dir : results_dir, f);
    if (out_json) {
      json out{{"files", files}};
      json ss = json::array();
      for (const auto& s : summaries) ss.push_back(to_json(s));
      out["summaries"] = ss;
      if (report) {
        out["report"] = to_json(*report);
        json trends = json::array();
        for (const auto& t : check_reference_trends(*report)) {
          trends.push_back({{"statistic", t.statistic},
                            {"expected_leader", t.expected_leader},
                            {"observed_leader", t.observed_leader},
                            {"agrees", t.agrees ? json(*t.agrees) : json(nullptr)}});
        }
        out["reference_trends"] = trends;
      }
      *out_json = dup_string(out.dump(2));
    }
    return MMX_OK;
  });
}

mmx_status mmx_profile(const char* model_config_json, char** out_json) {
  if (!out_json) return fail(MMX_ERR_INVALID, "null output pointer");
  return guard([&] {
    const ModelConfig cfg = model_config_from_json(parse_request(model_config_json));
    Model<float> m(cfg, 0);
    const ModelProfile p = m.profile(cfg.input_h, cfg.input_w);
    const json out{{"arch", std::string(to_string(cfg.family))},
                   {"model_config", to_json(cfg)},
                   {"param_count", p.param_count},
                   {"activation_elems", p.activation_elems},
                   {"mult_adds", p.mult_adds}};
    *out_json = dup_string(out.dump(2));
    return MMX_OK;
  });
}

mmx_status mmx_model_load(const char* checkpoint_path, mmx_model** out) {
  if (!checkpoint_path || !out) return fail(MMX_ERR_INVALID, "null argument");
  return guard([&] {
    auto h = std::make_unique<mmx_model>();
    h->model = load_checkpoint<float>(checkpoint_path);
    *out = h.release();
    return MMX_OK;
  });
}

mmx_status mmx_model_config_json(const mmx_model* m, char** out_json) {
  if (!m || !out_json) return fail(MMX_ERR_INVALID, "null argument");
  return guard([&] {
    *out_json = dup_string(to_json(m->model->config()).dump(2));
    return MMX_OK;
  });
}

mmx_status mmx_model_evaluate(mmx_model* m, const mmx_dataset* ds, const char* request_json, char** out_json) {
  if (!m || !ds || !out_json) return fail(MMX_ERR_INVALID, "null argument");
  return guard([&] {
    const json j = parse_request(request_json);
    for (const auto& [k, v] : j.items())
      if (k != "mag" && k != "split" && k != "split_seed" && k != "batch_size")
        throw ConfigError("unknown request field '" + k + "'");
    const std::string part = j.value("split", std::string("test"));
    const int batch = j.value("batch_size", kMaxBatch);
    std::vector<std::size_t> idx;
    if (part == "all") {
      for (std::size_t i = 0; i < ds->ds.size(); ++i) idx.push_back(i);
    } else {
      const Split s = split_dataset(ds->ds, j.value("split_seed", std::uint64_t{0}));
      if (part == "train") idx = s.train;
      else if (part == "val") idx = s.val;
      else if (part == "test") idx = s.test;
      else throw ConfigError("split must be train, val, test or all");
    }
    std::string mag_label = "all";
    if (j.contains("mag") && !j.at("mag").is_null()) {
      mag_label = j.at("mag").get<std::string>();
      idx = filter_mag(ds->ds, idx, parse_mag(mag_label));
    }
    ModelClassifier clf(*m->model);
    const EvalResult r = evaluate(clf, ds->ds, idx, batch);
    json per = json::array();
    for (const auto& c : r.per_class) per.push_back({{"class", c.name}, {"correct", c.correct}, {"total", c.total}});
    const json out{{"top1", r.top1}, {"correct", r.correct}, {"total", r.total}, {"per_class", per},
                   {"split", part}, {"mag", mag_label}, {"arch", std::string(to_string(m->model->config().family))}};
    *out_json = dup_string(out.dump(2));
    return MMX_OK;
  });
}

mmx_status mmx_model_predict(mmx_model* m, const float* images, size_t n, int c, int h, int w, int* out_classes) {
  if (!m || !images || !out_classes) return fail(MMX_ERR_INVALID, "null argument");
  if (n == 0 || c < 1 || h < 1 || w < 1) return fail(MMX_ERR_INVALID, "image dimensions must be positive");
  return guard([&] {
    const Index count = static_cast<Index>(n) * c * h * w;
    Tensor<float> batch({static_cast<Index>(n), Index{c}, Index{h}, Index{w}}, std::vector<float>(images, images + count));
    const Tensor<float> logits = m->model->predict(batch);
    const Index k = logits.dim(1);
    for (size_t i = 0; i < n; ++i) {
      out_classes[i] = argmax_lowest(std::span<const float>(logits.data() + static_cast<Index>(i) * k, static_cast<std::size_t>(k)));
    }
    return MMX_OK;
  });
}

void mmx_model_free(mmx_model* m) { delete m; }

}  // extern "C"
