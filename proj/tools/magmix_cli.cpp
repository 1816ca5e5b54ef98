#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "magmix/magmix.h"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

struct Failure {
  int code;
  std::string message;
};

void check(mmx_status s) {
  if (s != MMX_OK) throw Failure{static_cast<int>(s), mmx_last_error()};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  mmx_string_free(s);
  return out;
}

void write_file(const fs::path& p, const std::string& text) {
  std::error_code ec;
  if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
  if (ec) throw Failure{kExitIo, "cannot create '" + p.parent_path().string() + "': " + ec.message()};
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << text;
  if (!f) throw Failure{kExitIo, "cannot write '" + p.string() + "'"};
}

json defaults() {
  char* out = nullptr;
  check(mmx_defaults_json(&out));
  return json::parse(take(out));
}

std::vector<std::string> families() {
  const json d = defaults();
  std::vector<std::string> out;
  for (const auto& [name, cfg] : d.at("model").items()) out.push_back(name);
  return out;
}

struct Global {
  std::uint64_t seed = 0;
  int threads = 0;
  bool deterministic = false;
  std::string out = "out";
  bool quiet = false;
  bool verbose = false;
};

void write_effective(const Global& g, const std::string& dir, const std::string& command, const json& flags,
                     const json& resolved) {
  const json d = defaults();
  json e{{"defaults_version", d.at("version")},
         {"command", command},
         {"global", {{"seed", g.seed}, {"threads", g.deterministic ? 1 : g.threads}, {"deterministic", g.deterministic},
                     {"out", g.out}}},
         {"flags", flags},
         {"defaults", d}};
  if (!resolved.is_null()) e["resolved"] = resolved;
  write_file(fs::path(dir) / "effective_config.json", e.dump(2) + "\n");
}

struct Dataset {
  mmx_dataset* h = nullptr;
  explicit Dataset(const std::string& root) { check(mmx_dataset_load(root.c_str(), &h)); }
  Dataset(const Dataset&) = delete;
  Dataset& operator=(const Dataset&) = delete;
  ~Dataset() { mmx_dataset_free(h); }
};

// Options shared by train and matrix.
struct RunOptions {
  std::string data;
  std::optional<int> runs, epochs, batch_size, patience, embed_dim, depth, patch_size;
  std::optional<double> lr, weight_decay;
  std::uint64_t split_seed = 0;
  bool no_resume = false;

  void add(CLI::App* c) {
    c->add_option("--data", data, "Dataset root (<MAG>/<class>/*.png)")->required();
    c->add_option("--runs", runs, "Runs per training magnification (best of k)");
    c->add_option("--epochs", epochs, "Epoch budget (at most 300)");
    c->add_option("--batch-size", batch_size, "Mini-batch size (at most 128)");
    c->add_option("--lr", lr, "Peak learning rate");
    c->add_option("--weight-decay", weight_decay, "Decoupled weight decay");
    c->add_option("--patience", patience, "Early-stopping patience in epochs (0 disables)");
    c->add_option("--embed-dim", embed_dim, "Channel width");
    c->add_option("--depth", depth, "Number of blocks");
    c->add_option("--patch-size", patch_size, "Patch size for patch-embedded families");
    c->add_option("--split-seed", split_seed, "Seed of the train/val/test split");
    c->add_flag("--no-resume", no_resume, "Recompute rows even when finished results exist");
  }

  json request(const Global& g, const std::string& arch) const {
    json r{{"arch", arch},
           {"seed", g.seed},
           {"split_seed", split_seed},
           {"results_dir", g.out},
           {"resume", !no_resume},
           {"deterministic", g.deterministic}};
    if (runs) r["runs"] = *runs;
    json train = json::object();
    if (epochs) train["epochs"] = *epochs;
    if (batch_size) train["batch_size"] = *batch_size;
    if (lr) train["lr"] = *lr;
    if (weight_decay) train["weight_decay"] = *weight_decay;
    if (patience) train["patience"] = *patience;
    if (!train.empty()) r["train"] = train;
    json model = json::object();
    if (embed_dim) model["embed_dim"] = *embed_dim;
    if (depth) model["depth"] = *depth;
    if (patch_size) model["patch_size"] = *patch_size;
    if (!model.empty()) r["model"] = model;
    return r;
  }
};

std::string percent_row(const json& acc) {
  std::ostringstream s;
  const char* mags[] = {"40X", "100X", "200X", "400X"};
  for (std::size_t i = 0; i < acc.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%s %.3f", i ? ", " : "", mags[i], acc[i].get<double>());
    s << buf;
  }
  return s.str();
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_gen_data(const Global& g, std::uint64_t per_class, int size, double imbalance) {
  mmx_dataset* ds = nullptr;
  check(mmx_dataset_generate(g.seed, static_cast<int>(per_class), size, imbalance, &ds));
  struct Free {
    mmx_dataset* p;
    ~Free() { mmx_dataset_free(p); }
  } guard{ds};
  const json flags{{"per_class", per_class}, {"size", size}, {"imbalance", imbalance}};
  check(mmx_dataset_save(ds, g.out.c_str(), json{{"generator", flags}, {"seed", g.seed}}.dump().c_str()));
  char* fp = nullptr;
  check(mmx_dataset_fingerprint(ds, &fp));
  write_effective(g, g.out, "gen-data", flags, json{{"fingerprint", take(fp)}});
  std::cout << mmx_dataset_size(ds) << " items\n";
  return 0;
}

int cmd_train(const Global& g, const RunOptions& o, const std::string& arch, const std::string& train_mag) {
  json req = o.request(g, arch);
  req["train_mag"] = train_mag;
  check(mmx_check_request(req.dump().c_str()));
  Dataset ds(o.data);
  char* out = nullptr;
  check(mmx_train(ds.h, req.dump().c_str(), &out));
  json result = json::parse(take(out));
  const json resolved = result.at("effective");
  result.erase("effective");
  const fs::path dir = fs::path(g.out) / arch / train_mag;
  write_file(dir / "train_result.json", result.dump(2) + "\n");
  write_effective(g, dir.string(), "train", req, resolved);
  std::cout << arch << " trained on " << train_mag << ", best seed " << result.at("best_seed").get<std::uint64_t>()
            << "\n  test top-1: " << percent_row(result.at("accuracies")) << "\n  record: "
            << (fs::path(g.out) / result.at("best_record").get<std::string>()).string() << "\n";
  return 0;
}

int cmd_evaluate(const Global& g, const std::string& checkpoint, const std::string& data,
                 const std::optional<std::string>& mag, const std::string& split, std::uint64_t split_seed,
                 std::optional<int> batch) {
  json req{{"split", split}, {"split_seed", split_seed}};
  if (mag) req["mag"] = *mag;
  if (batch) req["batch_size"] = *batch;
  mmx_model* m = nullptr;
  check(mmx_model_load(checkpoint.c_str(), &m));
  struct Free {
    mmx_model* p;
    ~Free() { mmx_model_free(p); }
  } guard{m};
  Dataset ds(data);
  char* out = nullptr;
  check(mmx_model_evaluate(m, ds.h, req.dump().c_str(), &out));
  const json r = json::parse(take(out));
  write_file(fs::path(g.out) / "evaluation.json", r.dump(2) + "\n");
  json flags = req;
  flags["checkpoint"] = checkpoint;
  flags["data"] = data;
  write_effective(g, g.out, "evaluate", flags, nullptr);
  char buf[96];
  std::snprintf(buf, sizeof buf, "top-1 %.4f (%zu/%zu)", r.at("top1").get<double>(), r.at("correct").get<std::size_t>(),
                r.at("total").get<std::size_t>());
  std::cout << r.at("arch").get<std::string>() << " on " << split << " split, mag " << r.at("mag").get<std::string>()
            << ": " << buf << "\n";
  return 0;
}

int run_report(const std::string& in, const std::string& out_dir, const std::string& format) {
  char* out = nullptr;
  check(mmx_report(in.c_str(), out_dir.c_str(), format.c_str(), &out));
  const json r = json::parse(take(out));
  for (const auto& f : r.at("files")) std::cout << "wrote " << f.get<std::string>() << "\n";
  if (r.contains("reference_trends")) {
    for (const auto& t : r.at("reference_trends")) {
      std::cout << "  " << t.at("statistic").get<std::string>() << ": expected leader "
                << t.at("expected_leader").get<std::string>() << ", observed "
                << t.at("observed_leader").get<std::string>();
      if (t.at("agrees").is_boolean()) std::cout << (t.at("agrees").get<bool>() ? " (agrees)" : " (differs)");
      else std::cout << " (not compared)";
      std::cout << "\n";
    }
  }
  return 0;
}

int cmd_matrix(const Global& g, const RunOptions& o, const std::string& archs_flag, std::optional<int> jobs,
               const std::string& format) {
  std::vector<std::string> archs;
  for (const auto& a : split_list(archs_flag)) {
    if (a == "all") {
      for (const auto& f : families()) archs.push_back(f);
    } else {
      archs.push_back(a);
    }
  }
  if (archs.empty()) throw Failure{kExitUsage, "--archs is empty"};
  std::vector<json> requests;
  for (const auto& a : archs) {
    json req = o.request(g, a);
    if (jobs) req["jobs"] = *jobs;
    check(mmx_check_request(req.dump().c_str()));
    requests.push_back(req);
  }
  Dataset ds(o.data);
  int first_failure = 0;
  std::string failure_message;
  json resolved = json::object();
  for (const auto& req : requests) {
    const std::string arch = req.at("arch").get<std::string>();
    char* out = nullptr;
    const mmx_status s = mmx_matrix(ds.h, req.dump().c_str(), &out);
    const std::string err = s == MMX_OK ? "" : mmx_last_error();
    if (!out) {
      if (!first_failure) {
        first_failure = s;
        failure_message = err;
      }
      std::cerr << "error: " << arch << ": " << err << "\n";
      continue;
    }
    const json r = json::parse(take(out));
    resolved[arch] = r.at("effective");
    std::cout << arch << "\n";
    const auto& cells = r.at("matrix").at("cells");
    const char* mags[] = {"40X", "100X", "200X", "400X"};
    for (std::size_t i = 0; i < cells.size(); ++i) {
      std::cout << "  train " << mags[i] << ":";
      for (const auto& c : cells[i]) {
        char buf[16];
        if (c.at("accuracy").is_number()) std::snprintf(buf, sizeof buf, " %.3f", c.at("accuracy").get<double>());
        else std::snprintf(buf, sizeof buf, " n/a");
        std::cout << buf;
      }
      std::cout << "\n";
    }
    if (s != MMX_OK && !first_failure) {
      first_failure = s;
      failure_message = err;
    }
    if (s != MMX_OK) std::cerr << "error: " << err << "\n";
  }
  json flags{{"archs", archs}, {"format", format}, {"requests", requests}};
  write_effective(g, g.out, "matrix", flags, resolved);
  try {
    run_report(g.out, g.out, format);
  } catch (const Failure& f) {
    if (!first_failure) throw;
    std::cerr << "error: report: " << f.message << "\n";
  }
  if (first_failure) throw Failure{first_failure, failure_message};
  return 0;
}

int cmd_profile(const Global& g, const std::string& arch_flag, int size, std::optional<int> embed_dim,
                std::optional<int> depth, std::optional<int> patch_size) {
  std::vector<std::string> archs;
  for (const auto& a : split_list(arch_flag)) {
    if (a == "all") {
      for (const auto& f : families()) archs.push_back(f);
    } else {
      archs.push_back(a);
    }
  }
  if (archs.empty()) throw Failure{kExitUsage, "--arch is empty"};
  json rows = json::array();
  const json d = defaults();
  for (const auto& a : archs) {
    if (!d.at("model").contains(a)) {
      std::string list;
      for (const auto& f : families()) list += (list.empty() ? "" : ", ") + f;
      throw Failure{kExitUsage, "unknown architecture '" + a + "'; valid families: " + list};
    }
    json cfg = d.at("model").at(a);
    cfg["input_h"] = size;
    cfg["input_w"] = size;
    if (embed_dim) cfg["embed_dim"] = *embed_dim;
    if (depth) cfg["depth"] = *depth;
    if (patch_size) cfg["patch_size"] = *patch_size;
    char* out = nullptr;
    check(mmx_profile(cfg.dump().c_str(), &out));
    rows.push_back(json::parse(take(out)));
  }
  write_file(fs::path(g.out) / "profile.json", rows.dump(2) + "\n");
  write_effective(g, g.out, "profile", json{{"archs", archs}, {"size", size}}, nullptr);
  std::printf("%-14s %12s %16s %16s\n", "arch", "params", "activations", "mult-adds");
  for (const auto& r : rows) {
    std::printf("%-14s %12lld %16lld %16lld\n", r.at("arch").get<std::string>().c_str(),
                r.at("param_count").get<long long>(), r.at("activation_elems").get<long long>(),
                r.at("mult_adds").get<long long>());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-magnification robustness experiments for token-mixing image classifiers"};
  app.require_subcommand(1);
  app.fallthrough();
  Global g;
  app.add_option("--seed", g.seed, "Base seed (dataset generation or first training run)");
  app.add_option("--threads", g.threads, "Intra-op threads for linear algebra (0 keeps the backend default)")
      ->check(CLI::NonNegativeNumber);
  app.add_flag("--deterministic", g.deterministic, "Single-threaded, no wall-clock fields; outputs are byte-reproducible");
  app.add_option("--out", g.out, "Output directory");
  app.add_flag("-q,--quiet", g.quiet, "Only log warnings and errors");
  app.add_flag("-v,--verbose", g.verbose, "Log per-epoch progress");

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic two-class dataset at four magnifications");
  std::uint64_t per_class = 200;
  int size = 64;
  double imbalance = 1.0;
  gen->add_option("--per-class", per_class, "Images per class per magnification");
  gen->add_option("--size", size, "Image side in pixels (multiple of 4)");
  gen->add_option("--imbalance", imbalance, "Ratio of class-0 to class-1 counts");

  auto* train = app.add_subcommand("train", "Best-of-k training on one magnification, tested on all four");
  RunOptions train_opts;
  std::string train_arch, train_mag = "40X";
  train->add_option("--arch", train_arch, "Model family")->required();
  train->add_option("--train-mag", train_mag, "Training magnification");
  train_opts.add(train);

  auto* eval = app.add_subcommand("evaluate", "Top-1 accuracy of a checkpoint on part of a dataset");
  std::string ckpt, eval_data, eval_split = "test";
  std::optional<std::string> eval_mag;
  std::uint64_t eval_split_seed = 0;
  std::optional<int> eval_batch;
  eval->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Dataset root")->required();
  eval->add_option("--mag", eval_mag, "Restrict to one magnification");
  eval->add_option("--split", eval_split, "train, val, test or all");
  eval->add_option("--split-seed", eval_split_seed, "Seed of the train/val/test split");
  eval->add_option("--batch-size", eval_batch, "Evaluation batch size");

  auto* matrix = app.add_subcommand("matrix", "Full 4x4 cross-magnification matrices and the comparison report");
  RunOptions matrix_opts;
  std::string archs = "all", matrix_format = "all";
  std::optional<int> jobs;
  matrix->add_option("--archs", archs, "Comma-separated families, 'all', or 'oracle'");
  matrix->add_option("--jobs", jobs, "Concurrent matrix rows");
  matrix->add_option("--format", matrix_format, "Report format: csv, md, svg or all")
      ->check(CLI::IsMember({"csv", "md", "svg", "all"}));
  matrix_opts.add(matrix);

  auto* report = app.add_subcommand("report", "Summaries and rankings from existing matrix results");
  std::string report_in, report_format = "all";
  report->add_option("--in", report_in, "Results directory containing <arch>/matrix.json")->required();
  report->add_option("--format", report_format, "csv, md, svg or all")
      ->check(CLI::IsMember({"csv", "md", "svg", "all"}));

  auto* profile = app.add_subcommand("profile", "Parameter count, activation elements and mult-adds");
  std::string profile_arch = "all";
  int profile_size = 64;
  std::optional<int> profile_embed, profile_depth, profile_patch;
  profile->add_option("--arch", profile_arch, "Comma-separated families or 'all'");
  profile->add_option("--size", profile_size, "Square input side");
  profile->add_option("--embed-dim", profile_embed, "Channel width");
  profile->add_option("--depth", profile_depth, "Number of blocks");
  profile->add_option("--patch-size", profile_patch, "Patch size");

  auto* defaults_cmd = app.add_subcommand("defaults", "Write the versioned defaults table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  mmx_set_log_level(g.quiet ? 2 : g.verbose ? 0 : 1);
  try {
    if (g.deterministic) check(mmx_set_threads(1));
    else if (g.threads > 0) check(mmx_set_threads(g.threads));

    if (*gen) return cmd_gen_data(g, per_class, size, imbalance);
    if (*train) return cmd_train(g, train_opts, train_arch, train_mag);
    if (*eval) return cmd_evaluate(g, ckpt, eval_data, eval_mag, eval_split, eval_split_seed, eval_batch);
    if (*matrix) {
      if (g.deterministic) jobs = 1;
      return cmd_matrix(g, matrix_opts, archs, jobs, matrix_format);
    }
    if (*report) {
      const std::string out_dir = app.get_option("--out")->count() ? g.out : report_in;
      const int rc = run_report(report_in, out_dir, report_format);
      write_effective(g, out_dir, "report", json{{"in", report_in}, {"format", report_format}}, nullptr);
      return rc;
    }
    if (*profile) return cmd_profile(g, profile_arch, profile_size, profile_embed, profile_depth, profile_patch);
    if (*defaults_cmd) {
      write_file(fs::path(g.out) / "defaults.json", defaults().dump(2) + "\n");
      std::cout << "wrote " << (fs::path(g.out) / "defaults.json").string() << "\n";
      return 0;
    }
  } catch (const Failure& f) {
    std::cerr << "error: " << f.message << "\n";
    return f.code;
  } catch (const json::exception& e) {
    std::cerr << "error: malformed library response: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
