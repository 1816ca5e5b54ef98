// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// if any gated criterion fails. Criterion 6 is observational and passes when
// the comparison report is produced.
//
//   acceptance [--only 1,2,...] [--work DIR] [--cli PATH] [--resume]

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "common/log.hpp"
#include "common/rng.hpp"
#include "mixers/mixers.hpp"
#include "models/model.hpp"
#include "protocol/report.hpp"
#include "protocol/runner.hpp"
#include "spectral/fourier.hpp"
#include "spectral/wavelet.hpp"
#include "tensor/gradcheck.hpp"
#include "tensor/ops.hpp"

using namespace magmix;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
  std::vector<std::string> notes;
};

struct Env {
  fs::path work;
  std::string cli;
  bool resume = false;
  // Default dataset, generated once and shared by criteria 4 to 6.
  std::optional<MagDataset> data;
  std::vector<CrossMagMatrix> matrices;

  const MagDataset& dataset() {
    if (!data) data = generate_synthetic(SynthConfig{});
    return *data;
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor<double> randn(Shape s, Rng& rng) {
  Tensor<double> t(std::move(s));
  for (double& v : t.storage()) v = rng.normal();
  return t;
}

Tensor<double> uniform(Shape s, Rng& rng) {
  Tensor<double> t(std::move(s));
  for (double& v : t.storage()) v = rng.uniform();
  return t;
}

double energy(const Tensor<double>& t) {
  double e = 0;
  for (double v : t.storage()) e += v * v;
  return e;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
  return out;
}

// ---------------------------------------------------------------------------

Outcome transforms(Env&) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(1001);
  double round_trip = 0, energy_err = 0;
  for (int i = 0; i < 100; ++i) {
    const Tensor<double> x = uniform({1, 3, 16, 16}, rng);
    const auto s = dwt2_haar(x);
    const Tensor<double> back = idwt2_haar(s);
    for (Index k = 0; k < x.size(); ++k) round_trip = std::max(round_trip, std::abs(back[k] - x[k]));
    energy_err = std::max(energy_err, std::abs(energy(s.ll) + energy(s.lh) + energy(s.hl) + energy(s.hh) - energy(x)));
  }
  double parseval = 0;
  for (int i = 0; i < 10; ++i) {
    const Tensor<double> y = randn({1, 1, 8, 8}, rng);
    const auto f = dft2(y);
    parseval = std::max(parseval, std::abs(energy(f.real) + energy(f.imag) - 64.0 * energy(y)));
  }

  Tensor<double> ones({1, 1, 2, 2}, 1.0);
  Tensor<double> m({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  const auto h1 = dwt2_haar(ones), h2 = dwt2_haar(m);
  const auto d = dft2(m);
  const bool ex1 = h1.ll[0] == 2.0 && h1.lh[0] == 0.0 && h1.hl[0] == 0.0 && h1.hh[0] == 0.0;
  const bool ex2 = h2.ll[0] == 5.0 && h2.lh[0] == -2.0 && h2.hl[0] == -1.0 && h2.hh[0] == 0.0;
  bool ex3 = d.real[0] == 10.0 && d.real[1] == -2.0 && d.real[2] == -4.0 && d.real[3] == 0.0;
  for (double v : d.imag.storage()) ex3 = ex3 && v == 0.0;
  const double secs = seconds_since(t0);

  Outcome o;
  o.pass = round_trip < 1e-10 && energy_err < 1e-10 && parseval < 1e-8 && ex1 && ex2 && ex3 && secs < 10.0;
  o.detail = "haar round trip " + fmt("%.2e", round_trip) + ", energy " + fmt("%.2e", energy_err) + ", Parseval " +
             fmt("%.2e", parseval) + ", analytic 2x2 cases " + std::to_string(int(ex1) + int(ex2) + int(ex3)) + "/3, " +
             fmt("%.2f", secs) + " s";
  return o;
}

// ---------------------------------------------------------------------------

struct GradSuite {
  std::map<std::string, std::pair<int, double>> worst;  // name -> (shapes checked, max error)
  void add(const std::string& name, double err) {
    auto& w = worst[name];
    ++w.first;
    w.second = std::max(w.second, std::isfinite(err) ? err : 1e300);
  }
};

Outcome gradients(Env&) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2002);
  GradSuite g;
  auto weighted = [](Tape<double>& t, const Var<double>& v, const Tensor<double>& r) { return sum(mul(v, t.input(r))); };

  const Shape shapes[] = {{1, 2, 3, 3}, {2, 3, 4, 4}, {3, 1, 2, 5}, {2, 4, 1, 1}, {1, 5, 6, 2}};
  for (const Shape& s : shapes) {
    const Tensor<double> x = randn(s, rng), y = randn(s, rng), r = randn(s, rng);
    const Tensor<double> gam = randn({s[1]}, rng), bet = randn({s[1]}, rng);
    using In = std::vector<Var<double>>;
    g.add("add", finite_diff_check([&](Tape<double>& t, const In& in) { return weighted(t, add(in[0], in[1]), r); }, {x, y}));
    g.add("mul", finite_diff_check([&](Tape<double>& t, const In& in) { return weighted(t, mul(in[0], in[1]), r); }, {x, y}));
    const Tensor<double> e = randn({1, s[1], s[2], s[3]}, rng);
    g.add("add_broadcast",
          finite_diff_check([&](Tape<double>& t, const In& in) { return weighted(t, add_broadcast(in[0], in[1]), r); },
                            {x, e}));
    g.add("scale", finite_diff_check([&](Tape<double>& t, const Var<double>& v) { return weighted(t, scale(v, -1.7), r); }, x));
    g.add("sum", finite_diff_check([&](Tape<double>&, const Var<double>& v) { return sum(mul(v, v)); }, x));
    const Tensor<double> rt = randn({s[0], s[2] * s[3], s[1]}, rng);
    g.add("reshape/transpose_last2", finite_diff_check(
                                         [&](Tape<double>& t, const Var<double>& v) {
                                           return weighted(t, transpose_last2(reshape(v, {s[0], s[1], s[2] * s[3]})), rt);
                                         },
                                         x));
    const Tensor<double> rc = randn({s[0], 2 * s[1], s[2], s[3]}, rng);
    g.add("concat_channels",
          finite_diff_check([&](Tape<double>& t, const In& in) { return weighted(t, concat_channels<double>({in[0], in[1]}), rc); },
                            {x, y}));
    const Tensor<double> rs = randn({s[0], s[1] - s[1] / 2, s[2], s[3]}, rng);
    g.add("slice_channels", finite_diff_check(
                                [&](Tape<double>& t, const Var<double>& v) { return weighted(t, slice_channels(v, s[1] / 2, s[1]), rs); },
                                x));
    g.add("gelu", finite_diff_check([&](Tape<double>& t, const Var<double>& v) { return weighted(t, gelu(v), r); }, x));
    g.add("relu", finite_diff_check([&](Tape<double>& t, const Var<double>& v) { return weighted(t, relu(v), r); }, x));
    g.add("layer_norm(channel)",
          finite_diff_check([&](Tape<double>& t, const In& in) { return weighted(t, layer_norm(in[0], in[1], in[2], 1), r); },
                            {x, gam, bet}));
    const Tensor<double> gl = randn({s[3]}, rng), bl = randn({s[3]}, rng);
    g.add("layer_norm(last)",
          finite_diff_check([&](Tape<double>& t, const In& in) { return weighted(t, layer_norm(in[0], in[1], in[2], 3), r); },
                            {x, gl, bl}));
    g.add("batch_norm(train)", finite_diff_check(
                                   [&](Tape<double>& t, const In& in) {
                                     Tensor<double> rm({s[1]}), rv({s[1]}, 1.0);
                                     return weighted(t, batch_norm(in[0], in[1], in[2], BatchNormState<double>{&rm, &rv, 0.1}, true), r);
                                   },
                                   {x, gam, bet}));
    Tensor<double> rm = randn({s[1]}, rng), rv = uniform({s[1]}, rng);
    for (double& v : rv.storage()) v += 0.5;
    g.add("batch_norm(eval)", finite_diff_check(
                                  [&](Tape<double>& t, const In& in) {
                                    return weighted(t, batch_norm(in[0], in[1], in[2], BatchNormState<double>{&rm, &rv, 0.1}, false), r);
                                  },
                                  {x, gam, bet}));
    const Tensor<double> rp = randn({s[0], s[1]}, rng);
    g.add("global_avg_pool",
          finite_diff_check([&](Tape<double>& t, const Var<double>& v) { return weighted(t, global_avg_pool(v), rp); }, x));
    const Tensor<double> w = randn({s[3], 3}, rng), b = randn({3}, rng), rl = randn({s[0], s[1], s[2], 3}, rng);
    g.add("linear", finite_diff_check([&](Tape<double>& t, const In& in) { return weighted(t, linear(in[0], in[1], in[2]), rl); },
                                      {x, w, b}));
    const Index k = s[1] + 1;
    const Tensor<double> logits = randn({s[0] * s[2], k}, rng);
    std::vector<int> labels;
    for (Index i = 0; i < logits.dim(0); ++i) labels.push_back(static_cast<int>((i * 7) % k));
    g.add("softmax_cross_entropy",
          finite_diff_check([&](Tape<double>&, const Var<double>& v) { return softmax_cross_entropy(v, std::span<const int>(labels)); },
                            logits));
    const Tensor<double> rf = randn(s, rng);
    g.add("fourier_mix", finite_diff_check([&](Tape<double>& t, const Var<double>& v) { return weighted(t, fourier_mix(v), rf); }, x));
  }

  struct ConvCase {
    Shape x, k;
    Conv2dOptions opt;
  };
  const ConvCase convs[] = {{{2, 3, 6, 6}, {4, 3, 3, 3}, {1, 1, 1}}, {{1, 2, 7, 5}, {3, 2, 3, 3}, {2, 0, 1}},
                            {{2, 4, 5, 5}, {4, 1, 3, 3}, {1, 1, 4}}, {{1, 4, 8, 8}, {2, 4, 4, 4}, {4, 0, 1}},
                            {{2, 6, 4, 6}, {6, 3, 1, 2}, {1, 0, 2}}};
  for (const auto& c : convs) {
    const Tensor<double> x = randn(c.x, rng), k = randn(c.k, rng), b = randn({c.k[0]}, rng);
    Tape<double> probe;
    const Shape os = conv2d(probe.input(x), probe.input(k), probe.input(b), c.opt).shape();
    const Tensor<double> r = randn(os, rng);
    g.add("conv2d", finite_diff_check(
                        [&](Tape<double>& t, const std::vector<Var<double>>& in) {
                          return sum(mul(conv2d(in[0], in[1], in[2], c.opt), t.input(r)));
                        },
                        {x, k, b}));
  }
  struct TconvCase {
    Shape x, k;
    int stride, pad;
  };
  const TconvCase tconvs[] = {{{2, 3, 3, 3}, {3, 2, 4, 4}, 2, 1}, {{1, 2, 2, 4}, {2, 3, 3, 3}, 1, 1},
                              {{2, 4, 3, 2}, {4, 4, 2, 2}, 2, 0}, {{1, 1, 4, 4}, {1, 2, 3, 1}, 3, 0},
                              {{2, 2, 1, 1}, {2, 2, 4, 4}, 2, 1}};
  for (const auto& c : tconvs) {
    const Tensor<double> x = randn(c.x, rng), k = randn(c.k, rng), b = randn({c.k[1]}, rng);
    Tape<double> probe;
    const Shape os = transposed_conv2d(probe.input(x), probe.input(k), probe.input(b), c.stride, c.pad).shape();
    const Tensor<double> r = randn(os, rng);
    g.add("transposed_conv2d", finite_diff_check(
                                   [&](Tape<double>& t, const std::vector<Var<double>>& in) {
                                     return sum(mul(transposed_conv2d(in[0], in[1], in[2], c.stride, c.pad), t.input(r)));
                                   },
                                   {x, k, b}));
  }
  const std::array<std::array<Index, 4>, 5> att{{{1, 4, 4, 2}, {2, 3, 6, 3}, {2, 5, 8, 4}, {1, 1, 6, 1}, {3, 2, 4, 4}}};
  for (const auto& a : att) {  // N, T, C, heads
    const Tensor<double> qkv = randn({a[0], a[1], 3 * a[2]}, rng), r = randn({a[0], a[1], a[2]}, rng);
    g.add("multi_head_attention", finite_diff_check(
                                      [&](Tape<double>& t, const Var<double>& v) {
                                        return sum(mul(multi_head_attention(v, int(a[3])), t.input(r)));
                                      },
                                      qkv));
  }
  const Shape even[] = {{1, 2, 4, 4}, {2, 3, 2, 6}, {1, 1, 8, 2}, {3, 2, 2, 2}, {1, 4, 6, 4}};
  for (const Shape& s : even) {
    const Tensor<double> x = randn(s, rng), r = randn({s[0], 4 * s[1], s[2] / 2, s[3] / 2}, rng);
    g.add("dwt2_haar_concat", finite_diff_check(
                                  [&](Tape<double>& t, const Var<double>& v) { return sum(mul(dwt2_haar_concat(v), t.input(r))); }, x));
  }

  // Mixers and full blocks, with respect to both the input and every parameter.
  struct Geo {
    Index c, h, w;
  };
  const Geo geos[] = {{4, 4, 4}, {8, 4, 2}, {4, 2, 6}, {8, 8, 4}, {12, 4, 4}};
  for (MixerKind kind : kAllMixerKinds) {
    for (int levels : {1, 2}) {
      if (levels == 2 && kind != MixerKind::WaveletMix) continue;
      const std::string name = std::string(to_string(kind)) + (levels == 2 ? "(2 levels)" : "");
      for (const Geo& geo : geos) {
        BlockConfig cfg;
        cfg.kind = kind;
        cfg.channels = geo.c;
        cfg.height = levels == 2 ? 4 * ((geo.h + 3) / 4) : geo.h;
        cfg.width = levels == 2 ? 4 * ((geo.w + 3) / 4) : geo.w;
        cfg.heads = 2;
        cfg.kernel_size = 3;
        cfg.dwt_levels = levels;
        const Tensor<double> x = randn({2, cfg.channels, cfg.height, cfg.width}, rng);
        const Tensor<double> r = randn(x.shape(), rng);
        {
          ParameterStore<double> store;
          Rng init(7);
          auto mixer = make_mixer<double>(cfg, store, "m", init);
          for (auto* p : store.parameters())
            for (double& v : p->value.storage()) v += 0.2 * rng.normal();
          const double ex = finite_diff_check(
              [&](Tape<double>& t, const Var<double>& v) { return sum(mul(mixer->forward(t, v, true), t.input(r))); }, x);
          const double ep = store.parameters().empty()
                                ? 0.0
                                : finite_diff_check_params(
                                      [&](Tape<double>& t) { return sum(mul(mixer->forward(t, t.input(x), true), t.input(r))); },
                                      store.parameters());
          g.add("mixer " + name, std::max(ex, ep));
        }
        ParameterStore<double> store;
        Rng init(8);
        MetaFormerBlock<double> blk(cfg, store, "b", init);
        for (auto* p : store.parameters())
          for (double& v : p->value.storage()) v += 0.2 * rng.normal();
        const double ex = finite_diff_check(
            [&](Tape<double>& t, const Var<double>& v) { return sum(mul(blk.forward(t, v, true), t.input(r))); }, x);
        const double ep = finite_diff_check_params(
            [&](Tape<double>& t) { return sum(mul(blk.forward(t, t.input(x), true), t.input(r))); }, store.parameters());
        g.add("block " + name, std::max(ex, ep));
      }
    }
  }
  const double secs = seconds_since(t0);

  Outcome o;
  double worst = 0;
  int min_shapes = 1 << 30;
  std::string worst_name;
  for (const auto& [name, w] : g.worst) {
    if (w.second > worst) worst = w.second, worst_name = name;
    min_shapes = std::min(min_shapes, w.first);
    o.notes.push_back(name + ": " + std::to_string(w.first) + " shapes, max rel err " + fmt("%.2e", w.second));
  }
  o.pass = worst < 1e-3 && min_shapes >= 5 && secs < 300.0;
  o.detail = std::to_string(g.worst.size()) + " ops/mixers/blocks, >= " + std::to_string(min_shapes) +
             " shapes each, worst rel err " + fmt("%.2e", worst) + " (" + worst_name + "), " + fmt("%.1f", secs) + " s";
  return o;
}

// ---------------------------------------------------------------------------

CrossMagMatrix mock(const std::string& arch, const std::array<std::array<double, 4>, 4>& v) {
  CrossMagMatrix m;
  m.arch = arch;
  m.dataset_fingerprint = "mock";
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) m.set(i, j, v[i][j]);
  return m;
}

Outcome protocol_arithmetic(Env&) {
  std::vector<std::string> bad;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) bad.push_back(what);
  };
  // constant matrix
  const auto c = summarize(mock("const", {{{0.8, 0.8, 0.8, 0.8}, {0.8, 0.8, 0.8, 0.8}, {0.8, 0.8, 0.8, 0.8}, {0.8, 0.8, 0.8, 0.8}}}));
  expect(c.overall_mean == 0.8 && c.diagonal_mean == 0.8 && c.offdiag_mean == 0.8, "constant means");
  expect(c.min_cell == 0.8 && c.generalization_gap == 0.0, "constant min/gap");
  // diagonal 1, off-diagonal 1/2 except one 3/4: diag 1, off 6.25/12, overall 10.25/16
  const auto d = summarize(mock("diag", {{{1, 0.5, 0.5, 0.5}, {0.75, 1, 0.5, 0.5}, {0.5, 0.5, 1, 0.5}, {0.5, 0.5, 0.5, 1}}}));
  expect(d.diagonal_mean == 1.0, "diagonal mean");
  expect(d.offdiag_mean == 6.25 / 12.0, "off-diagonal mean");
  expect(d.overall_mean == 10.25 / 16.0, "overall mean");
  expect(d.row_means[1] == 0.6875 && d.row_means[0] == 0.625, "row means");
  expect(d.min_cell == 0.5 && d.min_offdiag_cell == 0.5, "min cells");
  expect(d.generalization_gap == 1.0 - 6.25 / 12.0, "gap");
  // rankings with a tie broken by name
  const auto r = compare({d, summarize(mock("b", {{{0.9, 0.9, 0.9, 0.9}, {0.9, 0.9, 0.9, 0.9}, {0.9, 0.9, 0.9, 0.9}, {0.9, 0.9, 0.9, 0.9}}})),
                          summarize(mock("a", {{{0.9, 0.9, 0.9, 0.9}, {0.9, 0.9, 0.9, 0.9}, {0.9, 0.9, 0.9, 0.9}, {0.9, 0.9, 0.9, 0.9}}}))});
  expect(r.by_overall_mean[0].first == "a" && r.by_overall_mean[1].first == "b" && r.by_overall_mean[2].first == "diag",
         "overall ranking");
  expect(r.by_diagonal_mean[0].first == "diag", "diagonal ranking");
  expect(r.by_min_cell[0].first == "a", "min-cell ranking");

  // permutation consistency: relabelling magnifications (rows and columns
  // together) and reordering architectures changes nothing but row order
  Rng rng(3003);
  int violations = 0;
  for (int t = 0; t < 100; ++t) {
    std::array<std::array<double, 4>, 4> v{}, w{};
    for (auto& row : v)
      for (double& x : row) x = std::round(rng.uniform() * 200.0) / 200.0;
    std::array<int, 4> p{0, 1, 2, 3};
    rng.shuffle(p.begin(), p.end());
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) w[i][j] = v[p[i]][p[j]];
    const auto a = summarize(mock("x", v)), b = summarize(mock("y", w));
    bool ok = a.overall_mean == b.overall_mean && a.diagonal_mean == b.diagonal_mean && a.offdiag_mean == b.offdiag_mean &&
              a.min_cell == b.min_cell && a.min_offdiag_cell == b.min_offdiag_cell &&
              a.generalization_gap == b.generalization_gap;
    for (int i = 0; i < 4; ++i) ok = ok && b.row_means[i] == a.row_means[p[i]];
    std::vector<ArchSummary> ss;
    for (int k = 0; k < 3; ++k) {
      std::array<std::array<double, 4>, 4> u{};
      for (auto& row : u)
        for (double& x : row) x = std::round(rng.uniform() * 4.0) / 4.0;
      ss.push_back(summarize(mock("arch" + std::to_string(k), u)));
    }
    auto shuffled = ss;
    rng.shuffle(shuffled.begin(), shuffled.end());
    const auto r1 = compare(ss), r2 = compare(shuffled);
    ok = ok && r1.by_overall_mean == r2.by_overall_mean && r1.by_diagonal_mean == r2.by_diagonal_mean &&
         r1.by_min_cell == r2.by_min_cell;
    if (!ok) ++violations;
  }
  expect(violations == 0, std::to_string(violations) + " permutation violations");

  Outcome o;
  o.pass = bad.empty();
  o.detail = bad.empty() ? "hand-computed statistics exact; permutation consistency held on 100 random matrices"
                         : "mismatches: " + [&] {
                             std::string s;
                             for (const auto& b : bad) s += (s.empty() ? "" : ", ") + b;
                             return s;
                           }();
  return o;
}

// ---------------------------------------------------------------------------

Outcome oracle_plumbing(Env& env) {
  const MagDataset& ds = env.dataset();
  const auto t0 = std::chrono::steady_clock::now();
  MatrixRequest req;
  req.arch = std::string(kOracleArch);
  req.seeds = {0};
  req.results_dir = (env.work / "oracle_results").string();
  req.resume = false;
  fs::remove_all(req.results_dir);
  const CrossMagMatrix m = run_matrix(req, ds);
  bool ones = m.complete();
  for (int i = 0; i < 4 && ones; ++i)
    for (int j = 0; j < 4; ++j) ones = ones && m.at(i, j) == 1.0;
  const std::vector<ArchSummary> ss{summarize(m)};
  const RobustnessReport r = compare(ss);
  const fs::path a = env.work / "oracle_report_a", b = env.work / "oracle_report_b";
  fs::remove_all(a);
  fs::remove_all(b);
  emit_report(load_matrices(req.results_dir), ss, &r, a.string(), ReportFormat::All);
  emit_report(load_matrices(req.results_dir), ss, &r, b.string(), ReportFormat::All);
  const auto ta = tree(a), tb = tree(b);
  const bool same = ta == tb && ta.size() == 3;
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = ones && same && secs < 60.0;
  o.detail = std::string(ones ? "all-ones 4x4 matrix" : "matrix is not all ones") + ", report " +
             (same ? "byte-identical across two emissions" : "differs between emissions") + ", " + fmt("%.1f", secs) +
             " s (dataset generation excluded)";
  return o;
}

// ---------------------------------------------------------------------------

Outcome desk_learning(Env& env) {
  const MagDataset& ds = env.dataset();
  Outcome o;
  o.pass = true;
  int families_ok = 0;
  for (Family f : kAllFamilies) {
    const auto t0 = std::chrono::steady_clock::now();
    MatrixRequest req;
    req.arch = std::string(to_string(f));
    req.seeds = {0};
    req.results_dir = (env.work / "results").string();
    req.resume = env.resume;
    req.train.record_wall_time = false;
    CrossMagMatrix m;
    std::string err;
    try {
      m = run_matrix(req, ds);
    } catch (const std::exception& e) {
      err = e.what();
    }
    const double secs = seconds_since(t0);
    bool ok = err.empty() && m.complete();
    std::string rows;
    for (int i = 0; i < kNumMags && err.empty(); ++i) {
      const auto& cell = m.cells[i][i];
      if (cell.record.empty()) {
        ok = false;
        rows += " " + std::string(kMagLevels[i].label) + "=failed";
        continue;
      }
      const RunRecord rec =
          run_record_from_json(nlohmann::json::parse(slurp(fs::path(req.results_dir) / cell.record)));
      const bool row_ok = rec.best_val_top1 >= 0.95 && rec.best_epoch <= 50 && rec.history.size() <= 50;
      ok = ok && row_ok;
      rows += " " + std::string(kMagLevels[i].label) + " val " + fmt("%.3f", rec.best_val_top1) + "@" +
              std::to_string(rec.best_epoch);
    }
    ok = ok && secs <= 1800.0;
    if (ok) ++families_ok;
    o.pass = o.pass && ok;
    std::string line = req.arch + (ok ? " ok:" : " FAILED:") + rows + ", " + fmt("%.0f", secs) + " s";
    if (!err.empty()) line += ", error: " + err;
    for (int i = 0; i < kNumMags; ++i)
      if (!m.row_errors[i].empty()) line += ", row " + std::string(kMagLevels[i].label) + ": " + m.row_errors[i];
    o.notes.push_back(line);
    if (m.complete()) {
      std::string cells = "  " + req.arch + " matrix:";
      for (int i = 0; i < 4; ++i) {
        cells += " [";
        for (int j = 0; j < 4; ++j) cells += (j ? " " : "") + fmt("%.3f", m.at(i, j));
        cells += "]";
      }
      o.notes.push_back(cells);
      env.matrices.push_back(m);
    }
  }
  o.detail = std::to_string(families_ok) + "/6 families reached >= 0.95 same-magnification validation accuracy on "
             "every row within 50 epochs with complete matrices (k=1, <= 1800 s each)";
  return o;
}

// ---------------------------------------------------------------------------

Outcome trend_report(Env& env) {
  Outcome o;
  if (env.matrices.empty()) {
    o.detail = "no complete matrices to compare (run criterion 5 first)";
    return o;
  }
  std::vector<ArchSummary> ss;
  for (const auto& m : env.matrices) ss.push_back(summarize(m));
  const RobustnessReport r = compare(ss);
  const fs::path out = env.work / "report";
  fs::remove_all(out);
  emit_report(env.matrices, ss, &r, out.string(), ReportFormat::All);
  const std::string md = slurp(out / "report.md");
  bool complete = md.find("## Rankings") != std::string::npos && md.find("## Reference trends") != std::string::npos;
  for (const auto& s : ss) {
    complete = complete && md.find("| " + s.arch + " |") != std::string::npos;
    o.notes.push_back(s.arch + ": overall_mean " + fmt("%.4f", s.overall_mean) + ", diagonal_mean " +
                      fmt("%.4f", s.diagonal_mean) + ", min_cell " + fmt("%.4f", s.min_cell) + ", gap " +
                      fmt("%.4f", s.generalization_gap));
  }
  int agree = 0, evaluated = 0;
  for (const auto& t : check_reference_trends(r)) {
    if (t.agrees) ++evaluated, agree += *t.agrees ? 1 : 0;
    o.notes.push_back("trend " + t.statistic + ": expected " + t.expected_leader + ", observed " + t.observed_leader +
                      (t.agrees ? (*t.agrees ? " (agrees)" : " (disagrees)") : " (not evaluated)"));
  }
  o.pass = complete && ss.size() == 6;
  o.detail = "report for " + std::to_string(ss.size()) + " families written to " + out.string() + "; " +
             std::to_string(agree) + "/" + std::to_string(evaluated) + " reference trends agree (logged, not gated)";
  return o;
}

// ---------------------------------------------------------------------------

Outcome profiling(Env&) {
  std::map<Family, ModelProfile> p;
  for (Family f : kAllFamilies) {
    Model<float> m(ModelConfig::defaults(f), 0);
    p[f] = m.profile(64, 64);
  }
  Outcome o;
  o.pass = true;
  const Index fnet = p[Family::FNet2DNet].activation_elems;
  Index runner_up = 0;
  for (Family f : kAllFamilies) {
    o.notes.push_back(std::string(to_string(f)) + ": params " + std::to_string(p[f].param_count) + ", activation elems " +
                      std::to_string(p[f].activation_elems) + ", mult-adds " + std::to_string(p[f].mult_adds));
    if (f == Family::FNet2DNet) continue;
    o.pass = o.pass && fnet > p[f].activation_elems;
    runner_up = std::max(runner_up, p[f].activation_elems);
  }
  o.detail = "FNet2DNet activation elems " + std::to_string(fnet) + " vs largest other " + std::to_string(runner_up) +
             " (" + fmt("%.2f", double(fnet) / double(runner_up)) + "x)";
  return o;
}

// ---------------------------------------------------------------------------

int shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism(Env& env) {
  Outcome o;
  if (env.cli.empty() || !fs::exists(env.cli)) {
    o.detail = "command-line tool not found at '" + env.cli + "'";
    return o;
  }
  const fs::path base = env.work / "determinism";
  fs::remove_all(base);
  const std::string data = (base / "data").string();
  const std::string quiet = " > /dev/null 2>&1";
  if (shell(env.cli + " --deterministic --seed 0 --out " + data + " gen-data --per-class 20 --size 32" + quiet) != 0) {
    o.detail = "gen-data failed";
    return o;
  }
  const std::string ckpt = (base / "train_a" / "ConvMixerNet" / "40X" / "run_0" / "checkpoint.mmix").string();
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "gen-data --per-class 20 --size 32"},
      {"train", "train --arch ConvMixerNet --train-mag 40X --runs 2 --epochs 3 --embed-dim 16 --depth 1 --data " + data},
      {"matrix", "matrix --archs oracle,MiniCNN --runs 1 --epochs 1 --embed-dim 8 --depth 1 --data " + data},
      {"evaluate", "evaluate --checkpoint " + ckpt + " --split test --data " + data},
      {"profile", "profile --arch all --size 32"},
      {"defaults", "defaults"},
  };
  int same = 0;
  for (const auto& [name, args] : commands) {
    std::map<std::string, std::string> first;
    bool ok = true;
    for (int rep = 0; rep < 2 && ok; ++rep) {
      // identical flags each time, including the output directory
      const fs::path out = base / (name + "_a");
      if (rep == 1) {
        first = tree(out);
        fs::remove_all(out);
      }
      ok = shell(env.cli + " --deterministic --seed 0 --out " + out.string() + " " + args + quiet) == 0;
      if (rep == 1 && ok) ok = tree(out) == first && !first.empty();
    }
    if (ok) ++same;
    o.notes.push_back(name + (ok ? ": byte-identical (" + std::to_string(first.size()) + " files)" : ": DIFFERS or failed"));
  }
  o.pass = same == static_cast<int>(commands.size());
  o.detail = std::to_string(same) + "/" + std::to_string(commands.size()) +
             " commands produced byte-identical result files across two --deterministic runs";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  Env env;
  env.work = fs::current_path() / "acceptance_work";
#ifdef MAGMIX_CLI
  env.cli = MAGMIX_CLI;
#endif
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string item; std::getline(ss, item, ',');) only.insert(std::stoi(item));
    } else if (a == "--work" && i + 1 < argc) {
      env.work = argv[++i];
    } else if (a == "--cli" && i + 1 < argc) {
      env.cli = argv[++i];
    } else if (a == "--resume") {
      env.resume = true;
    } else {
      std::cerr << "usage: acceptance [--only 1,2,...] [--work DIR] [--cli PATH] [--resume]\n";
      return 2;
    }
  }
  fs::create_directories(env.work);
  magmix::log::set_level(magmix::log::Level::Warn);

  const std::vector<std::pair<std::string, std::function<Outcome(Env&)>>> criteria = {
      {"transform correctness", transforms},
      {"gradient suite", gradients},
      {"protocol arithmetic", protocol_arithmetic},
      {"end-to-end plumbing", oracle_plumbing},
      {"desk-scale learning", desk_learning},
      {"scaled trend reproduction (observational)", trend_report},
      {"profiling direction", profiling},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second(env);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    if (!o.pass) ++failed;
    std::cout << "criterion " << id << " (" << criteria[i].first << "): " << (o.pass ? "PASS" : "FAIL") << ": "
              << o.detail << "\n";
    for (const auto& n : o.notes) std::cout << "    " << n << "\n";
    std::cout.flush();
  }
  return failed == 0 ? 0 : 1;
}
