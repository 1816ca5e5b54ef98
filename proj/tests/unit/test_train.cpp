#include <doctest.h>

#include <cmath>

#include "data/dataset.hpp"
#include "train/trainer.hpp"

using namespace magmix;

namespace {

const MagDataset& small_data() {
  static const MagDataset ds = [] {
    SynthConfig cfg;
    cfg.per_class = 10;
    cfg.out_size = 16;
    return generate_synthetic(cfg);
  }();
  return ds;
}

ModelConfig small_model() {
  ModelConfig c = ModelConfig::defaults(Family::ConvMixerNet);
  c.embed_dim = 16;
  c.depth = 1;
  c.input_h = c.input_w = 16;
  c.kernel_size = 3;
  return c;
}

RunRecord record(double test, double val, std::uint64_t seed) {
  RunRecord r;
  r.seed = seed;
  r.best_val_top1 = val;
  EvalResult e;
  e.top1 = test;
  r.test = e;
  return r;
}

}  // namespace

TEST_CASE("train config validation and json") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.epochs = kMaxEpochs + 1;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("300"), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.optim.lr = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.optim.beta2 = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  TrainConfig d;
  d.epochs = 7;
  d.batch_size = 16;
  d.optim.lr = 3e-3;
  d.patience = 0;
  d.record_wall_time = false;
  CHECK(to_json(train_config_from_json(to_json(d))) == to_json(d));
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"epoch", 3}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"epochs", "3"}}), ConfigError);
  CHECK(train_config_from_json(nlohmann::json::object()).epochs == 50);
}

TEST_CASE("argmax ties go to the lowest index") {
  const float a[] = {0.5f, 0.5f, 0.1f};
  const float b[] = {-1.0f, 2.0f, 2.0f};
  const float c[] = {3.0f};
  CHECK(argmax_lowest(a) == 0);
  CHECK(argmax_lowest(b) == 1);
  CHECK(argmax_lowest(c) == 0);
}

TEST_CASE("evaluate with reference classifiers") {
  const MagDataset& ds = small_data();
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  OracleClassifier oracle;
  const EvalResult o = evaluate(oracle, ds, all, 7);
  CHECK(o.top1 == 1.0);
  CHECK(o.correct == ds.size());
  ConstantClassifier ring(1);
  const EvalResult r = evaluate(ring, ds, all, 64);
  CHECK(r.top1 == 0.5);
  REQUIRE(r.per_class.size() == 2);
  CHECK(r.per_class[0].name == "disc");
  CHECK(r.per_class[0].correct == 0);
  CHECK(r.per_class[1].correct == r.per_class[1].total);
  CHECK(r.per_class[0].total + r.per_class[1].total == ds.size());
  CHECK_THROWS_AS(evaluate(oracle, ds, {}, 8), ConfigError);
  CHECK_THROWS_AS(evaluate(oracle, ds, all, 0), ConfigError);
}

TEST_CASE("best run selection") {
  std::vector<RunRecord> recs{record(0.9, 0.8, 0), record(0.95, 0.7, 1), record(0.95, 0.9, 2), record(0.95, 0.9, 3)};
  CHECK(select_best(recs) == 2);
  std::vector<RunRecord> seeds{record(0.5, 0.5, 9), record(0.5, 0.5, 4)};
  CHECK(select_best(seeds) == 1);
  CHECK_THROWS_AS(select_best(std::span<const RunRecord>{}), ConfigError);
}

TEST_CASE("training is seeded, restores the best epoch and records its history") {
  const MagDataset& ds = small_data();
  const Split s = split_dataset(ds, 0);
  const auto tr = filter_mag(ds, s.train, 0), va = filter_mag(ds, s.val, 0);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 8;
  cfg.optim.lr = 3e-3;
  cfg.patience = 0;
  cfg.stop_at_perfect_val = false;
  cfg.record_wall_time = false;

  Model<float> a(small_model(), 11), b(small_model(), 11);
  const RunRecord ra = train(a, ds, tr, va, cfg, 5);
  const RunRecord rb = train(b, ds, tr, va, cfg, 5);
  CHECK(to_json(ra).dump() == to_json(rb).dump());
  CHECK_FALSE(ra.wall_time_s.has_value());
  REQUIRE(ra.history.size() == 4);
  CHECK(ra.stop_reason == "epoch budget exhausted");
  for (int e = 0; e < 4; ++e) {
    CHECK(ra.history[e].epoch == e + 1);
    CHECK(std::isfinite(ra.history[e].train_loss));
  }
  CHECK(ra.history.back().train_loss < ra.history.front().train_loss);
  double best = -1;
  int best_epoch = 0;
  for (const auto& h : ra.history)
    if (h.val_top1 > best) best = h.val_top1, best_epoch = h.epoch;
  CHECK(ra.best_epoch == best_epoch);
  CHECK(ra.best_val_top1 == best);
  CHECK_FALSE(a.training());
  ModelClassifier clf(a);
  CHECK(evaluate(clf, ds, va, 3).top1 == best);

  CHECK(history_csv(ra).rfind("epoch,train_loss,val_top1\n", 0) == 0);
  const RunRecord back = run_record_from_json(to_json(ra));
  CHECK(to_json(back) == to_json(ra));
  CHECK_THROWS_AS(run_record_from_json(nlohmann::json{{"arch", 3}}), IoError);

  Model<float> c(small_model(), 11);
  const RunRecord rc = train(c, ds, tr, va, cfg, 6);
  CHECK(to_json(rc).dump() != to_json(ra).dump());
}

TEST_CASE("training stop rules and edge cases") {
  const MagDataset& ds = small_data();
  const Split s = split_dataset(ds, 0);
  const auto tr = filter_mag(ds, s.train, 1), va = filter_mag(ds, s.val, 1);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.record_wall_time = false;

  cfg.epochs = 0;
  Model<float> m(small_model(), 3);
  const auto before = m.snapshot();
  const RunRecord r0 = train(m, ds, tr, va, cfg, 0);
  CHECK(r0.best_epoch == 0);
  CHECK(r0.history.empty());
  CHECK(r0.stop_reason == "no epochs requested");
  const auto after = m.snapshot();
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);

  cfg.epochs = 6;
  cfg.patience = 1;
  cfg.stop_at_perfect_val = false;
  for (std::uint64_t seed : {0, 1, 2}) {
    Model<float> p(small_model(), seed);
    const RunRecord rp = train(p, ds, tr, va, cfg, seed);
    // stops exactly at the first epoch that fails to beat every earlier one
    std::size_t expect = rp.history.size();
    for (std::size_t e = 1; e < rp.history.size(); ++e) {
      bool improved = true;
      for (std::size_t k = 0; k < e; ++k) improved = improved && rp.history[e].val_top1 > rp.history[k].val_top1;
      if (!improved) {
        expect = e + 1;
        break;
      }
    }
    CHECK(rp.history.size() == expect);
    if (expect < 6) CHECK(rp.stop_reason == "no validation improvement for 1 epochs");
  }

  Model<float> p(small_model(), 3);
  CHECK_THROWS_AS(train(p, ds, {}, va, cfg, 0), ConfigError);
  CHECK_THROWS_AS(train(p, ds, tr, {}, cfg, 0), ConfigError);

  cfg.epochs = 2;
  CHECK_THROWS_AS(best_of_runs(small_model(), ds, tr, va, va, cfg, {}), ConfigError);
  CHECK_THROWS_AS(best_of_runs(small_model(), ds, tr, va, va, cfg, {1, 1}), ConfigError);
}

TEST_CASE("best of runs tests every run and picks by the selection rule") {
  const MagDataset& ds = small_data();
  const Split s = split_dataset(ds, 0);
  const auto tr = filter_mag(ds, s.train, 3), va = filter_mag(ds, s.val, 3), te = filter_mag(ds, s.test, 3);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.record_wall_time = false;
  const BestOfRuns b = best_of_runs(small_model(), ds, tr, va, te, cfg, {0, 1});
  REQUIRE(b.runs.size() == 2);
  std::vector<RunRecord> recs;
  for (const auto& r : b.runs) {
    REQUIRE(r.record.test.has_value());
    CHECK(r.record.test->total == te.size());
    recs.push_back(r.record);
  }
  CHECK(b.best == select_best(recs));
  CHECK(b.runs[0].record.seed == 0);
  CHECK(b.runs[1].record.seed == 1);
}
