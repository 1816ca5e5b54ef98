#include <doctest.h>

#include <cmath>

#include "common/rng.hpp"
#include "mixers/mixers.hpp"
#include "spectral/fourier.hpp"
#include "tensor/gradcheck.hpp"
#include "tensor/ops.hpp"

using namespace magmix;

namespace {

template <typename T>
Tensor<T> randn(Shape s, Rng& rng) {
  Tensor<T> t(std::move(s));
  for (T& v : t.storage()) v = static_cast<T>(rng.normal());
  return t;
}

BlockConfig block(MixerKind kind, Index c, Index h, Index w) {
  BlockConfig cfg;
  cfg.kind = kind;
  cfg.channels = c;
  cfg.height = h;
  cfg.width = w;
  cfg.heads = 2;
  cfg.kernel_size = 3;
  return cfg;
}

// Perturbs every parameter away from its initial value so that zero-initialized
// biases and unit norm scales also get exercised.
void jitter(ParameterStore<double>& store, Rng& rng, double sd) {
  for (auto* p : store.parameters())
    for (double& v : p->value.storage()) v += sd * rng.normal();
}

}  // namespace

TEST_CASE("block config validation") {
  BlockConfig att = block(MixerKind::SelfAttentionMix, 30, 4, 4);
  att.heads = 4;
  CHECK_THROWS_AS(att.validate(), ConfigError);
  BlockConfig wav = block(MixerKind::WaveletMix, 32, 12, 12);
  wav.dwt_levels = 3;
  CHECK_THROWS_AS(wav.validate(), ConfigError);
  CHECK_THROWS_AS(block(MixerKind::WaveletMix, 30, 8, 8).validate(), ConfigError);
  BlockConfig ok = block(MixerKind::WaveletMix, 32, 16, 16);
  ok.dwt_levels = 2;
  CHECK_NOTHROW(ok.validate());
  CHECK(ok.hidden_channels() == 64);
}

TEST_CASE("every block preserves shape") {
  for (MixerKind kind : kAllMixerKinds) {
    CAPTURE(to_string(kind));
    for (int levels : {1, 2}) {
      BlockConfig cfg = block(kind, 32, 16, 16);
      cfg.dwt_levels = levels;
      ParameterStore<float> store;
      Rng rng(31);
      MetaFormerBlock<float> blk(cfg, store, "b", rng);
      Tape<float> tape;
      const Var<float> y = blk.forward(tape, tape.input(randn<float>({2, 32, 16, 16}, rng)), true);
      CHECK(y.shape() == Shape{2, 32, 16, 16});
      auto mixer = make_mixer<float>(cfg, store, "m" + std::to_string(levels), rng);
      CHECK(mixer->forward(tape, tape.input(randn<float>({1, 32, 16, 16}, rng)), false).shape() ==
            Shape{1, 32, 16, 16});
    }
  }
}

TEST_CASE("zero block weights give the identity") {
  for (MixerKind kind : kAllMixerKinds) {
    CAPTURE(to_string(kind));
    const BlockConfig cfg = block(kind, 8, 4, 4);
    ParameterStore<double> store;
    Rng rng(32);
    MetaFormerBlock<double> blk(cfg, store, "b", rng);
    for (auto* p : store.parameters()) p->value.fill(0.0);
    const Tensor<double> x = randn<double>({2, 8, 4, 4}, rng);
    for (bool training : {false, true}) {
      Tape<double> tape;
      CHECK(blk.forward(tape, tape.input(x), training).value() == x);
    }
  }
}

TEST_CASE("block and mixer gradients match central differences") {
  for (MixerKind kind : kAllMixerKinds) {
    CAPTURE(to_string(kind));
    for (int levels : {1, 2}) {
      if (levels == 2 && kind != MixerKind::WaveletMix) continue;
      BlockConfig cfg = block(kind, 8, 4, 4);
      cfg.dwt_levels = levels;
      ParameterStore<double> store;
      Rng rng(33);
      MetaFormerBlock<double> blk(cfg, store, "b", rng);
      jitter(store, rng, 0.3);
      const Tensor<double> x = randn<double>({2, 8, 4, 4}, rng);
      const Tensor<double> r = randn<double>({2, 8, 4, 4}, rng);
      const double perr = finite_diff_check_params(
          [&](Tape<double>& t) { return sum(mul(blk.forward(t, t.input(x), true), t.input(r))); }, store.parameters());
      CHECK(perr < 1e-3);
      const double xerr = finite_diff_check(
          [&](Tape<double>& t, const Var<double>& v) { return sum(mul(blk.forward(t, v, true), t.input(r))); }, x);
      CHECK(xerr < 1e-3);
    }
  }
}

TEST_CASE("wavelet mixer taps show no detail energy for constant input") {
  for (int levels : {1, 2}) {
    BlockConfig cfg = block(MixerKind::WaveletMix, 32, 16, 16);
    cfg.dwt_levels = levels;
    ParameterStore<double> store;
    Rng rng(34);
    WaveletMixer<double> mix(cfg, store, "w", rng);
    jitter(store, rng, 0.1);
    std::vector<Tensor<double>> tap;
    mix.set_tap(&tap);
    Tape<double> tape;
    mix.forward(tape, tape.input(Tensor<double>({1, 32, 16, 16}, 0.6)), false);
    REQUIRE(tap.size() == static_cast<std::size_t>(levels));
    for (const auto& bands : tap) {
      const Index q = bands.dim(1) / 4, plane = bands.dim(2) * bands.dim(3);
      CHECK(bands.dim(1) == 32);
      for (Index i = q * plane; i < bands.size(); ++i) CHECK(bands[i] == 0.0);
      bool ll_nonzero = false;
      for (Index i = 0; i < q * plane; ++i) ll_nonzero = ll_nonzero || bands[i] != 0.0;
      CHECK(ll_nonzero);
    }
  }
}

TEST_CASE("fourier mixer equals the real part of dft2") {
  Rng rng(35);
  const Tensor<double> x = randn<double>({2, 3, 6, 5}, rng);
  FourierMixer<double> mix;
  Tape<double> tape;
  const Var<double> y = mix.forward(tape, tape.input(x), false);
  CHECK(y.value() == dft2(x).real);
  const Var<double> c = mix.forward(tape, tape.input(Tensor<double>({1, 1, 4, 4}, 0.25)), false);
  CHECK(c.value()[0] == doctest::Approx(0.25 * 16));
  for (Index i = 1; i < 16; ++i) CHECK(std::abs(c.value()[i]) < 1e-12);
}

TEST_CASE("attention with one token returns the value projection") {
  BlockConfig cfg = block(MixerKind::SelfAttentionMix, 8, 1, 1);
  ParameterStore<double> store;
  Rng rng(36);
  AttentionMixer<double> att(cfg, store, "a", rng);
  jitter(store, rng, 0.2);
  const Tensor<double> x = randn<double>({3, 8, 1, 1}, rng);
  Tape<double> tape;
  const Var<double> y = att.forward(tape, tape.input(x), false);
  const auto& wq = att.qkv_weight().value;
  const auto& bq = att.qkv_bias().value;
  const auto& wp = att.proj_weight().value;
  const auto& bp = att.proj_bias().value;
  for (Index n = 0; n < 3; ++n) {
    double v[8];
    for (Index j = 0; j < 8; ++j) {
      v[j] = bq[16 + j];
      for (Index i = 0; i < 8; ++i) v[j] += x[n * 8 + i] * wq.at({i, 16 + j});
    }
    for (Index o = 0; o < 8; ++o) {
      double ref = bp[o];
      for (Index j = 0; j < 8; ++j) ref += v[j] * wp.at({j, o});
      CHECK(y.value()[n * 8 + o] == doctest::Approx(ref).epsilon(1e-12));
    }
  }
}

TEST_CASE("attention rows sum to one") {
  BlockConfig cfg = block(MixerKind::SelfAttentionMix, 16, 4, 5);
  cfg.heads = 4;
  ParameterStore<float> store;
  Rng rng(37);
  AttentionMixer<float> att(cfg, store, "a", rng);
  std::vector<float> weights;
  att.set_tap(&weights);
  Tape<float> tape;
  att.forward(tape, tape.input(randn<float>({2, 16, 4, 5}, rng)), false);
  const std::size_t t = 20;
  REQUIRE(weights.size() == 2 * 4 * t * t);
  for (std::size_t row = 0; row < weights.size() / t; ++row) {
    double s = 0;
    for (std::size_t k = 0; k < t; ++k) s += weights[row * t + k];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("depthwise mixer with an impulse kernel is the identity") {
  const BlockConfig cfg = block(MixerKind::DepthwiseConvMix, 6, 7, 5);
  ParameterStore<double> store;
  Rng rng(38);
  DepthwiseMixer<double> dw(cfg, store, "d", rng);
  dw.kernel().value.fill(0.0);
  for (Index c = 0; c < 6; ++c) dw.kernel().value.at({c, 0, 1, 1}) = 1.0;
  dw.bias().value.fill(0.0);
  const Tensor<double> x = randn<double>({2, 6, 7, 5}, rng);
  Tape<double> tape;
  CHECK(dw.forward(tape, tape.input(x), false).value() == x);
}

TEST_CASE("per-channel mixers are channel-permutation equivariant") {
  Rng rng(39);
  const Index c = 5;
  const Tensor<float> x = randn<float>({2, c, 4, 4}, rng);
  const std::vector<Index> perm{3, 0, 4, 1, 2};
  Tensor<float> xp(x.shape());
  for (Index n = 0; n < 2; ++n)
    for (Index k = 0; k < c; ++k)
      for (Index i = 0; i < 16; ++i) xp[(n * c + k) * 16 + i] = x[(n * c + perm[k]) * 16 + i];

  auto check = [&](TokenMixer<float>& mix) {
    Tape<float> tape;
    const Tensor<float> y = mix.forward(tape, tape.input(x), false).value();
    const Tensor<float> yp = mix.forward(tape, tape.input(xp), false).value();
    for (Index n = 0; n < 2; ++n)
      for (Index k = 0; k < c; ++k)
        for (Index i = 0; i < 16; ++i) CHECK(yp[(n * c + k) * 16 + i] == y[(n * c + perm[k]) * 16 + i]);
  };
  FourierMixer<float> fm;
  check(fm);
  ParameterStore<float> store;
  SpatialMlpMixer<float> mlp(block(MixerKind::SpatialMLPMix, c, 4, 4), store, "s", rng);
  check(mlp);
}

TEST_CASE("resolution flexibility by mixer kind") {
  for (MixerKind kind : kAllMixerKinds) {
    CAPTURE(to_string(kind));
    const BlockConfig cfg = block(kind, 8, 8, 8);
    ParameterStore<float> store;
    Rng rng(40);
    auto mix = make_mixer<float>(cfg, store, "m", rng);
    Tape<float> tape;
    const Tensor<float> other = randn<float>({1, 8, 4, 12}, rng);
    if (kind == MixerKind::SpatialMLPMix) {
      CHECK_FALSE(accepts_any_resolution(kind));
      CHECK_THROWS_AS(mix->forward(tape, tape.input(other), false), ShapeError);
    } else {
      CHECK(accepts_any_resolution(kind));
      CHECK(mix->forward(tape, tape.input(other), false).shape() == other.shape());
    }
  }
}
