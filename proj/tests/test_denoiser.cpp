#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "videodirector/attention_control.hpp"
#include "videodirector/error.hpp"
#include "videodirector/pipeline.hpp"

using namespace vdir;

namespace {

void check_rows_sum_to_one(const NDArray& maps) {
  const std::size_t cols = maps.shape().back();
  for (std::size_t r = 0; r < maps.size(); r += cols) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += maps[r + j];
    REQUIRE(std::abs(s - 1.0) <= 1e-5);
  }
}

double feature_objective(const Denoiser& m, const NDArray& z, int t, const NDArray& text,
                         const std::vector<FeatureCotangent>& cots) {
  const auto rec = m.denoise(z, t, text, true).record;
  double s = 0.0;
  for (const auto& c : cots) {
    const auto& b = rec.blocks[c.block];
    s += dot(c.kind == FeatureKind::temporal_maps ? b.temporal_maps : b.self_keys, c.cotangent);
  }
  return s;
}

// Hook that recomputes the plain attention output through the SA-I path using
// the model's own maps, which must reproduce the unhooked forward.
struct ReplayHook : AttentionHook {
  const AttentionRecord* rec;
  std::size_t heads;
  std::optional<NDArray> self_attention(std::size_t block, const NDArray&, const NDArray&,
                                        const NDArray& v) override {
    return sa1_replace(rec->blocks[block].self_maps, v, heads);
  }
  std::optional<NDArray> cross_maps(std::size_t block, const NDArray&) override {
    return rec->blocks[block].cross_maps;
  }
};

}  // namespace

TEST_CASE("tokenizer and text encoder") {
  CHECK(tokenize("A Red-Cat,  walks!") == std::vector<std::string>{"a", "redcat", "walks"});
  const auto cfg = testing::tiny_config();
  CHECK(encode_text("a cat", cfg).vectors == encode_text("a cat", cfg).vectors);
  const NDArray empty = encode_text("", cfg).vectors;
  CHECK(max_abs(empty) == 0.0);
  const auto cat = encode_text("a cat", cfg).vectors, dog = encode_text("a dog", cfg).vectors;
  const std::size_t c = cfg.text_dim;
  for (std::size_t j = 0; j < c; ++j) CHECK(cat[j] == dog[j]);
  CHECK(max_abs_diff(cat, dog) > 0.0);
  // Padding rows stay zero.
  for (std::size_t j = 2 * c; j < cat.size(); ++j) CHECK(cat[j] == 0.0);
  // Truncation at text_len.
  CHECK(encode_text("a b c d e f g", cfg).tokens.size() == cfg.text_len);
}

TEST_CASE("forward pass contract") {
  const auto cfg = testing::tiny_config();
  const Denoiser m = testing::tiny_model();
  const NDArray z = testing::random_array(cfg.latent_shape(), 1);
  const NDArray text = encode_text("a red square", cfg).vectors;
  const auto out = m.denoise(z, 500, text, true);
  CHECK(out.eps.shape() == cfg.latent_shape());
  CHECK(out.eps.all_finite());
  const auto again = m.denoise(z, 500, text, true);
  CHECK(out.eps == again.eps);

  REQUIRE(out.record.blocks.size() == cfg.num_blocks);
  const std::size_t n = cfg.tokens(), h = cfg.heads, F = cfg.frames, d = cfg.model_width;
  for (const auto& b : out.record.blocks) {
    CHECK(b.temporal_maps.shape() == Shape{n * h, F, F});
    CHECK(b.self_queries.shape() == Shape{F, n, d});
    CHECK(b.self_keys.shape() == Shape{F, n, d});
    CHECK(b.self_values.shape() == Shape{F, n, d});
    CHECK(b.self_maps.shape() == Shape{F * h, n, n});
    CHECK(b.cross_maps.shape() == Shape{F * h, n, cfg.text_len});
    check_rows_sum_to_one(b.temporal_maps);
    check_rows_sum_to_one(b.self_maps);
    check_rows_sum_to_one(b.cross_maps);
  }
  CHECK(m.denoise(z, 500, text, false).record.empty());
  CHECK(max_abs_diff(m.denoise(z, 500, per_frame(text, F), false).eps, out.eps) == 0.0);
  CHECK(max_abs_diff(m.denoise(z, 499, text, false).eps, out.eps) > 0.0);

  CHECK_THROWS_AS(m.denoise(NDArray({1, 2, 3}), 500, text, false), Error);
  CHECK_THROWS_AS(m.denoise(z, 500, NDArray({3, 3}), false), Error);
}

TEST_CASE("replaying the model's own attention reproduces the forward") {
  const auto cfg = testing::tiny_config();
  const Denoiser m = testing::tiny_model();
  const NDArray z = testing::random_array(cfg.latent_shape(), 2);
  const NDArray text = encode_text("a blue disk", cfg).vectors;
  const auto base = m.denoise(z, 300, text, true);
  ReplayHook hook;
  hook.rec = &base.record;
  hook.heads = cfg.heads;
  const auto replayed = m.denoise(z, 300, text, false, &hook);
  CHECK(max_abs_diff(replayed.eps, base.eps) <= 1e-12);
  AttentionHook noop;
  CHECK(m.denoise(z, 300, text, false, &noop).eps == base.eps);
}

TEST_CASE("latent VJP against central differences") {
  const auto cfg = testing::tiny_config();
  const Denoiser m = testing::tiny_model();
  const NDArray z = testing::random_array(cfg.latent_shape(), 3);
  const NDArray text = encode_text("a cat", cfg).vectors;
  const int t = 400;
  const auto rec = m.denoise(z, t, text, true).record;

  std::vector<FeatureCotangent> zero{
      {FeatureKind::temporal_maps, 0, NDArray::like(rec.blocks[0].temporal_maps)}};
  const NDArray g0 = m.grad_wrt_latent(z, t, text, zero);
  CHECK(g0.shape() == z.shape());
  CHECK(max_abs(g0) == 0.0);

  std::vector<FeatureCotangent> cots{
      {FeatureKind::temporal_maps, 0, testing::random_array(rec.blocks[0].temporal_maps.shape(), 4)},
      {FeatureKind::self_keys, 1, testing::random_array(rec.blocks[1].self_keys.shape(), 5)}};
  const NDArray g = m.grad_wrt_latent(z, t, text, cots);
  CHECK(g.shape() == z.shape());
  Rng pick(6);
  for (int probe = 0; probe < 5; ++probe) {
    const std::size_t i = pick.below(z.size());
    const double h = 1e-3;
    NDArray zp = z, zm = z;
    zp[i] += h;
    zm[i] -= h;
    const double fd =
        (feature_objective(m, zp, t, text, cots) - feature_objective(m, zm, t, text, cots)) /
        (2 * h);
    INFO("coordinate " << i << " analytic " << g[i] << " fd " << fd);
    CHECK(std::abs(g[i] - fd) <= 1e-3 * std::max(std::abs(fd), 1e-3));
  }
}

TEST_CASE("feature probe agrees with the recorded forward") {
  const auto cfg = testing::tiny_config();
  const Denoiser m = testing::tiny_model();
  const NDArray z = testing::random_array(cfg.latent_shape(), 7);
  const NDArray text = encode_text("a dog", cfg).vectors;
  const auto out = m.denoise(z, 100, text, true);
  FeatureProbe probe(m, z, 100, text);
  CHECK(max_abs_diff(probe.eps(), out.eps) <= 1e-12);
  CHECK(max_abs_diff(probe.feature(FeatureKind::temporal_maps, 1),
                     out.record.blocks[1].temporal_maps) <= 1e-12);
  CHECK(max_abs_diff(probe.feature(FeatureKind::self_keys, 0), out.record.blocks[0].self_keys) <=
        1e-12);
}

TEST_CASE("text VJP against central differences") {
  const auto cfg = testing::tiny_config();
  const Denoiser m = testing::tiny_model();
  const NDArray z = testing::random_array(cfg.latent_shape(), 8);
  const NDArray text = testing::random_array(cfg.frame_text_shape(), 9);
  const NDArray cot = testing::random_array(cfg.latent_shape(), 10);
  const auto r = m.text_vjp(z, 250, text, cot);
  CHECK(r.eps == m.denoise(z, 250, text, false).eps);
  REQUIRE(r.grad_text.shape() == cfg.frame_text_shape());
  Rng pick(11);
  for (int probe = 0; probe < 5; ++probe) {
    const std::size_t i = pick.below(text.size());
    const double h = 1e-4;
    NDArray tp = text, tm = text;
    tp[i] += h;
    tm[i] -= h;
    const double fd = (dot(m.denoise(z, 250, tp, false).eps, cot) -
                       dot(m.denoise(z, 250, tm, false).eps, cot)) /
                      (2 * h);
    CHECK(std::abs(r.grad_text[i] - fd) <= 1e-3 * std::max(std::abs(fd), 1e-4));
  }
}

TEST_CASE("Gaussian oracle") {
  const auto sched = NoiseSchedule::from_alpha_bar({0.5});
  const double sa = std::sqrt(0.5);
  GaussianOracle o{NDArray({3}, {0.2, -0.4, 1.0}), 0.7};
  NDArray at_mean = o.mean;
  at_mean *= sa;
  CHECK(max_abs(oracle_epsilon(at_mean, 1, o, sched)) <= 1e-15);

  // Independent closed form: E[eps | z] = sqrt(1-ab) (z - sqrt(ab) mu) / (ab s2 + 1 - ab).
  const NDArray z({3}, {0.3, 0.1, -0.5});
  const NDArray e = oracle_epsilon(z, 1, o, sched);
  for (std::size_t i = 0; i < 3; ++i) {
    const double ref = std::sqrt(0.5) * (z[i] - sa * o.mean[i]) / (0.5 * 0.7 + 0.5);
    CHECK(e[i] == doctest::Approx(ref).epsilon(1e-12));
  }

  GaussianOracle point{o.mean, 1e-14};
  const NDArray ep = oracle_epsilon(z, 1, point, sched);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(ep[i] == doctest::Approx((z[i] - sa * o.mean[i]) / std::sqrt(0.5)).epsilon(1e-9));

  CHECK_THROWS_AS(oracle_epsilon(z, 0, o, sched), Error);
}

TEST_CASE("Gaussian oracle matches a Monte-Carlo posterior mean") {
  // mu = 0, s2 = 1, ab = 0.5, z_t = 1: estimate E[eps | z_t in a narrow bin].
  const auto sched = NoiseSchedule::from_alpha_bar({0.5});
  GaussianOracle o{NDArray({1}, {0.0}), 1.0};
  const double predicted = oracle_epsilon(NDArray({1}, {1.0}), 1, o, sched)[0];
  Rng rng(12);
  // Kernel-weighted regression of eps on z_t over 1e6 joint samples.
  double num = 0.0, den = 0.0;
  const double bw = 0.05;
  for (int i = 0; i < 1000000; ++i) {
    const double x0 = rng.normal(), eps = rng.normal();
    const double zt = std::sqrt(0.5) * x0 + std::sqrt(0.5) * eps;
    const double w = std::exp(-0.5 * (zt - 1.0) * (zt - 1.0) / (bw * bw));
    num += w * eps;
    den += w;
  }
  CHECK(std::abs(num / den - predicted) <= 1e-2);
}

TEST_CASE("weights save and load") {
  const auto dir = testing::scratch_dir("weights");
  const auto cfg = testing::tiny_config();
  const auto w = DenoiserWeights::initialize(cfg);
  w.save(dir);
  const auto back = DenoiserWeights::load(dir);
  CHECK(back.config.frames == cfg.frames);
  CHECK(back.config.seed == cfg.seed);
  REQUIRE(back.names == w.names);
  for (std::size_t i = 0; i < w.arrays.size(); ++i) {
    for (std::size_t j = 0; j < w.arrays[i].size(); ++j)
      REQUIRE(back.arrays[i][j] == static_cast<float>(w.arrays[i][j]));
  }
  CHECK_THROWS_AS(w.get("no.such.param"), Error);
  CHECK_THROWS_AS(DenoiserWeights::load(dir / "missing"), Error);
}

TEST_CASE("toy training") {
  const auto cfg = testing::tiny_config();
  const auto sched = NoiseSchedule::linear(1000, 1e-4, 2e-2, 20);
  std::vector<TrainExample> data;
  Rng g(13);
  for (int i = 0; i < 4; ++i) {
    Rng r = g.fork(static_cast<std::uint64_t>(i));
    auto v = gen_synthetic(random_spec(r, cfg.frames, cfg.channels, cfg.height, cfg.width), r);
    data.push_back({v.video, v.prompt});
  }
  Rng r0(1);
  const auto none = train_toy(cfg, data, 0, sched, r0);
  CHECK(none.weights.arrays == DenoiserWeights::initialize(cfg).arrays);

  Rng r1(2), r2(2);
  const auto a = train_toy(cfg, data, 5, sched, r1);
  const auto b = train_toy(cfg, data, 5, sched, r2);
  CHECK(a.weights.arrays == b.weights.arrays);
  CHECK(a.loss_trace == b.loss_trace);
  CHECK(a.weights.schedule.num_train_steps == 1000);
}

TEST_CASE("training loss decreases on the default model over 500 steps") {
  DenoiserConfig cfg;
  const auto sched = NoiseSchedule::linear(1000, 1e-4, 2e-2, 20);
  std::vector<TrainExample> data;
  const Rng root(14);
  for (int i = 0; i < 16; ++i) {
    Rng r = root.fork(static_cast<std::uint64_t>(i));
    auto v = gen_synthetic(random_spec(r, cfg.frames, cfg.channels, cfg.height, cfg.width), r);
    data.push_back({v.video, v.prompt});
  }
  Rng rng(15);
  const auto res = train_toy(cfg, data, 500, sched, rng);
  REQUIRE(res.loss_trace.size() == 500);
  auto window_mean = [&](std::size_t from) {
    double s = 0.0;
    for (std::size_t i = from; i < from + 50; ++i) s += res.loss_trace[i];
    return s / 50;
  };
  CHECK(window_mean(450) < window_mean(0));
}
