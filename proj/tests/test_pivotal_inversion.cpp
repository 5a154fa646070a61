#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "videodirector/error.hpp"
#include "videodirector/pivotal_inversion.hpp"

using namespace vdir;

namespace {

const ScheduleParams kSchedule{1000, 1e-4, 2e-2, 5};

TuneConfig quick_tune(NullTextMode mode = NullTextMode::multi_frame, bool stdg = false) {
  TuneConfig c;
  c.inner_iters = 6;
  c.mode = mode;
  c.stdg_enabled = stdg;
  return c;
}

double final_deviation(const ReconstructResult& r) { return r.deviation.back(); }

}  // namespace

TEST_CASE("inversion follows the DDIM loop with the conditional estimate") {
  const Denoiser model = testing::tiny_model();
  const auto& cfg = model.config();
  const NDArray z0 = testing::random_array(cfg.latent_shape(), 21, 0.5);
  const Trajectory traj = run_ddim_inversion(z0, "a red square", kSchedule, model);
  REQUIRE(traj.latents.size() == 6);
  REQUIRE(traj.records.size() == 5);
  CHECK(traj.latents[0] == z0);
  CHECK(traj.records[0].blocks.size() == cfg.num_blocks);

  const NDArray text = encode_text("a red square", cfg).vectors;
  const auto expected = ddim_invert_loop(z0, kSchedule.make(), [&](const NDArray& z, int t) {
    return model.denoise(z, t, text, false).eps;
  });
  for (std::size_t k = 0; k < expected.size(); ++k)
    CHECK(max_abs_diff(traj.latents[k], expected[k]) <= 1e-12);
}

TEST_CASE("trajectory and bank persistence") {
  const Denoiser model = testing::tiny_model();
  const NDArray z0 = testing::random_array(model.config().latent_shape(), 22, 0.5);
  Trajectory traj = run_ddim_inversion(z0, "a blue disk", kSchedule, model);
  traj.weights_path = "/some/weights";
  const auto dir = testing::scratch_dir("traj");
  traj.save(dir / "traj");
  const Trajectory back = Trajectory::load(dir / "traj");
  CHECK(back.prompt == traj.prompt);
  CHECK(back.schedule == traj.schedule);
  CHECK(back.weights_path == traj.weights_path);
  REQUIRE(back.latents.size() == traj.latents.size());
  REQUIRE(back.records.size() == traj.records.size());
  for (std::size_t k = 0; k < traj.latents.size(); ++k)
    CHECK(max_abs_diff(back.latents[k], traj.latents[k]) <= 1e-6);
  const auto& a = traj.records[2].blocks[1];
  const auto& b = back.records[2].blocks[1];
  CHECK(max_abs_diff(a.temporal_maps, b.temporal_maps) <= 1e-6);
  CHECK(max_abs_diff(a.self_keys, b.self_keys) <= 1e-6);
  CHECK(max_abs_diff(a.cross_maps, b.cross_maps) <= 1e-6);

  NullTextBank bank = NullTextBank::initial(model.config(), 5, NullTextMode::shared);
  bank.embeddings[3] = testing::random_array(model.config().frame_text_shape(), 23);
  bank.save(dir / "bank");
  const NullTextBank bank_back = NullTextBank::load(dir / "bank");
  CHECK(bank_back.mode == NullTextMode::shared);
  REQUIRE(bank_back.embeddings.size() == 5);
  CHECK(max_abs_diff(bank_back.embeddings[3], bank.embeddings[3]) <= 1e-6);

  CHECK_THROWS_AS(Trajectory::load(dir / "missing"), Error);
  CHECK_THROWS_AS(parse_mode("per_pixel"), Error);
  CHECK(parse_mode(mode_name(NullTextMode::shared)) == NullTextMode::shared);
  CHECK(parse_optimizer("gd") == TuneOptimizer::gd);
}

TEST_CASE("oracle denoiser inverts and reconstructs") {
  const auto sched = ScheduleParams{50, 1e-4, 2e-2, 50}.make();
  GaussianOracle oracle{testing::random_array({2, 1, 2, 2}, 24, 0.5), 1.0};
  const NDArray z0 = testing::random_array({2, 1, 2, 2}, 25);
  const auto eps = [&](const NDArray& z, int t) { return oracle_epsilon(z, t, oracle, sched); };
  const auto latents = ddim_invert_loop(z0, sched, eps);
  const NDArray back = ddim_sample_loop(latents.back(), sched, eps);
  CHECK(norm(back + z0 * -1.0) <= 1e-3 * norm(z0));
}

TEST_CASE("null-text tuning traces never increase") {
  const Denoiser model = testing::tiny_model();
  const NDArray z0 = testing::random_array(model.config().latent_shape(), 26, 0.5);
  const Trajectory traj = run_ddim_inversion(z0, "a green square", kSchedule, model);
  for (const bool stdg : {false, true}) {
    const TuneResult tuned = optimize_null_text(traj, model, nullptr, quick_tune(NullTextMode::multi_frame, stdg));
    REQUIRE(tuned.loss_traces.size() == 5);
    for (const auto& trace : tuned.loss_traces) {
      REQUIRE(!trace.empty());
      for (std::size_t j = 1; j < trace.size(); ++j) CHECK(trace[j] <= trace[j - 1]);
    }
    CHECK(tuned.bank.embeddings.size() == 5);
  }
}

TEST_CASE("tuned bank reconstructs closer than the initial bank") {
  const Denoiser model = testing::tiny_model();
  const NDArray z0 = testing::random_array(model.config().latent_shape(), 27, 0.5);
  const Trajectory traj = run_ddim_inversion(z0, "a white disk", kSchedule, model);
  const TuneConfig cfg = quick_tune();
  const TuneResult tuned = optimize_null_text(traj, model, nullptr, cfg);
  const auto base = reconstruct(traj, NullTextBank::initial(model.config(), 5, cfg.mode), model,
                                nullptr, cfg);
  const auto rec = reconstruct(traj, tuned.bank, model, nullptr, cfg);
  REQUIRE(rec.deviation.size() == 5);
  CHECK(final_deviation(rec) < final_deviation(base));
  CHECK(rec.latent == rec.path.back());
}

TEST_CASE("shared mode keeps frames identical") {
  const Denoiser model = testing::tiny_model();
  const auto& c = model.config();
  const NDArray z0 = testing::random_array(c.latent_shape(), 28, 0.5);
  const Trajectory traj = run_ddim_inversion(z0, "a purple disk", kSchedule, model);
  const TuneResult tuned = optimize_null_text(traj, model, nullptr, quick_tune(NullTextMode::shared));
  CHECK(tuned.bank.mode == NullTextMode::shared);
  const std::size_t stride = c.text_len * c.text_dim;
  for (const auto& e : tuned.bank.embeddings)
    for (std::size_t f = 1; f < c.frames; ++f)
      for (std::size_t j = 0; j < stride; ++j) REQUIRE(e[f * stride + j] == e[j]);
}

TEST_CASE("a trajectory sampled with the initial bank is a fixed point") {
  const Denoiser model = testing::tiny_model();
  const auto& c = model.config();
  const auto sched = kSchedule.make();
  const NDArray text = encode_text("a red disk", c).vectors;
  const NullTextBank bank = NullTextBank::initial(c, 5, NullTextMode::multi_frame);

  Trajectory traj;
  traj.prompt = "a red disk";
  traj.schedule = kSchedule;
  traj.latents.resize(6);
  traj.records.resize(5);
  NDArray z = testing::random_array(c.latent_shape(), 29);
  traj.latents[5] = z;
  for (int i = 0; i < 5; ++i) {
    const int t = sched.indices()[static_cast<std::size_t>(i)];
    const NDArray eps_c = model.denoise(z, t, text, false).eps;
    const NDArray eps_u = model.denoise(z, t, bank.embeddings[static_cast<std::size_t>(i)], false).eps;
    z = ddim_step(z, guided_epsilon({eps_c, eps_u, 1.0, nullptr}), t, sched.previous_index(i), sched);
    traj.latents[static_cast<std::size_t>(4 - i)] = z;
  }

  const TuneResult tuned = optimize_null_text(traj, model, nullptr, quick_tune());
  for (const auto& trace : tuned.loss_traces) {
    REQUIRE(trace.size() == 1);
    CHECK(trace[0] <= 1e-20);
  }
  for (std::size_t i = 0; i < 5; ++i) CHECK(tuned.bank.embeddings[i] == bank.embeddings[i]);
  const auto rec = reconstruct(traj, tuned.bank, model, nullptr, quick_tune());
  for (const double d : rec.deviation) CHECK(d <= 1e-10);
}

TEST_CASE("reconstruct rejects a bank of the wrong length") {
  const Denoiser model = testing::tiny_model();
  const NDArray z0 = testing::random_array(model.config().latent_shape(), 30, 0.5);
  const Trajectory traj = run_ddim_inversion(z0, "a red square", kSchedule, model);
  const NullTextBank bank = NullTextBank::initial(model.config(), 4, NullTextMode::multi_frame);
  CHECK_THROWS_AS(reconstruct(traj, bank, model, nullptr, quick_tune()), Error);
  TuneConfig bad = quick_tune();
  bad.step_size = -1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
}
