#include "videodirector/pivotal_inversion.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "videodirector/error.hpp"

namespace vdir {
namespace {

std::string indexed(const char* stem, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03zu.vdt", stem, i);
  return buf;
}

nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) fail(ErrorKind::io, "missing manifest.json in " + dir.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, dir.string() + "/manifest.json: " + e.what());
  }
}

void write_manifest(const std::filesystem::path& dir, const nlohmann::ordered_json& m) {
  std::ofstream out(dir / "manifest.json");
  if (!out) fail(ErrorKind::io, "cannot write manifest in " + dir.string());
  out << m.dump(2) << '\n';
}

constexpr const char* kRecordFields[] = {"temporal_maps", "self_queries", "self_keys",
                                         "self_values",   "self_maps",    "cross_maps"};

NDArray* record_field(BlockRecord& b, std::size_t i) {
  NDArray* fields[] = {&b.temporal_maps, &b.self_queries, &b.self_keys,
                       &b.self_values,   &b.self_maps,    &b.cross_maps};
  return fields[i];
}

}  // namespace

const AttentionRecord& Trajectory::reference_for_step(int step) const {
  require(step >= 0 && static_cast<std::size_t>(step) < steps(), ErrorKind::range,
          "denoising step outside trajectory");
  return records[steps() - 1 - static_cast<std::size_t>(step)];
}

void Trajectory::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json m;
  m["prompt"] = prompt;
  m["weights"] = weights_path;
  m["schedule"] = {{"num_train_steps", schedule.num_train_steps},
                   {"beta_start", schedule.beta_start},
                   {"beta_end", schedule.beta_end},
                   {"num_sampling_steps", schedule.num_sampling_steps}};
  m["steps"] = steps();
  m["blocks"] = records.empty() ? 0 : records[0].blocks.size();
  for (std::size_t k = 0; k < latents.size(); ++k) write_array(dir / indexed("latent", k), latents[k]);
  for (std::size_t k = 0; k < records.size(); ++k) {
    for (std::size_t b = 0; b < records[k].blocks.size(); ++b) {
      BlockRecord br = records[k].blocks[b];
      for (std::size_t f = 0; f < std::size(kRecordFields); ++f) {
        const std::string stem =
            "record_" + std::to_string(b) + "_" + kRecordFields[f];
        write_array(dir / indexed(stem.c_str(), k), *record_field(br, f));
      }
    }
  }
  write_manifest(dir, m);
}

Trajectory Trajectory::load(const std::filesystem::path& dir) {
  const auto m = read_manifest(dir);
  Trajectory t;
  std::size_t steps = 0, blocks = 0;
  try {
    t.prompt = m.at("prompt");
    t.weights_path = m.value("weights", "");
    const auto& s = m.at("schedule");
    t.schedule = {s.at("num_train_steps"), s.at("beta_start"), s.at("beta_end"),
                  s.at("num_sampling_steps")};
    steps = m.at("steps");
    blocks = m.at("blocks");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "trajectory manifest: " + std::string(e.what()));
  }
  require(static_cast<int>(steps) == t.schedule.num_sampling_steps, ErrorKind::format,
          "trajectory length does not match its schedule");
  for (std::size_t k = 0; k <= steps; ++k) t.latents.push_back(read_array(dir / indexed("latent", k)));
  for (std::size_t k = 0; k < steps; ++k) {
    AttentionRecord rec;
    for (std::size_t b = 0; b < blocks; ++b) {
      BlockRecord br;
      for (std::size_t f = 0; f < std::size(kRecordFields); ++f) {
        const std::string stem = "record_" + std::to_string(b) + "_" + kRecordFields[f];
        *record_field(br, f) = read_array(dir / indexed(stem.c_str(), k));
      }
      rec.blocks.push_back(std::move(br));
    }
    t.records.push_back(std::move(rec));
  }
  return t;
}

const char* mode_name(NullTextMode mode) {
  return mode == NullTextMode::shared ? "shared" : "multi_frame";
}

NullTextMode parse_mode(const std::string& name) {
  if (name == "multi_frame") return NullTextMode::multi_frame;
  if (name == "shared") return NullTextMode::shared;
  fail(ErrorKind::validation, "unknown null-text mode '" + name + "'");
}

const char* optimizer_name(TuneOptimizer opt) { return opt == TuneOptimizer::gd ? "gd" : "adam"; }

TuneOptimizer parse_optimizer(const std::string& name) {
  if (name == "adam") return TuneOptimizer::adam;
  if (name == "gd") return TuneOptimizer::gd;
  fail(ErrorKind::validation, "unknown optimizer '" + name + "'");
}

NullTextBank NullTextBank::initial(const DenoiserConfig& cfg, std::size_t steps,
                                   NullTextMode mode) {
  NullTextBank bank;
  bank.mode = mode;
  bank.embeddings.assign(steps, per_frame(encode_text("", cfg).vectors, cfg.frames));
  return bank;
}

void NullTextBank::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json m;
  m["mode"] = mode_name(mode);
  m["steps"] = embeddings.size();
  for (std::size_t i = 0; i < embeddings.size(); ++i) write_array(dir / indexed("phi", i), embeddings[i]);
  write_manifest(dir, m);
}

NullTextBank NullTextBank::load(const std::filesystem::path& dir) {
  const auto m = read_manifest(dir);
  NullTextBank bank;
  std::size_t steps = 0;
  try {
    bank.mode = parse_mode(m.at("mode"));
    steps = m.at("steps");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "null-text manifest: " + std::string(e.what()));
  }
  for (std::size_t i = 0; i < steps; ++i) bank.embeddings.push_back(read_array(dir / indexed("phi", i)));
  return bank;
}

void TuneConfig::validate() const {
  require(inner_iters >= 1, ErrorKind::validation, "inner_iters must be >= 1");
  require(step_size > 0.0, ErrorKind::validation, "step_size must be positive");
  require(max_halvings >= 0, ErrorKind::validation, "max_halvings must be >= 0");
  require(omega >= 0.0, ErrorKind::validation, "omega must be nonnegative");
}

MaskSet background_only(const DenoiserConfig& cfg) {
  return MaskSet::from_foreground(NDArray({cfg.frames, cfg.height, cfg.width}));
}

Trajectory run_ddim_inversion(const NDArray& z0, const std::string& prompt,
                              const ScheduleParams& schedule, const Denoiser& model) {
  require(z0.all_finite(), ErrorKind::validation, "input latent has non-finite entries");
  const NoiseSchedule sched = schedule.make();
  const NDArray text = encode_text(prompt, model.config()).vectors;
  Trajectory traj;
  traj.prompt = prompt;
  traj.schedule = schedule;
  traj.latents.push_back(z0);
  int t = 0;
  const auto& idx = sched.indices();
  for (auto it = idx.rbegin(); it != idx.rend(); ++it) {
    const int t_next = *it;
    DenoiseOutput out = model.denoise(traj.latents.back(), t_next, text, /*record=*/true);
    traj.latents.push_back(ddim_invert_step(traj.latents.back(), out.eps, t, t_next, sched));
    traj.records.push_back(std::move(out.record));
    t = t_next;
  }
  return traj;
}

namespace {

struct StepContext {
  const Denoiser& model;
  const NoiseSchedule& sched;
  const TuneConfig& cfg;
  int t = 0;
  int t_prev = 0;
  const NDArray* z = nullptr;
  const NDArray* eps_cond = nullptr;
  const NDArray* guidance = nullptr;

  NDArray next_latent(const NDArray& eps_uncond) const {
    const NDArray eps_hat = guided_epsilon({*eps_cond, eps_uncond, cfg.omega, guidance});
    return ddim_step(*z, eps_hat, t, t_prev, sched);
  }
};

struct Evaluation {
  double loss = 0.0;
  NDArray grad;  // d loss / d phi
  NDArray eps_uncond;
};

}  // namespace

TuneResult optimize_null_text(const Trajectory& traj, const Denoiser& model, const MaskSet* masks,
                              const TuneConfig& cfg) {
  cfg.validate();
  const auto& mc = model.config();
  const NoiseSchedule sched = traj.schedule.make();
  const int n = sched.num_sampling_steps();
  require(traj.latents.size() == static_cast<std::size_t>(n) + 1 &&
              traj.records.size() == static_cast<std::size_t>(n),
          ErrorKind::validation, "trajectory incomplete for its schedule");
  const MaskSet fallback = background_only(mc);
  const MaskSet& m = masks ? *masks : fallback;
  const NDArray cond = encode_text(traj.prompt, mc).vectors;

  TuneResult result;
  result.bank = NullTextBank::initial(mc, static_cast<std::size_t>(n), cfg.mode);
  NDArray phi = result.bank.embeddings[0];
  NDArray z = traj.latents.back();

  for (int i = 0; i < n; ++i) {
    const int t = sched.indices()[static_cast<std::size_t>(i)];
    const int t_prev = sched.previous_index(i);
    const NDArray& target = traj.target_for_step(i);
    const NDArray eps_cond = model.denoise(z, t, cond, false).eps;
    NDArray guidance;
    if (cfg.stdg_enabled) {
      StdgResult g = compute_stdg(model, traj.reference_for_step(i), z, t, cond, m, cfg.stdg);
      result.diagnostics.push_back(diagnostic_row(t, g));
      guidance = std::move(g.combined.value);
    }
    const StepContext ctx{model, sched, cfg, t, t_prev, &z, &eps_cond,
                          guidance.empty() ? nullptr : &guidance};
    const double eps_coef = ddim_coefficients(sched.alpha_bar(t), sched.alpha_bar(t_prev)).second;

    // Loss and gradient at phi in one forward/backward pass.
    auto evaluate_at = [&](const NDArray& p) {
      // d loss / d eps_u = 2 * resid * eps_coef * (-omega); resid needs eps_u,
      // so the forward value comes from a plain pass first.
      Evaluation ev;
      ev.eps_uncond = model.denoise(z, t, p, false).eps;
      const NDArray resid = ctx.next_latent(ev.eps_uncond) - target;
      ev.loss = squared_norm(resid);
      if (ev.loss > cfg.divergence_loss || !std::isfinite(ev.loss)) {
        fail(ErrorKind::diverged, "null-text optimization diverged at step " + std::to_string(i) +
                                      " (loss " + std::to_string(ev.loss) + ")");
      }
      return ev;
    };
    auto gradient_at = [&](const NDArray& p, const Evaluation& ev) {
      const NDArray resid = ctx.next_latent(ev.eps_uncond) - target;
      NDArray g = model.text_vjp(z, t, p, resid * (-2.0 * cfg.omega * eps_coef)).grad_text;
      if (cfg.mode == NullTextMode::shared) {
        // Project onto the frame-shared subspace: mean over frames.
        const std::size_t frames = g.dim(0), row = g.size() / frames;
        for (std::size_t j = 0; j < row; ++j) {
          double s = 0.0;
          for (std::size_t f = 0; f < frames; ++f) s += g[f * row + j];
          s /= static_cast<double>(frames);
          for (std::size_t f = 0; f < frames; ++f) g[f * row + j] = s;
        }
      }
      return g;
    };

    Evaluation cur = evaluate_at(phi);
    std::vector<double> trace{cur.loss};
    NDArray m1 = NDArray::like(phi), m2 = NDArray::like(phi), dir = NDArray::like(phi);
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    double lr = cfg.step_size;
    for (int it = 0; it < cfg.inner_iters && cur.loss > cfg.early_stop_loss; ++it) {
      const NDArray g = gradient_at(phi, cur);
      if (cfg.optimizer == TuneOptimizer::gd) {
        dir = g;
      } else {
        const double bc1 = 1.0 - std::pow(kBeta1, it + 1);
        const double bc2 = 1.0 - std::pow(kBeta2, it + 1);
        for (std::size_t j = 0; j < phi.size(); ++j) {
          m1[j] = kBeta1 * m1[j] + (1.0 - kBeta1) * g[j];
          m2[j] = kBeta2 * m2[j] + (1.0 - kBeta2) * g[j] * g[j];
          dir[j] = (m1[j] / bc1) / (std::sqrt(m2[j] / bc2) + kEps);
        }
      }
      bool accepted = false;
      for (int h = 0; h <= cfg.max_halvings && !accepted; ++h) {
        NDArray trial = phi;
        trial.axpy(-lr, dir);
        Evaluation ev = evaluate_at(trial);
        if (ev.loss <= cur.loss) {
          phi = std::move(trial);
          cur = std::move(ev);
          accepted = true;
        } else {
          lr *= 0.5;
        }
      }
      if (!accepted) break;
      trace.push_back(cur.loss);
    }
    result.loss_traces.push_back(std::move(trace));
    result.bank.embeddings[static_cast<std::size_t>(i)] = phi;
    // Pivot: continue from the latent produced by the optimized embedding.
    z = ctx.next_latent(cur.eps_uncond);
  }
  return result;
}

ReconstructResult reconstruct(const Trajectory& traj, const NullTextBank& bank,
                              const Denoiser& model, const MaskSet* masks, const TuneConfig& cfg) {
  const NoiseSchedule sched = traj.schedule.make();
  const int n = sched.num_sampling_steps();
  require(bank.embeddings.size() == static_cast<std::size_t>(n) &&
              traj.latents.size() == static_cast<std::size_t>(n) + 1,
          ErrorKind::validation, "null-text bank length does not match the trajectory");
  const auto& mc = model.config();
  const MaskSet fallback = background_only(mc);
  const MaskSet& m = masks ? *masks : fallback;
  const NDArray cond = encode_text(traj.prompt, mc).vectors;

  ReconstructResult r;
  NDArray z = traj.latents.back();
  for (int i = 0; i < n; ++i) {
    const int t = sched.indices()[static_cast<std::size_t>(i)];
    DenoiseOutput c = model.denoise(z, t, cond, /*record=*/true);
    const NDArray eps_u = model.denoise(z, t, bank.embeddings[static_cast<std::size_t>(i)], false).eps;
    NDArray guidance;
    if (cfg.stdg_enabled) {
      StdgResult g = compute_stdg(model, traj.reference_for_step(i), z, t, cond, m, cfg.stdg);
      r.diagnostics.push_back(diagnostic_row(t, g));
      guidance = std::move(g.combined.value);
    }
    const NDArray eps_hat =
        guided_epsilon({c.eps, eps_u, cfg.omega, guidance.empty() ? nullptr : &guidance});
    z = ddim_step(z, eps_hat, t, sched.previous_index(i), sched);
    r.deviation.push_back(norm(z - traj.target_for_step(i)));
    r.records.push_back(std::move(c.record));
    r.path.push_back(z);
  }
  r.latent = z;
  return r;
}

}  // namespace vdir
