#include "videodirector/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "videodirector/error.hpp"

namespace vdir {
namespace {

struct Colour {
  const char* name;
  std::array<double, 4> value;
};

constexpr Colour kPalette[] = {
    {"red", {0.9, 0.1, 0.1, 0.6}},    {"green", {0.1, 0.9, 0.2, 0.4}},
    {"blue", {0.1, 0.2, 0.9, 0.8}},   {"yellow", {0.9, 0.9, 0.1, 0.3}},
    {"white", {0.95, 0.95, 0.95, 0.9}}, {"purple", {0.7, 0.1, 0.8, 0.5}},
};

const char* shape_word(ShapeKind k) { return k == ShapeKind::disk ? "disk" : "square"; }

bool covers(const ObjectSpec& o, std::size_t frame, std::size_t row, std::size_t col) {
  const double x0 = o.x + o.vx * static_cast<double>(frame);
  const double y0 = o.y + o.vy * static_cast<double>(frame);
  const double px = static_cast<double>(col) + 0.5, py = static_cast<double>(row) + 0.5;
  if (o.shape == ShapeKind::square) {
    return px >= x0 && px < x0 + o.size && py >= y0 && py < y0 + o.size;
  }
  const double r = 0.5 * o.size;
  const double dx = px - (x0 + r), dy = py - (y0 + r);
  return dx * dx + dy * dy <= r * r;
}

double psnr_from_mse(double mse) {
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

}  // namespace

void SyntheticSpec::validate() const {
  require(frames > 0 && channels > 0 && height > 0 && width > 0, ErrorKind::validation,
          "synthetic canvas dimensions must be positive");
  require(noise >= 0.0, ErrorKind::validation, "noise must be nonnegative");
  const double last = static_cast<double>(frames - 1);
  for (const auto& o : objects) {
    require(o.size > 0.0, ErrorKind::validation, "object size must be positive");
    require(o.intensity.empty() || o.intensity.size() == channels, ErrorKind::validation,
            "object intensity needs one value per channel");
    for (double f : {0.0, last}) {
      const double x0 = o.x + o.vx * f, y0 = o.y + o.vy * f;
      constexpr double slack = 1e-9;
      if (x0 < -slack || y0 < -slack || x0 + o.size > static_cast<double>(width) + slack ||
          y0 + o.size > static_cast<double>(height) + slack) {
        fail(ErrorKind::range, "object '" + o.name + "' leaves the canvas by frame " +
                                   std::to_string(static_cast<int>(f)));
      }
    }
  }
}

SyntheticVideo gen_synthetic(const SyntheticSpec& spec, Rng& rng) {
  spec.validate();
  const std::size_t F = spec.frames, C = spec.channels, H = spec.height, W = spec.width;
  SyntheticVideo out;
  out.video = NDArray({F, C, H, W});
  NDArray fg({F, H, W});
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          double v = spec.background_level;
          if (spec.background == BackgroundKind::gradient && W > 1) {
            v += spec.background_slope * static_cast<double>(x) / static_cast<double>(W - 1);
          }
          out.video.at({f, c, y, x}) = v;
        }
      }
    }
    for (const auto& o : spec.objects) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          if (!covers(o, f, y, x)) continue;
          fg.at({f, y, x}) = 1.0;
          for (std::size_t c = 0; c < C; ++c) {
            out.video.at({f, c, y, x}) = o.intensity.empty() ? 1.0 : o.intensity[c];
          }
        }
      }
    }
  }
  if (spec.noise > 0.0) {
    for (double& v : out.video.values()) v += spec.noise * rng.normal();
  }
  out.masks = MaskSet::from_foreground(std::move(fg));

  std::string prompt;
  for (const auto& o : spec.objects) {
    if (!prompt.empty()) prompt += " and ";
    prompt += "a " + o.name + " " + shape_word(o.shape);
  }
  prompt += spec.background == BackgroundKind::gradient ? " on a gradient" : " on a wall";
  out.prompt = prompt;
  return out;
}

SyntheticSpec random_spec(Rng& rng, std::size_t frames, std::size_t channels, std::size_t height,
                          std::size_t width, std::size_t num_objects) {
  SyntheticSpec spec;
  spec.frames = frames;
  spec.channels = channels;
  spec.height = height;
  spec.width = width;
  spec.background = rng.uniform() < 0.5 ? BackgroundKind::constant : BackgroundKind::gradient;
  spec.background_level = 0.1 + 0.2 * rng.uniform();
  const double travel = static_cast<double>(frames > 0 ? frames - 1 : 0);
  std::vector<std::size_t> used;
  for (std::size_t i = 0; i < num_objects; ++i) {
    ObjectSpec o;
    o.shape = rng.uniform() < 0.5 ? ShapeKind::square : ShapeKind::disk;
    o.size = std::min<double>(2.0 + static_cast<double>(rng.below(2)),
                              static_cast<double>(std::min(height, width)));
    std::size_t colour = rng.below(std::size(kPalette));
    while (std::find(used.begin(), used.end(), colour) != used.end()) {
      colour = (colour + 1) % std::size(kPalette);
    }
    used.push_back(colour);
    o.name = kPalette[colour].name;
    for (std::size_t c = 0; c < channels; ++c) o.intensity.push_back(kPalette[colour].value[c % 4]);

    auto place = [&](double extent, double& pos, double& vel) {
      const double room = extent - o.size;
      double speed = 0.2 + 0.4 * rng.uniform();
      if (travel > 0.0) speed = std::min(speed, room / travel);
      vel = (rng.uniform() < 0.5 ? -1.0 : 1.0) * speed;
      const double span = std::abs(vel) * travel;
      const double lo = vel < 0.0 ? span : 0.0;
      pos = lo + (room - span) * rng.uniform();
    };
    place(static_cast<double>(width), o.x, o.vx);
    place(static_cast<double>(height), o.y, o.vy);
    spec.objects.push_back(std::move(o));
  }
  return spec;
}

Metrics compute_metrics(const NDArray& a, const NDArray& b, const NDArray* mask, double range_lo,
                        double range_hi) {
  check_same_shape(a, b, "compute_metrics");
  require(!a.empty(), ErrorKind::validation, "compute_metrics on empty arrays");
  require(range_hi > range_lo, ErrorKind::validation, "metric range must be increasing");
  Metrics m;
  m.range_lo = range_lo;
  m.range_hi = range_hi;
  const double scale = 1.0 / (range_hi - range_lo);

  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = (a[i] - b[i]) * scale;
    total += d * d;
  }
  m.mse = total / static_cast<double>(a.size());
  m.psnr = psnr_from_mse(m.mse);

  if (mask) {
    // Full-shape masks index directly; (F, H, W) masks repeat over channels.
    std::size_t inner = 1, repeat = 1;
    const bool broadcast = mask->shape() != a.shape();
    if (broadcast) {
      require(a.ndim() == 4 && mask->ndim() == 3 && mask->dim(0) == a.dim(0) &&
                  mask->dim(1) == a.dim(2) && mask->dim(2) == a.dim(3),
              ErrorKind::shape,
              "mask shape " + shape_str(mask->shape()) + " does not fit " + shape_str(a.shape()));
      inner = a.dim(2) * a.dim(3);
      repeat = a.dim(1);
    }
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const std::size_t mi = !broadcast ? i : (i / (inner * repeat)) * inner + i % inner;
      if ((*mask)[mi] < 0.5) continue;
      const double d = (a[i] - b[i]) * scale;
      sum += d * d;
      ++count;
    }
    require(count > 0, ErrorKind::validation, "metric mask selects no entries");
    m.masked_mse = sum / static_cast<double>(count);
    m.masked_psnr = psnr_from_mse(*m.masked_mse);
  }
  return m;
}

void EditSession::validate(const DenoiserConfig& cfg) const {
  const std::size_t n = trajectory.steps();
  require(n > 0 && trajectory.latents.size() == n + 1, ErrorKind::validation,
          "edit session needs a complete trajectory");
  require(trajectory.latents[0].shape() == cfg.latent_shape(), ErrorKind::shape,
          "trajectory latents " + shape_str(trajectory.latents[0].shape()) +
              " do not match the model " + shape_str(cfg.latent_shape()));
  require(bank.embeddings.size() == n, ErrorKind::validation,
          "null-text bank has " + std::to_string(bank.embeddings.size()) + " steps, trajectory " +
              std::to_string(n));
  for (const auto& e : bank.embeddings) {
    require(e.shape() == cfg.frame_text_shape(), ErrorKind::shape,
            "null-text embedding shape " + shape_str(e.shape()));
  }
  if (masks) {
    masks->validate();
    require(masks->foreground.shape() == Shape{cfg.frames, cfg.height, cfg.width},
            ErrorKind::shape, "mask shape " + shape_str(masks->foreground.shape()));
  } else {
    require(!flags.sa2, ErrorKind::validation, "mutual self-attention control requires masks");
    require(!stdg_enabled, ErrorKind::validation,
            "decoupled guidance in an edit session requires masks");
  }
  schedule.validate();
  require(omega >= 0.0, ErrorKind::validation, "omega must be nonnegative");
  stdg.validate(cfg.frames);
}

TuneConfig EditSession::tune_config() const {
  TuneConfig t;
  t.omega = omega;
  t.stdg = stdg;
  t.stdg_enabled = stdg_enabled;
  t.mode = bank.mode;
  return t;
}

EditResult edit_video(const EditSession& session, const Denoiser& model) {
  const DenoiserConfig& cfg = model.config();
  session.validate(cfg);
  const NoiseSchedule sched = session.trajectory.schedule.make();
  const int n = sched.num_sampling_steps();

  ControlSchedule control = session.schedule;
  control.total_steps = n;
  control.validate();

  EditResult result;
  result.alignment = align_prompts(session.source_prompt, session.edit_prompt, cfg.text_len);
  for (const auto& [word, value] : session.reweight) {
    if (result.alignment.set_reweight(word, value) == 0) {
      fail(ErrorKind::validation, "re-weighted word '" + word + "' is not in the edit prompt");
    }
  }

  const MaskSet masks = session.masks ? *session.masks : background_only(cfg);
  const NDArray fg_tokens = masks.foreground.reshaped({cfg.frames, cfg.tokens()});
  const TuneConfig tune = session.tune_config();

  Trajectory traj = session.trajectory;
  traj.prompt = session.source_prompt;
  const ReconstructResult rec =
      reconstruct(traj, session.bank, model, session.masks ? &masks : nullptr, tune);
  result.reconstruction = rec.latent;

  const NDArray edit_text = encode_text(session.edit_prompt, cfg).vectors;
  NDArray z = traj.latents.back();
  for (int i = 0; i < n; ++i) {
    const int t = sched.indices()[static_cast<std::size_t>(i)];
    DualPathController controller(rec.records[static_cast<std::size_t>(i)], fg_tokens,
                                  result.alignment, control, session.flags, cfg.heads, i);
    const NDArray eps_c = model.denoise(z, t, edit_text, false, &controller).eps;
    const NDArray eps_u =
        model.denoise(z, t, session.bank.embeddings[static_cast<std::size_t>(i)], false).eps;
    NDArray guidance;
    if (session.stdg_enabled && session.stdg_editing) {
      StdgResult g =
          compute_stdg(model, traj.reference_for_step(i), z, t, edit_text, masks, session.stdg);
      result.diagnostics.push_back(diagnostic_row(t, g));
      guidance = std::move(g.combined.value);
    }
    const NDArray eps_hat = guided_epsilon(
        {eps_c, eps_u, session.omega, guidance.empty() ? nullptr : &guidance});
    z = ddim_step(z, eps_hat, t, sched.previous_index(i), sched);
  }
  result.edited = std::move(z);

  const NDArray* bg = session.masks ? &masks.background : nullptr;
  result.metrics = compute_metrics(result.edited, traj.latents[0], bg);
  result.metrics.trajectory_deviation = rec.deviation;
  return result;
}

NDArray frame_strip(const NDArray& video, std::size_t channel) {
  require(video.ndim() == 4, ErrorKind::shape, "frame_strip expects (F, C, H, W)");
  require(channel < video.dim(1), ErrorKind::range, "channel out of range");
  const std::size_t F = video.dim(0), H = video.dim(2), W = video.dim(3);
  NDArray strip({H, F * W});
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) strip.at({y, f * W + x}) = video.at({f, channel, y, x});
    }
  }
  return strip;
}

}  // namespace vdir
