#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "videodirector/attention_control.hpp"
#include "videodirector/core_io.hpp"
#include "videodirector/denoiser.hpp"
#include "videodirector/pivotal_inversion.hpp"
#include "videodirector/rng.hpp"
#include "videodirector/stdg.hpp"

namespace vdir {

enum class ShapeKind { square, disk };

struct ObjectSpec {
  ShapeKind shape = ShapeKind::square;
  std::string name = "square";  // word used in the prompt
  double size = 3.0;            // side length, or diameter for disks
  double x = 0.0, y = 0.0;      // top-left corner of the bounding box at frame 0
  double vx = 0.0, vy = 0.0;    // pixels per frame
  std::vector<double> intensity;  // per channel; empty means 1.0 everywhere
};

enum class BackgroundKind { constant, gradient };

struct SyntheticSpec {
  std::size_t frames = 8, channels = 4, height = 8, width = 8;
  BackgroundKind background = BackgroundKind::constant;
  double background_level = 0.2;
  double background_slope = 0.4;  // gradient: left-to-right increase
  double noise = 0.0;             // i.i.d. pixel noise std, drawn from the rng
  std::vector<ObjectSpec> objects;

  void validate() const;
};

struct SyntheticVideo {
  NDArray video;  // (F, C, H, W) in [0, 1] before noise
  MaskSet masks;
  std::string prompt;
};

// Later objects are painted over earlier ones; the foreground mask is the
// union of all objects.
SyntheticVideo gen_synthetic(const SyntheticSpec& spec, Rng& rng);

// One or two moving objects with random placement, speed, and colour, all
// staying on the canvas.
SyntheticSpec random_spec(Rng& rng, std::size_t frames, std::size_t channels,
                          std::size_t height, std::size_t width, std::size_t num_objects = 1);

struct Metrics {
  double psnr = 0.0;
  std::optional<double> masked_psnr;
  std::optional<double> masked_mse;
  double mse = 0.0;
  double range_lo = 0.0, range_hi = 1.0;  // affine normalization applied first
  std::vector<double> trajectory_deviation;
};

inline constexpr double kPsnrCap = 99.0;

// mask: (F, H, W) broadcast over channels, or the full shape of a.
Metrics compute_metrics(const NDArray& a, const NDArray& b, const NDArray* mask = nullptr,
                        double range_lo = 0.0, double range_hi = 1.0);

struct EditSession {
  std::string source_prompt;
  std::string edit_prompt;
  Trajectory trajectory;
  NullTextBank bank;
  std::optional<MaskSet> masks;
  ControlSchedule schedule;
  ControlFlags flags;
  std::vector<std::pair<std::string, double>> reweight;
  StdgConfig stdg;
  bool stdg_enabled = true;   // reconstruction path, and editing unless stdg_editing is off
  bool stdg_editing = true;
  double omega = 1.0;
  std::uint64_t seed = 0;

  void validate(const DenoiserConfig& cfg) const;
  TuneConfig tune_config() const;
};

struct EditResult {
  NDArray edited;
  NDArray reconstruction;
  Metrics metrics;  // edited vs source video, masked to the background
  PromptAlignment alignment;
  std::vector<StdgDiagnosticRow> diagnostics;  // editing path
};

EditResult edit_video(const EditSession& session, const Denoiser& model);

// (F, C, H, W) -> one (H, F*W) strip per channel.
NDArray frame_strip(const NDArray& video, std::size_t channel);

}  // namespace vdir
