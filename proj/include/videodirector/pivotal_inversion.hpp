#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "videodirector/core_io.hpp"
#include "videodirector/denoiser.hpp"
#include "videodirector/scheduler.hpp"
#include "videodirector/stdg.hpp"

namespace vdir {

// DDIM inversion path. latents[k] sits at timestep 0 (k == 0) or
// indices()[N - k]; records[k] was captured while mapping latents[k] to
// latents[k + 1], i.e. at the timestep of latents[k + 1].
struct Trajectory {
  std::vector<NDArray> latents;          // N + 1
  std::vector<AttentionRecord> records;  // N
  std::string prompt;
  ScheduleParams schedule;
  std::string weights_path;  // informational; set by the CLI

  std::size_t steps() const { return records.size(); }
  // Inversion record matching denoising step i (0 = noisiest).
  const AttentionRecord& reference_for_step(int step) const;
  const NDArray& target_for_step(int step) const { return latents[steps() - 1 - static_cast<std::size_t>(step)]; }

  void save(const std::filesystem::path& dir) const;
  static Trajectory load(const std::filesystem::path& dir);
};

enum class NullTextMode { multi_frame, shared };

const char* mode_name(NullTextMode mode);
NullTextMode parse_mode(const std::string& name);

// One (F, l, c) unconditional embedding per denoising step.
struct NullTextBank {
  std::vector<NDArray> embeddings;
  NullTextMode mode = NullTextMode::multi_frame;

  static NullTextBank initial(const DenoiserConfig& cfg, std::size_t steps, NullTextMode mode);
  void save(const std::filesystem::path& dir) const;
  static NullTextBank load(const std::filesystem::path& dir);
};

enum class TuneOptimizer { adam, gd };

const char* optimizer_name(TuneOptimizer opt);
TuneOptimizer parse_optimizer(const std::string& name);

// Each iteration proposes a step along the optimizer's direction; a step that
// raises the loss is halved and retried up to max_halvings times, so accepted
// losses never increase.
struct TuneConfig {
  int inner_iters = 10;
  double step_size = 5e-2;
  double early_stop_loss = 1e-5;
  int max_halvings = 5;
  double divergence_loss = 1e6;
  TuneOptimizer optimizer = TuneOptimizer::adam;
  double omega = 1.0;
  bool stdg_enabled = true;
  StdgConfig stdg;
  NullTextMode mode = NullTextMode::multi_frame;

  void validate() const;
};

Trajectory run_ddim_inversion(const NDArray& z0, const std::string& prompt,
                              const ScheduleParams& schedule, const Denoiser& model);

struct TuneResult {
  NullTextBank bank;
  std::vector<std::vector<double>> loss_traces;  // per step: initial loss, then each accepted iterate
  std::vector<StdgDiagnosticRow> diagnostics;
};

// `masks` may be null; STDG then treats every location as background.
TuneResult optimize_null_text(const Trajectory& traj, const Denoiser& model,
                              const MaskSet* masks, const TuneConfig& cfg);

struct ReconstructResult {
  NDArray latent;
  std::vector<NDArray> path;             // latent after each step
  std::vector<AttentionRecord> records;  // conditional branch, per step
  std::vector<double> deviation;         // ||z - z*|| after each step
  std::vector<StdgDiagnosticRow> diagnostics;
};

ReconstructResult reconstruct(const Trajectory& traj, const NullTextBank& bank,
                              const Denoiser& model, const MaskSet* masks, const TuneConfig& cfg);

// All-background masks for the latent grid.
MaskSet background_only(const DenoiserConfig& cfg);

}  // namespace vdir
