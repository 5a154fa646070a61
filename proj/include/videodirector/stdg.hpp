#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "videodirector/core_io.hpp"
#include "videodirector/denoiser.hpp"

namespace vdir {

// Coefficients of the decoupled guidance
//   G = eta_f*G_T^f + eta_b*G_T^b + zeta_f*G_K^f + zeta_b*G_K^b
// where T are temporal attention maps and K are spatial self-attention keys.
struct StdgConfig {
  double eta_f = 0.5;   // foreground-edit defaults
  double eta_b = 0.5;   // useful range about [0.2, 0.8]
  double zeta_f = 0.0;
  double zeta_b = 0.5;
  std::size_t top_k = 2;
  std::vector<std::size_t> blocks;  // empty: every block
  double scale = 1.0;               // multiplies G before it enters eps-hat

  // Foreground/background coefficients exchanged, for background edits.
  StdgConfig swapped() const;
  void validate(std::size_t frames) const;
  std::vector<std::size_t> active_blocks(std::size_t num_blocks) const;
};

enum class GuidanceSource { temporal_fg, temporal_bg, spatial_fg, spatial_bg, combined };

struct GuidanceTerm {
  NDArray value;
  GuidanceSource source = GuidanceSource::combined;
};

// Row-wise top-K indicator over the last axis of (B, F, F) maps. Ties keep
// the lower index.
NDArray topk_mask(const NDArray& maps, std::size_t k);

// Location mask broadcast onto the temporal batch axis (H*W*h): a location
// counts if the mask is set in any frame.
NDArray temporal_location_mask(const NDArray& frame_masks, std::size_t heads);

struct DecoupledLoss {
  double loss_fg = 0.0;
  double loss_bg = 0.0;
  GuidanceTerm fg;
  GuidanceTerm bg;
};

// Reference features come from `reference` (the inversion pass at the same
// timestep) and are held constant, as is the top-K mask computed from them.
DecoupledLoss temporal_loss_and_grads(const Denoiser& model, const AttentionRecord& reference,
                                      const NDArray& z_t, int t, const NDArray& text,
                                      const MaskSet& masks, const StdgConfig& cfg);
DecoupledLoss spatial_loss_and_grads(const Denoiser& model, const AttentionRecord& reference,
                                     const NDArray& z_t, int t, const NDArray& text,
                                     const MaskSet& masks, const StdgConfig& cfg);

GuidanceTerm combine_guidance(const GuidanceTerm& temporal_fg, const GuidanceTerm& temporal_bg,
                              const GuidanceTerm& spatial_fg, const GuidanceTerm& spatial_bg,
                              const StdgConfig& cfg);

struct StdgResult {
  DecoupledLoss temporal;
  DecoupledLoss spatial;
  GuidanceTerm combined;  // already multiplied by cfg.scale
};

// All four terms from a single differentiable forward pass.
StdgResult compute_stdg(const Denoiser& model, const AttentionRecord& reference,
                        const NDArray& z_t, int t, const NDArray& text, const MaskSet& masks,
                        const StdgConfig& cfg);

struct StdgDiagnosticRow {
  int t = 0;
  double temporal_fg = 0.0, temporal_bg = 0.0, spatial_fg = 0.0, spatial_bg = 0.0;
};

StdgDiagnosticRow diagnostic_row(int t, const StdgResult& r);
// CSV with header "t,norm_GT_f,norm_GT_b,norm_GK_f,norm_GK_b".
void write_stdg_diagnostics(const std::filesystem::path& path,
                            const std::vector<StdgDiagnosticRow>& rows);

}  // namespace vdir
