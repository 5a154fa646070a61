#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "videodirector/denoiser.hpp"
#include "videodirector/ndarray.hpp"

namespace vdir {

struct PromptAlignment {
  std::vector<std::string> source_tokens;
  std::vector<std::string> edit_tokens;
  // Per edit position (length l): source position, or -1 when unmapped.
  // Real tokens map through the longest common subsequence; padding maps onto
  // source padding in order.
  std::vector<int> mapping;
  NDArray gamma;     // (l): 1 at novel edit words, 0 elsewhere
  NDArray reweight;  // (l): per-word multiplier C, default 1

  std::size_t length() const { return mapping.size(); }
  // Sets C at every edit position holding `word`; returns how many matched.
  std::size_t set_reweight(const std::string& word, double value);
  // Token table: position, edit token, mapped source token, gamma, C.
  std::string report() const;
};

PromptAlignment align_prompts(const std::string& source, const std::string& edit,
                              std::size_t text_len);

// Thresholds are fractions of the denoising iterations counted from the
// first (noisiest) step.
struct ControlSchedule {
  double tau_s = 0.3;  // typically 0.2 to 0.5, tuned per video
  double tau_c = 0.8;
  int total_steps = 20;

  void validate() const;
  int sa1_steps() const;
  int ca_steps() const;
};

struct ControlPhase {
  bool sa1 = false;  // otherwise mutual attention (SA-II)
  bool ca_on = false;
};

ControlPhase control_phase(int step, const ControlSchedule& sched);

// W_rec (F*h, n, n) applied to editing-path values V (F, n, d).
NDArray sa1_replace(const NDArray& w_rec, const NDArray& v_edit, std::size_t heads);

// Softmax weights of mutual attention, (F*h, n, 2n), keys ordered
// [editing | reconstruction]. Reconstruction keys at foreground positions of
// the query's frame are excluded.
NDArray sa2_weights(const NDArray& q_edit, const NDArray& k_edit, const NDArray& k_rec,
                    const NDArray& fg_mask, std::size_t heads);
// Mutual attention output (F, n, d) over concatenated values.
NDArray sa2_mutual(const NDArray& q_edit, const NDArray& k_edit, const NDArray& k_rec,
                   const NDArray& v_edit, const NDArray& v_rec, const NDArray& fg_mask,
                   std::size_t heads);

// C * [gamma * M_edit + (1 - gamma) * M'] while step < ceil(tau_c N), where M'
// gathers reconstruction columns through the alignment; M_edit afterwards.
NDArray ca_control(const NDArray& m_edit, const NDArray& m_rec, const PromptAlignment& align,
                   int step, const ControlSchedule& sched, bool renormalize = false);

struct ControlFlags {
  bool sa1 = true;
  bool sa2 = true;
  bool ca = true;
  bool renormalize = false;
};

// Hook for the editing path's conditional branch at one denoising step,
// replaying the reconstruction path's stored record.
class DualPathController : public AttentionHook {
 public:
  DualPathController(const AttentionRecord& reconstruction, const NDArray& fg_mask_tokens,
                     const PromptAlignment& align, const ControlSchedule& sched,
                     const ControlFlags& flags, std::size_t heads, int step);

  std::optional<NDArray> self_attention(std::size_t block, const NDArray& q, const NDArray& k,
                                        const NDArray& v) override;
  std::optional<NDArray> cross_maps(std::size_t block, const NDArray& maps) override;

 private:
  const AttentionRecord& rec_;
  const NDArray& fg_mask_;
  const PromptAlignment& align_;
  const ControlSchedule& sched_;
  ControlFlags flags_;
  std::size_t heads_;
  int step_;
  ControlPhase phase_;
};

}  // namespace vdir
