#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "videodirector/attention_control.hpp"
#include "videodirector/pivotal_inversion.hpp"
#include "videodirector/scheduler.hpp"
#include "videodirector/stdg.hpp"

namespace vdir {

// Session configuration, a JSON object with these keys (all optional):
//   schedule: num_train_steps, beta_start, beta_end, steps
//   stdg:     enabled, eta_f, eta_b, zeta_f, zeta_b, top_k, scale, blocks,
//             background_edit (swap foreground/background coefficients),
//             editing (guidance on the editing path; default true)
//   control:  tau_s, tau_c, sa1, sa2, ca, renormalize, reweight {word: C}
//   tune:     inner_iters, step_size, early_stop_loss, max_halvings,
//             optimizer (adam | gd), mode
//   omega, seed
// Unknown keys are rejected.
struct SessionConfig {
  std::optional<ScheduleParams> schedule;  // unset: take the trajectory's
  StdgConfig stdg;
  bool stdg_enabled = true;
  bool stdg_editing = true;
  ControlSchedule control;
  ControlFlags flags;
  std::vector<std::pair<std::string, double>> reweight;
  TuneConfig tune;
  double omega = 1.0;
  std::uint64_t seed = 0;

  static SessionConfig parse(const std::string& text);
  static SessionConfig load(const std::filesystem::path& path);

  // Tuning options with omega and STDG settings folded in.
  TuneConfig tune_config() const;
  // Throws if an explicit schedule disagrees with `actual`.
  void check_schedule(const ScheduleParams& actual) const;
};

}  // namespace vdir
