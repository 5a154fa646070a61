#pragma once

#include <functional>
#include <vector>

#include "videodirector/ndarray.hpp"

namespace vdir {

// Cumulative noise schedule. alpha_bar(t) for t in 1..T is the product
// prod_{s<=t}(1 - beta_s); DDIM notation often writes this product as alpha_t.
// Index 0 is the clean endpoint with alpha_bar = 1.
class NoiseSchedule {
 public:
  static NoiseSchedule linear(int num_train_steps, double beta_start, double beta_end,
                              int num_sampling_steps);
  // Explicit alpha_bar[1..T]; sampling indices default to every step.
  static NoiseSchedule from_alpha_bar(std::vector<double> alpha_bar,
                                      std::vector<int> sampling_indices = {});

  int num_train_steps() const noexcept { return static_cast<int>(alpha_bar_.size()); }
  int num_sampling_steps() const noexcept { return static_cast<int>(indices_.size()); }
  double beta_start() const noexcept { return beta_start_; }
  double beta_end() const noexcept { return beta_end_; }

  // alpha_bar at t in [0, T]; t == 0 yields 1.
  double alpha_bar(int t) const;
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bar_; }

  // Strictly decreasing sampling indices, indices()[0] == T side.
  const std::vector<int>& indices() const noexcept { return indices_; }
  // Timestep reached after denoising step i (0 after the last step).
  int previous_index(int step) const;

 private:
  NoiseSchedule() = default;
  void validate() const;

  std::vector<double> alpha_bar_;
  std::vector<int> indices_;
  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
};

NoiseSchedule make_schedule(int num_train_steps, double beta_start, double beta_end,
                            int num_sampling_steps);

// sqrt(ab) * z0 + sqrt(1 - ab) * eps
NDArray add_noise(const NDArray& z0, int t, const NDArray& eps, const NoiseSchedule& sched);

// One deterministic DDIM transition between arbitrary noise levels; the
// sampling and inversion steps are this map with the level order swapped.
NDArray ddim_transition(const NDArray& z, const NDArray& eps, double alpha_bar_from,
                        double alpha_bar_to);
// Coefficients (a, b) such that ddim_transition(z, eps) == a*z + b*eps.
std::pair<double, double> ddim_coefficients(double alpha_bar_from, double alpha_bar_to);

// z_t -> z_{t_prev}; requires t_prev < t.
NDArray ddim_step(const NDArray& z_t, const NDArray& eps_hat, int t, int t_prev,
                  const NoiseSchedule& sched);
// z_t -> z_{t_next}; requires t_next > t.
NDArray ddim_invert_step(const NDArray& z_t, const NDArray& eps_hat, int t, int t_next,
                         const NoiseSchedule& sched);

struct GuidanceInputs {
  const NDArray& eps_cond;
  const NDArray& eps_uncond;
  double omega = 1.0;
  const NDArray* stdg = nullptr;  // may be null for plain CFG
};

// eps_c + omega * (eps_c - eps_u) + G
NDArray guided_epsilon(const GuidanceInputs& g);

using EpsilonFn = std::function<NDArray(const NDArray& z, int t)>;

// Inversion loop: from z0 up the sampling grid. The noise estimate for the
// transition t -> t_next is eps(z_t, t_next), since eps at z_{t_next} is not
// available yet. Returns N+1 latents, latents[0] == z0.
std::vector<NDArray> ddim_invert_loop(const NDArray& z0, const NoiseSchedule& sched,
                                      const EpsilonFn& eps);
// Sampling loop from z_T down to the clean endpoint.
NDArray ddim_sample_loop(const NDArray& z_T, const NoiseSchedule& sched, const EpsilonFn& eps);

}  // namespace vdir

namespace vdir {

// Serializable parameters of a linear-beta schedule.
struct ScheduleParams {
  int num_train_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  int num_sampling_steps = 20;

  NoiseSchedule make() const {
    return make_schedule(num_train_steps, beta_start, beta_end, num_sampling_steps);
  }
  bool operator==(const ScheduleParams&) const = default;
};

}  // namespace vdir
