#include "videodirector/scheduler.hpp"

#include <cmath>
#include <string>

#include "videodirector/error.hpp"

namespace vdir {

NoiseSchedule NoiseSchedule::linear(int num_train_steps, double beta_start, double beta_end,
                                    int num_sampling_steps) {
  require(num_train_steps >= 1, ErrorKind::range, "T must be positive");
  require(num_sampling_steps >= 1 && num_sampling_steps <= num_train_steps, ErrorKind::range,
          "sampling steps must be in [1, T]");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, ErrorKind::range,
          "need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  s.alpha_bar_.resize(static_cast<std::size_t>(num_train_steps));
  double prod = 1.0;
  for (int i = 0; i < num_train_steps; ++i) {
    const double frac =
        num_train_steps == 1 ? 0.0 : static_cast<double>(i) / (num_train_steps - 1);
    const double beta = beta_start + frac * (beta_end - beta_start);
    prod *= 1.0 - beta;
    s.alpha_bar_[static_cast<std::size_t>(i)] = prod;
  }
  // Evenly spaced from T down to 1; spacing >= 1 keeps them strictly decreasing.
  s.indices_.resize(static_cast<std::size_t>(num_sampling_steps));
  for (int i = 0; i < num_sampling_steps; ++i) {
    const double pos = num_sampling_steps == 1
                           ? static_cast<double>(num_train_steps)
                           : num_train_steps - static_cast<double>(i) * (num_train_steps - 1) /
                                                   (num_sampling_steps - 1);
    s.indices_[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(pos));
  }
  s.validate();
  return s;
}

NoiseSchedule NoiseSchedule::from_alpha_bar(std::vector<double> alpha_bar,
                                            std::vector<int> sampling_indices) {
  NoiseSchedule s;
  s.alpha_bar_ = std::move(alpha_bar);
  if (sampling_indices.empty()) {
    for (int t = static_cast<int>(s.alpha_bar_.size()); t >= 1; --t) sampling_indices.push_back(t);
  }
  s.indices_ = std::move(sampling_indices);
  s.validate();
  return s;
}

void NoiseSchedule::validate() const {
  require(!alpha_bar_.empty(), ErrorKind::validation, "empty schedule");
  for (std::size_t i = 0; i < alpha_bar_.size(); ++i) {
    const double a = alpha_bar_[i];
    require(a > 0.0 && a <= 1.0, ErrorKind::validation, "alpha_bar must lie in (0, 1]");
    require(i == 0 || a < alpha_bar_[i - 1], ErrorKind::validation,
            "alpha_bar must be strictly decreasing");
  }
  require(!indices_.empty(), ErrorKind::validation, "no sampling indices");
  for (std::size_t i = 0; i < indices_.size(); ++i) {
    require(indices_[i] >= 1 && indices_[i] <= num_train_steps(), ErrorKind::validation,
            "sampling index outside 1..T");
    require(i == 0 || indices_[i] < indices_[i - 1], ErrorKind::validation,
            "sampling indices must be strictly decreasing");
  }
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  require(t >= 1 && t <= num_train_steps(), ErrorKind::range,
          "timestep " + std::to_string(t) + " outside [0, " + std::to_string(num_train_steps()) +
              "]");
  return alpha_bar_[static_cast<std::size_t>(t - 1)];
}

int NoiseSchedule::previous_index(int step) const {
  require(step >= 0 && step < num_sampling_steps(), ErrorKind::range, "step out of range");
  return step + 1 < num_sampling_steps() ? indices_[static_cast<std::size_t>(step + 1)] : 0;
}

NoiseSchedule make_schedule(int num_train_steps, double beta_start, double beta_end,
                            int num_sampling_steps) {
  return NoiseSchedule::linear(num_train_steps, beta_start, beta_end, num_sampling_steps);
}

NDArray add_noise(const NDArray& z0, int t, const NDArray& eps, const NoiseSchedule& sched) {
  check_same_shape(z0, eps, "add_noise");
  const double ab = sched.alpha_bar(t);
  NDArray out = z0 * std::sqrt(ab);
  out.axpy(std::sqrt(1.0 - ab), eps);
  return out;
}

std::pair<double, double> ddim_coefficients(double alpha_bar_from, double alpha_bar_to) {
  // sqrt(a_to) * (z - sqrt(1 - a_from) eps) / sqrt(a_from) + sqrt(1 - a_to) eps
  const double ratio = std::sqrt(alpha_bar_to / alpha_bar_from);
  const double eps_coef =
      std::sqrt(1.0 - alpha_bar_to) - ratio * std::sqrt(1.0 - alpha_bar_from);
  return {ratio, eps_coef};
}

NDArray ddim_transition(const NDArray& z, const NDArray& eps, double alpha_bar_from,
                        double alpha_bar_to) {
  check_same_shape(z, eps, "ddim_transition");
  const auto [zc, ec] = ddim_coefficients(alpha_bar_from, alpha_bar_to);
  NDArray out = z * zc;
  out.axpy(ec, eps);
  return out;
}

NDArray ddim_step(const NDArray& z_t, const NDArray& eps_hat, int t, int t_prev,
                  const NoiseSchedule& sched) {
  require(t_prev < t, ErrorKind::range, "ddim_step requires t_prev < t");
  return ddim_transition(z_t, eps_hat, sched.alpha_bar(t), sched.alpha_bar(t_prev));
}

NDArray ddim_invert_step(const NDArray& z_t, const NDArray& eps_hat, int t, int t_next,
                         const NoiseSchedule& sched) {
  require(t_next > t, ErrorKind::range, "ddim_invert_step requires t_next > t");
  return ddim_transition(z_t, eps_hat, sched.alpha_bar(t), sched.alpha_bar(t_next));
}

NDArray guided_epsilon(const GuidanceInputs& g) {
  check_same_shape(g.eps_cond, g.eps_uncond, "guided_epsilon");
  NDArray out = g.eps_cond * (1.0 + g.omega);
  out.axpy(-g.omega, g.eps_uncond);
  if (g.stdg != nullptr && !g.stdg->empty()) {
    check_same_shape(g.eps_cond, *g.stdg, "guided_epsilon");
    out += *g.stdg;
  }
  return out;
}

std::vector<NDArray> ddim_invert_loop(const NDArray& z0, const NoiseSchedule& sched,
                                      const EpsilonFn& eps) {
  const auto& idx = sched.indices();
  std::vector<NDArray> latents;
  latents.reserve(idx.size() + 1);
  latents.push_back(z0);
  int t = 0;
  for (auto it = idx.rbegin(); it != idx.rend(); ++it) {
    const int t_next = *it;
    NDArray e = eps(latents.back(), t_next);
    latents.push_back(ddim_invert_step(latents.back(), e, t, t_next, sched));
    t = t_next;
  }
  return latents;
}

NDArray ddim_sample_loop(const NDArray& z_T, const NoiseSchedule& sched, const EpsilonFn& eps) {
  NDArray z = z_T;
  for (int i = 0; i < sched.num_sampling_steps(); ++i) {
    const int t = sched.indices()[static_cast<std::size_t>(i)];
    z = ddim_step(z, eps(z, t), t, sched.previous_index(i), sched);
  }
  return z;
}

}  // namespace vdir
