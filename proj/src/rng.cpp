#include "videodirector/rng.hpp"

#include <cmath>
#include <numbers>

namespace vdir {

std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t Rng::next_u64() noexcept {
  const std::uint64_t key = mix64(seed_ ^ 0x5851f42d4c957f2dULL);
  return mix64(key + 0xd1b54a32d192ed03ULL * (++counter_));
}

double Rng::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() noexcept {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) noexcept {
  if (n == 0) return 0;
  return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
}

NDArray Rng::normal_array(Shape shape) {
  NDArray out(std::move(shape));
  for (double& v : out.values()) v = normal();
  return out;
}

Rng Rng::fork(std::uint64_t tag) const noexcept {
  return Rng(mix64(seed_ * 0x2545f4914f6cdd1dULL ^ mix64(tag)));
}

}  // namespace vdir
