#pragma once

#include <cstdint>

#include "videodirector/ndarray.hpp"

namespace vdir {

// Counter-based generator: draw k is a pure function of (seed, k), so streams
// are reproducible on every platform and cheap to fork.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept;
  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  // Standard normal via Box-Muller; consumes two draws.
  double normal() noexcept;
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept;

  NDArray normal_array(Shape shape);

  // Independent stream keyed by (seed, tag).
  Rng fork(std::uint64_t tag) const noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

// SplitMix64 finalizer; also used for token hashing.
std::uint64_t mix64(std::uint64_t x) noexcept;

}  // namespace vdir
