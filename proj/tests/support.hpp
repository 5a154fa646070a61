#pragma once

#include <filesystem>
#include <string>

#include "videodirector/denoiser.hpp"
#include "videodirector/rng.hpp"

namespace vdir::testing {

// Fresh directory under the build tree's temp area.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("vdir_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline DenoiserConfig tiny_config() {
  DenoiserConfig c;
  c.frames = 4;
  c.channels = 2;
  c.height = 4;
  c.width = 4;
  c.model_width = 8;
  c.heads = 2;
  c.text_len = 4;
  c.text_dim = 6;
  c.num_blocks = 2;
  c.seed = 11;
  return c;
}

inline Denoiser tiny_model(const DenoiserConfig& cfg = tiny_config()) {
  return Denoiser(DenoiserWeights::initialize(cfg));
}

inline NDArray random_array(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  NDArray a = rng.normal_array(std::move(shape));
  a *= scale;
  return a;
}

}  // namespace vdir::testing
