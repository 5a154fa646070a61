#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "videodirector/denoiser.hpp"
#include "videodirector/pipeline.hpp"

namespace vdir {

// gen-data spec file (JSON):
//   {"seed": 1, "count": 4, "frames": 8, "channels": 4, "height": 8,
//    "width": 8, "objects": 1, "noise": 0.0,
//    "videos": [{"background": "gradient", "background_level": 0.2,
//                "objects": [{"shape": "disk", "name": "red", "size": 3,
//                             "x": 0, "y": 2, "vx": 0.5, "vy": 0,
//                             "intensity": [0.9, 0.1, 0.1, 0.6]}]}]}
// Explicit "videos" come first, then `count` random ones.
struct DatasetSpec {
  std::uint64_t seed = 0;
  std::size_t count = 4;
  std::size_t frames = 8, channels = 4, height = 8, width = 8;
  std::size_t objects = 1;
  double noise = 0.0;
  std::vector<SyntheticSpec> videos;

  static DatasetSpec parse(const std::string& text);
  static DatasetSpec load(const std::filesystem::path& path);
};

std::vector<SyntheticVideo> generate_dataset(const DatasetSpec& spec);

// Layout: manifest.json plus video_NNN/{video.vdt, masks/foreground.vdt}.
void write_dataset(const std::filesystem::path& dir, const DatasetSpec& spec,
                   const std::vector<SyntheticVideo>& videos);

struct Dataset {
  std::uint64_t seed = 0;
  std::vector<TrainExample> examples;
};

Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace vdir
