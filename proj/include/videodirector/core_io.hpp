#pragma once

#include <cstdint>
#include <filesystem>

#include "videodirector/ndarray.hpp"

namespace vdir {

// NDArrayFile: "VDT1", u32 ndim, ndim x u32 dims, float32 payload; all
// little-endian, row-major.
inline constexpr char kArrayMagic[4] = {'V', 'D', 'T', '1'};

void write_array(const std::filesystem::path& path, const NDArray& array);
NDArray read_array(const std::filesystem::path& path);

// Binary PGM (P5, maxval <= 255). Pixels >= threshold map to 1.
inline constexpr int kDefaultMaskThreshold = 128;
NDArray import_pgm_mask(const std::filesystem::path& path,
                        int threshold = kDefaultMaskThreshold);

// Writes a (H, W) array as P5, mapping [lo, hi] linearly onto 0..255.
void write_pgm(const std::filesystem::path& path, const NDArray& image, double lo = 0.0,
               double hi = 1.0);

// Foreground / background masks of shape (F, H, W).
struct MaskSet {
  NDArray foreground;
  NDArray background;

  static MaskSet from_foreground(NDArray foreground);
  void validate() const;
  std::size_t frames() const { return foreground.dim(0); }
};

// Reads a mask directory: foreground.vdt (F,H,W) with 0/1 entries, or
// frame_000.pgm ... frame_{F-1}.pgm.
MaskSet read_masks(const std::filesystem::path& dir, int threshold = kDefaultMaskThreshold);
void write_masks(const std::filesystem::path& dir, const MaskSet& masks);

}  // namespace vdir
