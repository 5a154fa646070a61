#include "videodirector/core_io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "videodirector/error.hpp"

namespace vdir {
namespace {

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian platforms are not supported");

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void write_array(const std::filesystem::path& path, const NDArray& array) {
  require(array.ndim() >= 1, ErrorKind::validation, "array must have ndim >= 1");
  if (!array.all_finite()) {
    fail(ErrorKind::validation, "refusing to write non-finite values to " + path.string());
  }
  std::string buf;
  buf.reserve(8 + 4 * array.ndim() + 4 * array.size());
  buf.append(kArrayMagic, 4);
  put_u32(buf, static_cast<std::uint32_t>(array.ndim()));
  for (std::size_t d : array.shape()) put_u32(buf, static_cast<std::uint32_t>(d));
  for (double v : array.values()) {
    put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot create " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) fail(ErrorKind::io, "write failed for " + path.string());
}

NDArray read_array(const std::filesystem::path& path) {
  const std::string buf = slurp(path);
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  if (buf.size() < 8 || std::memcmp(buf.data(), kArrayMagic, 4) != 0) {
    fail(ErrorKind::format, path.string() + ": bad magic");
  }
  const std::uint32_t ndim = get_u32(p + 4);
  if (ndim == 0) fail(ErrorKind::format, path.string() + ": ndim must be >= 1");
  const std::size_t header = 8 + 4 * static_cast<std::size_t>(ndim);
  if (buf.size() < header) fail(ErrorKind::format, path.string() + ": truncated header");
  Shape shape(ndim);
  for (std::uint32_t i = 0; i < ndim; ++i) shape[i] = get_u32(p + 8 + 4 * i);
  const std::size_t count = shape_size(shape);
  if (buf.size() != header + 4 * count) {
    fail(ErrorKind::format, path.string() + ": payload is " +
                                std::to_string(buf.size() - header) + " bytes, header " +
                                shape_str(shape) + " needs " + std::to_string(4 * count));
  }
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    data[i] = std::bit_cast<float>(get_u32(p + header + 4 * i));
  }
  return NDArray(std::move(shape), std::move(data));
}

NDArray import_pgm_mask(const std::filesystem::path& path, int threshold) {
  require(threshold >= 0 && threshold <= 255, ErrorKind::range, "threshold must be 0-255");
  const std::string buf = slurp(path);
  std::size_t pos = 0;
  // Header tokens separated by whitespace; '#' starts a comment to end of line.
  auto next_token = [&]() {
    while (pos < buf.size()) {
      if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
        ++pos;
      } else if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
    return buf.substr(start, pos - start);
  };
  if (next_token() != "P5") fail(ErrorKind::format, path.string() + ": not a P5 PGM");
  long width = 0, height = 0, maxval = 0;
  try {
    width = std::stol(next_token());
    height = std::stol(next_token());
    maxval = std::stol(next_token());
  } catch (const std::exception&) {
    fail(ErrorKind::format, path.string() + ": malformed PGM header");
  }
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 255) {
    fail(ErrorKind::format, path.string() + ": unsupported PGM dimensions or maxval");
  }
  ++pos;  // single whitespace byte before raster
  const auto count = static_cast<std::size_t>(width * height);
  if (buf.size() < pos + count) fail(ErrorKind::format, path.string() + ": truncated raster");
  NDArray mask({static_cast<std::size_t>(height), static_cast<std::size_t>(width)});
  for (std::size_t i = 0; i < count; ++i) {
    const int px = static_cast<unsigned char>(buf[pos + i]);
    mask[i] = px >= threshold ? 1.0 : 0.0;
  }
  return mask;
}

void write_pgm(const std::filesystem::path& path, const NDArray& image, double lo, double hi) {
  require(image.ndim() == 2, ErrorKind::shape, "write_pgm expects (H, W)");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot create " + path.string());
  out << "P5\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  for (double v : image.values()) {
    const double u = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(u * 255.0))));
  }
  if (!out) fail(ErrorKind::io, "write failed for " + path.string());
}

MaskSet MaskSet::from_foreground(NDArray foreground) {
  MaskSet m;
  m.background = NDArray::like(foreground);
  for (std::size_t i = 0; i < foreground.size(); ++i) m.background[i] = 1.0 - foreground[i];
  m.foreground = std::move(foreground);
  m.validate();
  return m;
}

void MaskSet::validate() const {
  require(foreground.ndim() == 3, ErrorKind::shape, "masks must be (F, H, W)");
  check_same_shape(foreground, background, "MaskSet");
  for (std::size_t i = 0; i < foreground.size(); ++i) {
    const double f = foreground[i];
    require(f == 0.0 || f == 1.0, ErrorKind::validation, "mask entries must be 0 or 1");
    require(background[i] == 1.0 - f, ErrorKind::validation,
            "background must equal 1 - foreground");
  }
}

MaskSet read_masks(const std::filesystem::path& dir, int threshold) {
  const auto vdt = dir / "foreground.vdt";
  if (std::filesystem::exists(vdt)) return MaskSet::from_foreground(read_array(vdt));
  std::vector<NDArray> frames;
  for (std::size_t f = 0;; ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03zu.pgm", f);
    const auto p = dir / name;
    if (!std::filesystem::exists(p)) break;
    frames.push_back(import_pgm_mask(p, threshold));
  }
  if (frames.empty()) fail(ErrorKind::io, "no masks found in " + dir.string());
  const std::size_t h = frames[0].dim(0), w = frames[0].dim(1);
  NDArray fg({frames.size(), h, w});
  for (std::size_t f = 0; f < frames.size(); ++f) {
    require(frames[f].shape() == Shape{h, w}, ErrorKind::shape, "mask frames differ in size");
    std::copy(frames[f].values().begin(), frames[f].values().end(),
              fg.values().begin() + static_cast<std::ptrdiff_t>(f * h * w));
  }
  return MaskSet::from_foreground(std::move(fg));
}

void write_masks(const std::filesystem::path& dir, const MaskSet& masks) {
  std::filesystem::create_directories(dir);
  write_array(dir / "foreground.vdt", masks.foreground);
}

}  // namespace vdir
