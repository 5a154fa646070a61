#include "videodirector/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "videodirector/error.hpp"

namespace vdir {
namespace {

using nlohmann::json;

void only_keys(const json& obj, const char* where, const std::set<std::string>& allowed) {
  if (!obj.is_object()) fail(ErrorKind::format, std::string(where) + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.contains(key)) {
      fail(ErrorKind::format, std::string("unknown key '") + key + "' in " + where);
    }
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

ObjectSpec parse_object(const json& j) {
  only_keys(j, "object", {"shape", "name", "size", "x", "y", "vx", "vy", "intensity"});
  ObjectSpec o;
  std::string shape = "square";
  read(j, "shape", shape);
  if (shape == "square") {
    o.shape = ShapeKind::square;
  } else if (shape == "disk") {
    o.shape = ShapeKind::disk;
  } else {
    fail(ErrorKind::format, "unknown object shape '" + shape + "'");
  }
  o.name = shape;
  read(j, "name", o.name);
  read(j, "size", o.size);
  read(j, "x", o.x);
  read(j, "y", o.y);
  read(j, "vx", o.vx);
  read(j, "vy", o.vy);
  read(j, "intensity", o.intensity);
  return o;
}

std::string video_dir_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "video_%03zu", i);
  return buf;
}

}  // namespace

DatasetSpec DatasetSpec::parse(const std::string& text) {
  DatasetSpec d;
  try {
    const json root = json::parse(text, nullptr, true, /*ignore_comments=*/true);
    only_keys(root, "dataset spec",
              {"seed", "count", "frames", "channels", "height", "width", "objects", "noise",
               "videos"});
    read(root, "seed", d.seed);
    read(root, "count", d.count);
    read(root, "frames", d.frames);
    read(root, "channels", d.channels);
    read(root, "height", d.height);
    read(root, "width", d.width);
    read(root, "objects", d.objects);
    read(root, "noise", d.noise);
    if (root.contains("videos")) {
      for (const json& v : root["videos"]) {
        only_keys(v, "video", {"background", "background_level", "background_slope", "objects"});
        SyntheticSpec s;
        s.frames = d.frames;
        s.channels = d.channels;
        s.height = d.height;
        s.width = d.width;
        s.noise = d.noise;
        std::string bg = "constant";
        read(v, "background", bg);
        if (bg == "constant") {
          s.background = BackgroundKind::constant;
        } else if (bg == "gradient") {
          s.background = BackgroundKind::gradient;
        } else {
          fail(ErrorKind::format, "unknown background '" + bg + "'");
        }
        read(v, "background_level", s.background_level);
        read(v, "background_slope", s.background_slope);
        if (v.contains("objects")) {
          for (const json& o : v["objects"]) s.objects.push_back(parse_object(o));
        }
        s.validate();
        d.videos.push_back(std::move(s));
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("dataset spec: ") + e.what());
  }
  require(d.frames > 0 && d.channels > 0 && d.height > 0 && d.width > 0, ErrorKind::validation,
          "dataset dimensions must be positive");
  require(d.count + d.videos.size() > 0, ErrorKind::validation, "dataset spec yields no videos");
  return d;
}

DatasetSpec DatasetSpec::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open dataset spec " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::vector<SyntheticVideo> generate_dataset(const DatasetSpec& spec) {
  std::vector<SyntheticVideo> out;
  const Rng root(spec.seed);
  std::uint64_t tag = 0;
  for (const auto& s : spec.videos) {
    Rng rng = root.fork(tag++);
    out.push_back(gen_synthetic(s, rng));
  }
  for (std::size_t i = 0; i < spec.count; ++i) {
    Rng rng = root.fork(tag++);
    SyntheticSpec s =
        random_spec(rng, spec.frames, spec.channels, spec.height, spec.width, spec.objects);
    s.noise = spec.noise;
    out.push_back(gen_synthetic(s, rng));
  }
  return out;
}

void write_dataset(const std::filesystem::path& dir, const DatasetSpec& spec,
                   const std::vector<SyntheticVideo>& videos) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json m;
  m["seed"] = spec.seed;
  m["videos"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const std::string name = video_dir_name(i);
    const auto sub = dir / name;
    std::filesystem::create_directories(sub);
    write_array(sub / "video.vdt", videos[i].video);
    write_masks(sub / "masks", videos[i].masks);
    m["videos"].push_back({{"dir", name}, {"prompt", videos[i].prompt}});
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) fail(ErrorKind::io, "cannot write dataset manifest in " + dir.string());
  out << m.dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) fail(ErrorKind::io, "missing manifest.json in dataset " + dir.string());
  Dataset d;
  try {
    const json m = json::parse(in);
    d.seed = m.value("seed", std::uint64_t{0});
    for (const json& v : m.at("videos")) {
      TrainExample ex;
      ex.video = read_array(dir / v.at("dir").get<std::string>() / "video.vdt");
      ex.prompt = v.value("prompt", "");
      d.examples.push_back(std::move(ex));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::format, "dataset manifest: " + std::string(e.what()));
  }
  require(!d.examples.empty(), ErrorKind::validation, "dataset has no videos");
  return d;
}

}  // namespace vdir
