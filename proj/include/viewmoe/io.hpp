// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// On-disk formats: binary PPM images (sRGB, gamma 2.2), scene dataset
// directories and the checkpoint container. All binary integers and floats
// are little-endian.
#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "viewmoe/error.hpp"
#include "viewmoe/geometry.hpp"
#include "viewmoe/image.hpp"
#include "viewmoe/scenes.hpp"
#include "viewmoe/tensor.hpp"

namespace viewmoe {

namespace fs = std::filesystem;

inline std::uint8_t srgb_encode(double c) {
  return static_cast<std::uint8_t>(std::lround(255.0 * std::pow(std::clamp(c, 0.0, 1.0), 1.0 / 2.2)));
}
inline double srgb_decode(std::uint8_t b) { return std::pow(static_cast<double>(b) / 255.0, 2.2); }

/// The image as it reads back after an 8-bit round trip.
inline Image quantize(const Image& im) {
  Image out = im;
  for (auto& c : out.data) c = srgb_decode(srgb_encode(c));
  return out;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// PPM

inline std::string encode_ppm(const Image& im) {
  std::string s = "P6\n" + std::to_string(im.width) + " " + std::to_string(im.height) + "\n255\n";
  s.reserve(s.size() + im.data.size());
  for (double c : im.data) s.push_back(static_cast<char>(srgb_encode(c)));
  return s;
}

/// Parses P6 with maxval 255; `name` labels errors.
inline Image decode_ppm(const std::string& bytes, const std::string& name) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    long long v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos])) && pos - start < 9)
      v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) throw FormatError(name, start, std::string("expected ") + what);
    return v;
  };
  if (bytes.size() < 2 || bytes.compare(0, 2, "P6") != 0) throw FormatError(name, 0, "not a binary PPM (P6)");
  pos = 2;
  const long long w = number("width"), h = number("height");
  const std::size_t maxval_at = pos;
  const long long maxval = number("maxval");
  if (w <= 0 || h <= 0) throw FormatError(name, maxval_at, "image size must be positive");
  if (maxval != 255) throw FormatError(name, maxval_at, "maxval must be 255");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw FormatError(name, pos, "missing separator before pixel data");
  ++pos;
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  if (bytes.size() - pos < need)
    throw FormatError(name, bytes.size(), "truncated pixel data: " + std::to_string(bytes.size() - pos) + " of " +
                                              std::to_string(need) + " bytes");
  if (bytes.size() - pos > need) throw FormatError(name, pos + need, "trailing bytes after pixel data");
  Image im(static_cast<int>(w), static_cast<int>(h));
  for (std::size_t i = 0; i < need; ++i) im.data[i] = srgb_decode(static_cast<std::uint8_t>(bytes[pos + i]));
  return im;
}

inline void write_ppm(const fs::path& path, const Image& im) { write_file(path, encode_ppm(im)); }
inline Image read_ppm(const fs::path& path) { return decode_ppm(read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// key = value text

/// Parses `key = value` lines; `#` starts a comment, blank lines are ignored.
/// Duplicate keys are errors.
inline std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& name) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t offset = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
  };
  while (std::getline(in, line)) {
    const std::size_t line_start = offset;
    offset += line.size() + 1;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(name, line_start, "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw FormatError(name, line_start, "empty key");
    if (!out.emplace(key, trim(line.substr(eq + 1))).second)
      throw FormatError(name, line_start, "duplicate key '" + key + "'");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

inline constexpr int kDatasetVersion = 1;

enum class ViewTag { Source, Finetune, Target };

inline const char* tag_name(ViewTag t) {
  switch (t) {
    case ViewTag::Source: return "source";
    case ViewTag::Finetune: return "finetune";
    case ViewTag::Target: return "target";
  }
  return "?";
}

inline ViewTag parse_tag(const std::string& s) {
  if (s == "source") return ViewTag::Source;
  if (s == "finetune") return ViewTag::Finetune;
  if (s == "target") return ViewTag::Target;
  throw ConfigError("unknown view tag '" + s + "'");
}

struct SceneDataset {
  int id = 0;
  std::uint64_t seed = 0;
  SceneOptions scene_options;
  double near = 1.0, far = 5.0;
  std::vector<Camera> cameras;
  std::vector<Image> images;  // linear radiance, as decoded from 8-bit sRGB
  std::vector<ViewTag> tags;

  std::size_t size() const { return cameras.size(); }
  std::vector<std::size_t> views_tagged(ViewTag t) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < tags.size(); ++i)
      if (tags[i] == t) out.push_back(i);
    return out;
  }
  SyntheticScene scene() const { return generate_scene(seed, scene_options); }
};

struct DatasetOptions {
  std::size_t views = 8;
  std::size_t targets = 2;   // last views, held out
  std::size_t finetune = 0;  // views just before the targets
  int image_size = 16;
  double distance = 3.0;
  SceneOptions scene;
};

/// Renders a dataset whose images equal what a save/load round trip yields.
inline SceneDataset generate_dataset(int id, std::uint64_t seed, const DatasetOptions& opt = {}) {
  if (opt.targets + opt.finetune + 2 > opt.views) throw ConfigError("a dataset needs at least 2 source views");
  SceneDataset d;
  d.id = id;
  d.seed = seed;
  d.scene_options = opt.scene;
  d.near = opt.distance - 1.8;
  d.far = opt.distance + 1.8;
  d.cameras = ring_cameras(opt.views, opt.image_size, opt.distance, seed);
  const auto scene = d.scene();
  for (std::size_t i = 0; i < opt.views; ++i) {
    d.images.push_back(quantize(oracle_render(scene, d.cameras[i])));
    const std::size_t from_end = opt.views - i;
    d.tags.push_back(from_end <= opt.targets ? ViewTag::Target
                     : from_end <= opt.targets + opt.finetune ? ViewTag::Finetune
                                                              : ViewTag::Source);
  }
  return d;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

/// One line per view: id fx fy cx cy W H r11 .. r33 cx cy cz.
inline std::string encode_cameras(const std::vector<Camera>& cams) {
  std::string s = "# id fx fy cx cy W H r11 r12 r13 r21 r22 r23 r31 r32 r33 cx cy cz\n";
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const Camera& c = cams[i];
    s += std::to_string(i) + " " + format_double(c.fx) + " " + format_double(c.fy) + " " + format_double(c.cx) +
         " " + format_double(c.cy) + " " + std::to_string(c.width) + " " + std::to_string(c.height);
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) s += " " + format_double(c.rotation(r, k));
    for (int k = 0; k < 3; ++k) s += " " + format_double(c.center[k]);
    s += "\n";
  }
  return s;
}

inline std::vector<Camera> decode_cameras(const std::string& text, const std::string& name) {
  std::vector<Camera> cams;
  std::istringstream in(text);
  std::string line;
  std::size_t offset = 0;
  while (std::getline(in, line)) {
    const std::size_t line_start = offset;
    offset += line.size() + 1;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::size_t id = 0;
    Camera c;
    ls >> id >> c.fx >> c.fy >> c.cx >> c.cy >> c.width >> c.height;
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) ls >> c.rotation(r, k);
    for (int k = 0; k < 3; ++k) ls >> c.center[k];
    if (!ls) throw FormatError(name, line_start, "expected 19 camera fields");
    std::string extra;
    if (ls >> extra) throw FormatError(name, line_start, "trailing fields on camera line");
    if (id != cams.size()) throw FormatError(name, line_start, "camera ids must be 0, 1, 2, ...");
    try {
      c.validate();
    } catch (const InvalidCamera& e) {
      throw FormatError(name, line_start, e.what());
    }
    cams.push_back(c);
  }
  return cams;
}

inline fs::path scene_dir(const fs::path& root, int id) { return root / ("scene_" + std::to_string(id)); }

inline void save_dataset(const fs::path& dir, const SceneDataset& d) {
  fs::create_directories(dir);
  write_file(dir / "cameras.txt", encode_cameras(d.cameras));
  std::string tags;
  for (std::size_t i = 0; i < d.tags.size(); ++i) tags += (i ? "," : "") + std::string(tag_name(d.tags[i]));
  std::string meta = "format_version = " + std::to_string(kDatasetVersion) + "\n";
  meta += "generator_version = " + std::to_string(kGeneratorVersion) + "\n";
  meta += "id = " + std::to_string(d.id) + "\n";
  meta += "seed = " + std::to_string(d.seed) + "\n";
  meta += "min_primitives = " + std::to_string(d.scene_options.min_primitives) + "\n";
  meta += "max_primitives = " + std::to_string(d.scene_options.max_primitives) + "\n";
  meta += "near = " + format_double(d.near) + "\n";
  meta += "far = " + format_double(d.far) + "\n";
  meta += "views = " + std::to_string(d.size()) + "\n";
  meta += "tags = " + tags + "\n";
  write_file(dir / "meta.txt", meta);
  for (std::size_t i = 0; i < d.images.size(); ++i)
    write_ppm(dir / ("view_" + std::to_string(i) + ".ppm"), d.images[i]);
}

inline SceneDataset load_dataset(const fs::path& dir) {
  const std::string meta_name = (dir / "meta.txt").string();
  auto meta = parse_key_values(read_file(dir / "meta.txt"), meta_name);
  auto get = [&](const std::string& k) {
    auto it = meta.find(k);
    if (it == meta.end()) throw FormatError(meta_name, 0, "missing key '" + k + "'");
    return it->second;
  };
  auto get_num = [&](const std::string& k) {
    try {
      return std::stod(get(k));
    } catch (const std::logic_error&) {
      throw FormatError(meta_name, 0, "key '" + k + "' is not a number");
    }
  };
  if (get("format_version") != std::to_string(kDatasetVersion))
    throw VersionMismatch(meta_name + ": dataset format version " + get("format_version") + ", expected " +
                          std::to_string(kDatasetVersion));
  if (get("generator_version") != std::to_string(kGeneratorVersion))
    throw VersionMismatch(meta_name + ": generator version " + get("generator_version") + ", expected " +
                          std::to_string(kGeneratorVersion));
  SceneDataset d;
  d.id = static_cast<int>(get_num("id"));
  d.seed = std::stoull(get("seed"));
  d.scene_options.min_primitives = static_cast<int>(get_num("min_primitives"));
  d.scene_options.max_primitives = static_cast<int>(get_num("max_primitives"));
  d.near = get_num("near");
  d.far = get_num("far");
  d.cameras = decode_cameras(read_file(dir / "cameras.txt"), (dir / "cameras.txt").string());
  const auto views = static_cast<std::size_t>(get_num("views"));
  if (d.cameras.size() != views)
    throw FormatError((dir / "cameras.txt").string(), 0,
                      std::to_string(d.cameras.size()) + " camera rows for " + std::to_string(views) + " views");
  std::istringstream tags(get("tags"));
  for (std::string t; std::getline(tags, t, ',');) {
    try {
      d.tags.push_back(parse_tag(t));
    } catch (const ConfigError& e) {
      throw FormatError(meta_name, 0, e.what());
    }
  }
  if (d.tags.size() != views) throw FormatError(meta_name, 0, "tag count does not match view count");
  for (std::size_t i = 0; i < views; ++i) {
    const fs::path p = dir / ("view_" + std::to_string(i) + ".ppm");
    Image im = read_ppm(p);
    if (im.width != d.cameras[i].width || im.height != d.cameras[i].height)
      throw FormatError(p.string(), 0, "image size does not match its camera");
    d.images.push_back(std::move(im));
  }
  return d;
}

/// Loads every scene_<id> directory under root, ordered by id.
inline std::vector<SceneDataset> load_datasets(const fs::path& root) {
  std::vector<std::pair<int, fs::path>> dirs;
  if (!fs::is_directory(root)) throw IoError("not a directory: " + root.string());
  for (const auto& e : fs::directory_iterator(root)) {
    const std::string n = e.path().filename().string();
    if (e.is_directory() && n.rfind("scene_", 0) == 0) dirs.emplace_back(std::stoi(n.substr(6)), e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<SceneDataset> out;
  for (const auto& [id, p] : dirs) out.push_back(load_dataset(p));
  if (out.empty()) throw IoError("no scene_<id> directories in " + root.string());
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  Shape shape;
  std::vector<double> values;

  bool operator==(const TensorRecord&) const = default;
};

/// Container layout: "MOVE" | u32 version | u64 header length | header text
/// (key=value lines) | u64 tensor count | records. A record is u64 name
/// length | name | u64 rank | rank x u64 dims | numel x f64.
struct Checkpoint {
  std::map<std::string, std::string> header;
  std::map<std::string, TensorRecord> tensors;

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

inline void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string name) : b_(bytes), name_(std::move(name)) {}

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == b_.size(); }
  bool has(std::size_t n) const { return b_.size() - pos_ >= n; }

  std::uint64_t u64() { return uint(8); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (!has(n)) throw TruncatedTensor(name_ + " @" + std::to_string(pos_) + ": unexpected end of file");
  }

 private:
  std::uint64_t uint(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  const std::string& b_;
  std::string name_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  std::string header;
  for (const auto& [k, v] : c.header) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw ConfigError("checkpoint header entries must not contain newlines or '=' in keys");
    header += k + "=" + v + "\n";
  }
  std::string s = "MOVE";
  detail::put_u32(s, kCheckpointVersion);
  detail::put_u64(s, header.size());
  s += header;
  detail::put_u64(s, c.tensors.size());
  for (const auto& [name, t] : c.tensors) {
    if (shape_numel(t.shape) != t.values.size()) throw ShapeMismatch("checkpoint tensor '" + name + "' shape/size");
    detail::put_u64(s, name.size());
    s += name;
    detail::put_u64(s, t.shape.size());
    for (auto d : t.shape) detail::put_u64(s, d);
    for (double v : t.values) detail::put_u64(s, std::bit_cast<std::uint64_t>(v));
  }
  return s;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& name) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "MOVE") != 0) throw BadMagic(name + ": not a checkpoint (bad magic)");
  detail::Reader r(bytes, name);
  r.bytes(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionMismatch(name + ": checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  Checkpoint c;
  const std::uint64_t header_len = r.u64();
  const std::size_t header_at = r.offset();
  std::string header = r.bytes(header_len);
  std::istringstream hs(header);
  std::size_t line_at = header_at;
  for (std::string line; std::getline(hs, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(name, line_at, "header line without '='");
    c.header[line.substr(0, eq)] = line.substr(eq + 1);
    line_at += line.size() + 1;
  }
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t name_len = r.u64();
    std::string tname = r.bytes(name_len);
    TensorRecord t;
    const std::uint64_t rank = r.u64();
    if (rank > 8) throw FormatError(name, r.offset() - 8, "tensor '" + tname + "' has rank " + std::to_string(rank));
    for (std::uint64_t k = 0; k < rank; ++k) t.shape.push_back(r.u64());
    const std::size_t n = shape_numel(t.shape);
    r.need(n * 8);
    t.values.resize(n);
    for (auto& v : t.values) v = r.f64();
    if (!c.tensors.emplace(std::move(tname), std::move(t)).second)
      throw FormatError(name, r.offset(), "duplicate tensor name");
  }
  if (!r.at_end()) throw FormatError(name, r.offset(), "trailing bytes after the last tensor");
  return c;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& c) { write_file(path, encode_checkpoint(c)); }
inline Checkpoint load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path), path.string()); }

}  // namespace viewmoe
