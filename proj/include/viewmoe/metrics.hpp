// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Image quality metrics, evaluation reports and the analysis artifacts written
// from a trained model: expert maps, usage histograms, cross-scene overlap and
// depth maps. Every CSV written here has a reader that parses it back exactly.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "viewmoe/io.hpp"
#include "viewmoe/moe.hpp"
#include "viewmoe/parallel.hpp"
#include "viewmoe/renderer.hpp"

namespace viewmoe {

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) over all channels, capped so identical images stay finite.
inline double psnr(const Image& a, const Image& b) {
  require_same_size("psnr", a, b);
  double sum = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) sum += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  const double mse = a.data.empty() ? 0.0 : sum / static_cast<double>(a.data.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
inline std::array<double, kSsimWindow> ssim_taps() {
  std::array<double, kSsimWindow> w{};
  double sum = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double x = i - kSsimWindow / 2;
    w[static_cast<std::size_t>(i)] = std::exp(-x * x / (2 * kSsimSigma * kSsimSigma));
    sum += w[static_cast<std::size_t>(i)];
  }
  for (auto& v : w) v /= sum;
  return w;
}

/// Channel mean, row-major [H*W].
inline std::vector<double> grayscale(const Image& im) {
  std::vector<double> g(im.pixels());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = (im.data[3 * i] + im.data[3 * i + 1] + im.data[3 * i + 2]) / 3.0;
  return g;
}

/// Mean SSIM over all windows lying fully inside the image, on the channel-mean
/// grayscale with dynamic range 1.
inline double ssim(const Image& a, const Image& b) {
  require_same_size("ssim", a, b);
  if (a.width < kSsimWindow || a.height < kSsimWindow)
    throw ImageTooSmall("ssim needs at least " + std::to_string(kSsimWindow) + " px per side, got " +
                        std::to_string(a.width) + "x" + std::to_string(a.height));
  const auto w = ssim_taps();
  const auto ga = grayscale(a), gb = grayscale(b);
  const std::size_t W = static_cast<std::size_t>(a.width), H = static_cast<std::size_t>(a.height);
  const std::size_t ow = W - kSsimWindow + 1, oh = H - kSsimWindow + 1;

  // five moment images, filtered horizontally then vertically
  std::array<std::vector<double>, 5> src;
  for (auto& s : src) s.resize(W * H);
  for (std::size_t i = 0; i < W * H; ++i) {
    src[0][i] = ga[i];
    src[1][i] = gb[i];
    src[2][i] = ga[i] * ga[i];
    src[3][i] = gb[i] * gb[i];
    src[4][i] = ga[i] * gb[i];
  }
  std::array<std::vector<double>, 5> mom;
  for (std::size_t m = 0; m < 5; ++m) {
    std::vector<double> horiz(H * ow, 0.0);
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < ow; ++c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < kSsimWindow; ++k) acc += w[k] * src[m][r * W + c + k];
        horiz[r * ow + c] = acc;
      }
    mom[m].assign(oh * ow, 0.0);
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t c = 0; c < ow; ++c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < kSsimWindow; ++k) acc += w[k] * horiz[(r + k) * ow + c];
        mom[m][r * ow + c] = acc;
      }
  }
  const double c1 = kSsimK1 * kSsimK1, c2 = kSsimK2 * kSsimK2;
  double total = 0.0;
  for (std::size_t i = 0; i < oh * ow; ++i) {
    const double mx = mom[0][i], my = mom[1][i];
    const double vx = mom[2][i] - mx * mx, vy = mom[3][i] - my * my, cxy = mom[4][i] - mx * my;
    total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(oh * ow);
}

// ---------------------------------------------------------------------------
// Evaluation reports

struct ViewScore {
  std::size_t view = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  bool operator==(const ViewScore&) const = default;
};

struct EvalReport {
  std::uint64_t scene_id = 0;
  std::string split = "target";
  std::string checkpoint_id;
  std::vector<ViewScore> views;

  double mean_psnr() const {
    double s = 0.0;
    for (const auto& v : views) s += v.psnr;
    return views.empty() ? 0.0 : s / static_cast<double>(views.size());
  }
  double mean_ssim() const {
    double s = 0.0;
    for (const auto& v : views) s += v.ssim;
    return views.empty() ? 0.0 : s / static_cast<double>(views.size());
  }
};

/// `view,psnr,ssim` rows, one per evaluated view.
inline std::string encode_eval_csv(const EvalReport& r) {
  std::string s = "view,psnr,ssim\n";
  for (const auto& v : r.views) s += std::to_string(v.view) + "," + format_double(v.psnr) + "," + format_double(v.ssim) + "\n";
  return s;
}

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_csv_double(const std::string& cell, const std::string& name, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw FormatError(name, line, "not a number: '" + cell + "'");
  }
}

inline std::size_t parse_csv_index(const std::string& cell, const std::string& name, std::size_t line) {
  if (cell.empty() || cell.find_first_not_of("0123456789") != std::string::npos)
    throw FormatError(name, line, "not an index: '" + cell + "'");
  return static_cast<std::size_t>(std::stoull(cell));
}

/// Lines of a CSV after checking its header; offsets in errors are line numbers.
inline std::vector<std::vector<std::string>> read_csv_rows(const std::string& text, const std::string& header,
                                                           std::size_t columns, const std::string& name) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != header) throw FormatError(name, 1, "expected header '" + header + "'");
  std::vector<std::vector<std::string>> rows;
  for (std::size_t n = 2; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (columns && cells.size() != columns)
      throw FormatError(name, n, "expected " + std::to_string(columns) + " columns, got " + std::to_string(cells.size()));
    rows.push_back(std::move(cells));
  }
  return rows;
}
}  // namespace detail

inline std::vector<ViewScore> decode_eval_csv(const std::string& text, const std::string& name) {
  std::vector<ViewScore> out;
  std::size_t line = 2;
  for (const auto& row : detail::read_csv_rows(text, "view,psnr,ssim", 3, name)) {
    out.push_back({detail::parse_csv_index(row[0], name, line), detail::parse_csv_double(row[1], name, line),
                   detail::parse_csv_double(row[2], name, line)});
    ++line;
  }
  return out;
}

/// Encodes `sources` once and scores the renders of `targets` against their
/// ground-truth images. Views are rendered in parallel.
inline EvalReport evaluate(const Model& model, const SceneDataset& d, const std::vector<std::size_t>& sources,
                           const std::vector<std::size_t>& targets, std::size_t samples) {
  if (sources.empty()) throw InsufficientViews("evaluation needs at least one source view");
  std::vector<Camera> cams;
  std::vector<const Image*> ims;
  for (auto v : sources) {
    cams.push_back(d.cameras.at(v));
    ims.push_back(&d.images.at(v));
  }
  const FeatureBank bank = model.encode(cams, ims);
  EvalReport rep;
  rep.scene_id = d.id;
  rep.views.resize(targets.size());
  RenderOptions opt;
  opt.samples = samples;
  opt.near = d.near;
  opt.far = d.far;
  parallel_for(targets.size(), 1, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const std::size_t v = targets[i];
      auto out = render_image(model, d.cameras.at(v), bank, opt);
      rep.views[i] = {v, psnr(out.rgb, d.images.at(v)), ssim(out.rgb, d.images.at(v))};
    }
  });
  return rep;
}

/// PSNR of predicting every pixel as the mean color of the source views.
inline double mean_color_baseline_psnr(const SceneDataset& d, const std::vector<std::size_t>& sources,
                                       std::size_t target) {
  double mean[3] = {0, 0, 0};
  std::size_t n = 0;
  for (auto v : sources) {
    const Image& im = d.images.at(v);
    for (std::size_t p = 0; p < im.pixels(); ++p)
      for (int c = 0; c < 3; ++c) mean[c] += im.data[3 * p + static_cast<std::size_t>(c)];
    n += im.pixels();
  }
  const Image& t = d.images.at(target);
  Image pred(t.width, t.height);
  for (std::size_t p = 0; p < pred.pixels(); ++p)
    for (int c = 0; c < 3; ++c) pred.data[3 * p + static_cast<std::size_t>(c)] = mean[c] / static_cast<double>(n);
  return psnr(pred, t);
}

// ---------------------------------------------------------------------------
// Expert artifacts

/// One color per expert combination. The first six are fixed so maps for four
/// experts choosing two always use the same colors; more are spread in hue.
inline std::vector<std::array<std::uint8_t, 3>> pattern_palette(std::size_t patterns) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 6> kFixed = {{
      {230, 25, 75},
      {60, 180, 75},
      {255, 225, 25},
      {0, 130, 200},
      {245, 130, 48},
      {145, 30, 180},
  }};
  std::vector<std::array<std::uint8_t, 3>> out;
  for (std::size_t i = 0; i < patterns; ++i) {
    if (i < kFixed.size()) {
      out.push_back(kFixed[i]);
      continue;
    }
    // HSV with s = v = 0.8, hue by golden-ratio steps
    const double h = std::fmod(0.618033988749895 * static_cast<double>(i), 1.0) * 6.0;
    const double c = 0.8 * 0.8, x = c * (1 - std::abs(std::fmod(h, 2.0) - 1)), m = 0.8 - c;
    double rgb[3] = {0, 0, 0};
    const int sector = static_cast<int>(h);
    const int order[6][3] = {{0, 1, 2}, {1, 0, 2}, {2, 0, 1}, {2, 1, 0}, {1, 2, 0}, {0, 2, 1}};
    rgb[order[sector][0]] = c;
    rgb[order[sector][1]] = x;
    for (auto& v : rgb) v += m;
    out.push_back({static_cast<std::uint8_t>(std::lround(255 * rgb[0])), static_cast<std::uint8_t>(std::lround(255 * rgb[1])),
                   static_cast<std::uint8_t>(std::lround(255 * rgb[2]))});
  }
  return out;
}

/// Pixel colors from pattern indices; -1 (no valid sample on the ray) is black.
/// Stored in linear radiance so the PPM bytes equal the palette entries.
inline Image expert_map_image(const std::vector<int>& pattern, int width, int height,
                              const std::vector<std::array<std::uint8_t, 3>>& palette) {
  if (pattern.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
    throw ShapeMismatch("expert_map_image: pattern size does not match the image");
  Image im(width, height);
  for (std::size_t p = 0; p < pattern.size(); ++p) {
    if (pattern[p] < 0) continue;
    const auto& col = palette.at(static_cast<std::size_t>(pattern[p]));
    for (int c = 0; c < 3; ++c) im.data[3 * p + static_cast<std::size_t>(c)] = srgb_decode(col[static_cast<std::size_t>(c)]);
  }
  return im;
}

/// Per layer, the fraction of expert selections that went to each expert,
/// summed over all rays. Each row sums to 1; a layer with no selections is uniform.
inline std::vector<std::vector<double>> usage_histogram(const std::vector<std::vector<std::uint32_t>>& counts,
                                                        std::size_t experts) {
  std::vector<std::vector<double>> out;
  for (const auto& layer : counts) {
    std::vector<double> h(experts, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < layer.size(); ++i) {
      h[i % experts] += layer[i];
      total += layer[i];
    }
    for (auto& v : h) v = total > 0 ? v / total : 1.0 / static_cast<double>(experts);
    out.push_back(std::move(h));
  }
  return out;
}

inline std::string encode_usage_csv(const std::vector<std::vector<double>>& hist) {
  std::string s = "layer,expert,frequency\n";
  for (std::size_t l = 0; l < hist.size(); ++l)
    for (std::size_t e = 0; e < hist[l].size(); ++e)
      s += std::to_string(l) + "," + std::to_string(e) + "," + format_double(hist[l][e]) + "\n";
  return s;
}

inline std::vector<std::vector<double>> decode_usage_csv(const std::string& text, const std::string& name) {
  std::vector<std::vector<double>> hist;
  std::size_t line = 2;
  for (const auto& row : detail::read_csv_rows(text, "layer,expert,frequency", 3, name)) {
    const auto l = detail::parse_csv_index(row[0], name, line), e = detail::parse_csv_index(row[1], name, line);
    if (l > hist.size() || (l == hist.size() && e != 0) || (l < hist.size() && e != hist[l].size()))
      throw FormatError(name, line, "rows must be ordered by layer then expert");
    if (l == hist.size()) hist.emplace_back();
    hist[l].push_back(detail::parse_csv_double(row[2], name, line));
    ++line;
  }
  return hist;
}

/// Histogram intersection sum_e min(a_e, b_e): 1 for identical usage, 0 for
/// disjoint expert sets.
inline double usage_overlap(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeMismatch("usage_overlap: expert counts differ");
  double s = 0.0;
  for (std::size_t e = 0; e < a.size(); ++e) s += std::min(a[e], b[e]);
  return s;
}

/// Square matrix with a header of scene ids: `scene,<id>,...`, then one row per scene.
inline std::string encode_overlap_csv(const std::vector<std::uint64_t>& ids, const std::vector<std::vector<double>>& m) {
  std::string s = "scene";
  for (auto id : ids) s += "," + std::to_string(id);
  s += "\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    s += std::to_string(ids[i]);
    for (double v : m.at(i)) s += "," + format_double(v);
    s += "\n";
  }
  return s;
}

struct OverlapMatrix {
  std::vector<std::uint64_t> ids;
  std::vector<std::vector<double>> values;
};

inline OverlapMatrix decode_overlap_csv(const std::string& text, const std::string& name) {
  std::istringstream in(text);
  std::string header;
  std::getline(in, header);
  auto cells = detail::split_csv_line(header);
  if (cells.empty() || cells[0] != "scene") throw FormatError(name, 1, "expected header starting with 'scene'");
  OverlapMatrix m;
  for (std::size_t i = 1; i < cells.size(); ++i) m.ids.push_back(detail::parse_csv_index(cells[i], name, 1));
  for (const auto& row : detail::read_csv_rows(text, header, cells.size(), name)) {
    const std::size_t line = m.values.size() + 2;
    if (m.values.size() >= m.ids.size() || detail::parse_csv_index(row[0], name, line) != m.ids[m.values.size()])
      throw FormatError(name, line, "row scene ids must follow the header order");
    std::vector<double> r;
    for (std::size_t i = 1; i < row.size(); ++i) r.push_back(detail::parse_csv_double(row[i], name, line));
    m.values.push_back(std::move(r));
  }
  if (m.values.size() != m.ids.size()) throw FormatError(name, m.values.size() + 2, "matrix is not square");
  return m;
}

/// Grayscale depth image, (t - near) / (far - near) clamped to [0, 1]; near is black.
inline Image depth_image(const std::vector<double>& depth, int width, int height, double near, double far) {
  if (depth.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
    throw ShapeMismatch("depth_image: depth size does not match the image");
  Image im(width, height);
  for (std::size_t p = 0; p < depth.size(); ++p) {
    const double v = std::clamp((depth[p] - near) / (far - near), 0.0, 1.0);
    for (int c = 0; c < 3; ++c) im.data[3 * p + static_cast<std::size_t>(c)] = v;
  }
  return im;
}

struct ArtifactSummary {
  std::vector<std::uint64_t> scene_ids;
  std::vector<std::vector<std::vector<double>>> usage;  // [scene][layer][expert]
  std::vector<std::vector<std::vector<double>>> overlap;  // [layer][scene][scene]
  std::vector<fs::path> files;
};

/// Renders the first target view of each scene from its source views and writes,
/// per scene, one expert-map PPM per layer and a usage CSV, then one
/// cross-scene overlap CSV per layer.
inline ArtifactSummary emit_expert_artifacts(const Model& model, const std::vector<SceneDataset>& scenes,
                                             const fs::path& out_dir, std::size_t samples) {
  fs::create_directories(out_dir);
  const auto& cfg = model.config();
  const auto palette = pattern_palette(binomial(cfg.experts, cfg.top_k));
  ArtifactSummary sum;
  for (const auto& d : scenes) {
    auto sources = d.views_tagged(ViewTag::Source);
    auto targets = d.views_tagged(ViewTag::Target);
    if (sources.empty() || targets.empty())
      throw InsufficientViews("scene " + std::to_string(d.id) + " needs source and target views for expert maps");
    std::vector<Camera> cams;
    std::vector<const Image*> ims;
    for (auto v : sources) {
      cams.push_back(d.cameras[v]);
      ims.push_back(&d.images[v]);
    }
    RenderOptions opt;
    opt.samples = samples;
    opt.near = d.near;
    opt.far = d.far;
    const Camera& cam = d.cameras[targets.front()];
    auto out = render_image(model, cam, model.encode(cams, ims), opt);
    const std::string tag = "scene_" + std::to_string(d.id);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      auto path = out_dir / (tag + "_layer" + std::to_string(l) + "_experts.ppm");
      write_ppm(path, expert_map_image(out.expert_pattern[l], cam.width, cam.height, palette));
      sum.files.push_back(path);
    }
    auto hist = usage_histogram(out.expert_counts, cfg.experts);
    auto path = out_dir / (tag + "_usage.csv");
    write_file(path, encode_usage_csv(hist));
    sum.files.push_back(path);
    sum.scene_ids.push_back(d.id);
    sum.usage.push_back(std::move(hist));
  }
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    std::vector<std::vector<double>> m(scenes.size(), std::vector<double>(scenes.size()));
    for (std::size_t a = 0; a < scenes.size(); ++a)
      for (std::size_t b = 0; b < scenes.size(); ++b) m[a][b] = usage_overlap(sum.usage[a][l], sum.usage[b][l]);
    auto path = out_dir / ("overlap_layer" + std::to_string(l) + ".csv");
    write_file(path, encode_overlap_csv(sum.scene_ids, m));
    sum.files.push_back(path);
    sum.overlap.push_back(std::move(m));
  }
  return sum;
}

}  // namespace viewmoe
