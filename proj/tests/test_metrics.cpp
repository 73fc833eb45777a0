// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "viewmoe/metrics.hpp"

using namespace viewmoe;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("viewmoe_metrics_" + std::to_string(Rng(std::random_device{}()).next()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Image random_image(int w, int h, Rng& rng) {
  Image im(w, h);
  for (auto& v : im.data) v = rng.uniform();
  return im;
}

/// Direct windowed SSIM: for each window position, explicit 2-D Gaussian
/// weights and centered second moments.
double ssim_oracle(const Image& a, const Image& b) {
  const int n = 11;
  const double sigma = 1.5;
  double wsum = 0.0;
  double w2[11][11];
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double y = i - 5, x = j - 5;
      w2[i][j] = std::exp(-(x * x + y * y) / (2 * sigma * sigma));
      wsum += w2[i][j];
    }
  auto gray = [](const Image& im, int r, int c) { return (im.at(r, c, 0) + im.at(r, c, 1) + im.at(r, c, 2)) / 3.0; };
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0.0;
  int windows = 0;
  for (int r0 = 0; r0 + n <= a.height; ++r0)
    for (int c0 = 0; c0 + n <= a.width; ++c0) {
      double mx = 0, my = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          mx += w2[i][j] / wsum * gray(a, r0 + i, c0 + j);
          my += w2[i][j] / wsum * gray(b, r0 + i, c0 + j);
        }
      double vx = 0, vy = 0, cxy = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const double dx = gray(a, r0 + i, c0 + j) - mx, dy = gray(b, r0 + i, c0 + j) - my;
          vx += w2[i][j] / wsum * dx * dx;
          vy += w2[i][j] / wsum * dy * dy;
          cxy += w2[i][j] / wsum * dx * dy;
        }
      total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++windows;
    }
  return total / windows;
}

ModelConfig mini_config() {
  ModelConfig c;
  c.dim = 8;
  c.layers = 2;
  c.heads = 2;
  c.ray_blocks = 1;
  c.pos_freqs = 2;
  c.dir_freqs = 1;
  c.depth_freqs = 2;
  return c;
}

}  // namespace

TEST_CASE("psnr fixtures", "[metrics]") {
  Image a(4, 3, 0.5), b(4, 3, 0.5);
  CHECK(psnr(a, b) == kPsnrCap);
  for (std::size_t i = 0; i < b.data.size(); ++i) b.data[i] = i % 2 ? 0.4 : 0.6;  // MSE 0.01
  CHECK(std::abs(psnr(a, b) - 20.0) < 1e-6);
  Image zero(4, 3, 0.0), half(4, 3, 0.5);
  CHECK(std::abs(psnr(zero, half) - 10 * std::log10(4.0)) < 1e-6);
  CHECK(std::abs(psnr(zero, half) - 6.0206) < 1e-4);
  CHECK_THROWS_AS(psnr(a, Image(3, 4)), ShapeMismatch);
}

TEST_CASE("psnr is symmetric and falls with noise", "[metrics][property]") {
  Rng rng(5);
  auto clean = random_image(16, 16, rng);
  double last = kPsnrCap + 1;
  for (double amp : {0.01, 0.05, 0.1}) {
    Rng noise(9);
    Image noisy = clean;
    for (auto& v : noisy.data) v += amp * noise.uniform(-1, 1);
    const double p = psnr(clean, noisy);
    CHECK(p == psnr(noisy, clean));
    CHECK(p < last);
    last = p;
  }
}

TEST_CASE("ssim fixtures and oracle", "[metrics]") {
  Rng rng(6);
  auto a = random_image(16, 12, rng);
  CHECK(std::abs(ssim(a, a) - 1.0) < 1e-12);
  Image neg = a;
  for (auto& v : neg.data) v = 1.0 - v;
  CHECK(ssim(a, neg) < 1.0);
  CHECK_THROWS_AS(ssim(Image(10, 20), Image(10, 20)), ImageTooSmall);
  CHECK_THROWS_AS(ssim(Image(20, 10), Image(20, 10)), ImageTooSmall);
  CHECK_THROWS_AS(ssim(Image(20, 20), Image(20, 21)), ShapeMismatch);

  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    auto x = random_image(32, 32, rng);
    // correlated partner so values spread over (-1, 1)
    Image y = x;
    const double mix = rng.uniform();
    for (auto& v : y.data) v = std::clamp(mix * v + (1 - mix) * rng.uniform(), 0.0, 1.0);
    const double s = ssim(x, y);
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
    CHECK(std::abs(s - ssim(y, x)) < 1e-12);
    worst = std::max(worst, std::abs(s - ssim_oracle(x, y)));
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("csv artifacts parse back exactly", "[metrics][io]") {
  EvalReport r;
  r.views = {{3, 21.123456789012345, 0.5}, {7, 99.0, -0.0123456789}};
  const auto csv = encode_eval_csv(r);
  CHECK(csv.substr(0, 15) == "view,psnr,ssim\n");
  CHECK(decode_eval_csv(csv, "r.csv") == r.views);
  CHECK_THROWS_AS(decode_eval_csv("view,psnr\n1,2\n", "r.csv"), FormatError);
  CHECK_THROWS_AS(decode_eval_csv("view,psnr,ssim\n1,x,2\n", "r.csv"), FormatError);
  CHECK_THROWS_AS(decode_eval_csv("view,psnr,ssim\n1,2\n", "r.csv"), FormatError);

  std::vector<std::vector<double>> hist = {{0.1, 0.2, 0.3, 0.4}, {1.0 / 3, 1.0 / 3, 1.0 / 3, 0.0}};
  CHECK(decode_usage_csv(encode_usage_csv(hist), "u.csv") == hist);
  CHECK_THROWS_AS(decode_usage_csv("layer,expert,frequency\n0,1,0.5\n", "u.csv"), FormatError);

  std::vector<std::uint64_t> ids = {2, 9};
  std::vector<std::vector<double>> m = {{1.0, 0.25}, {0.25, 1.0}};
  auto om = decode_overlap_csv(encode_overlap_csv(ids, m), "o.csv");
  CHECK(om.ids == ids);
  CHECK(om.values == m);
  CHECK_THROWS_AS(decode_overlap_csv("scene,2,9\n2,1,0.5\n", "o.csv"), FormatError);
  CHECK_THROWS_AS(decode_overlap_csv("scene,2,9\n9,1,0.5\n2,1,1\n", "o.csv"), FormatError);
}

TEST_CASE("pattern palette", "[metrics]") {
  CHECK(pattern_palette(binomial(4, 2)).size() == 6);
  for (std::size_t n : {1, 6, 10, 20}) {
    auto p = pattern_palette(n);
    CHECK(p.size() == n);
    CHECK(std::set<std::array<std::uint8_t, 3>>(p.begin(), p.end()).size() == n);
  }
  auto img = expert_map_image({0, 5, -1, 2}, 2, 2, pattern_palette(6));
  auto bytes = encode_ppm(img);
  auto px = bytes.substr(bytes.size() - 12);
  const auto pal = pattern_palette(6);
  CHECK(static_cast<std::uint8_t>(px[3]) == pal[5][0]);
  CHECK(static_cast<std::uint8_t>(px[4]) == pal[5][1]);
  CHECK(static_cast<std::uint8_t>(px[6]) == 0);
}

TEST_CASE("usage histogram equals a recount of per-ray selections", "[metrics]") {
  Rng rng(8);
  Model model(mini_config(), rng);
  auto d = generate_dataset(0, 3, {.views = 4, .targets = 1, .finetune = 0, .image_size = 12, .scene = {}});
  auto src = d.views_tagged(ViewTag::Source);
  std::vector<Camera> cams;
  std::vector<const Image*> ims;
  for (auto v : src) {
    cams.push_back(d.cameras[v]);
    ims.push_back(&d.images[v]);
  }
  auto bank = model.encode(cams, ims);
  RenderOptions opt;
  opt.samples = 6;
  opt.near = d.near;
  opt.far = d.far;
  opt.chunk = 50;
  const Camera& cam = d.cameras[d.views_tagged(ViewTag::Target)[0]];
  auto out = render_image(model, cam, bank, opt);
  auto hist = usage_histogram(out.expert_counts, 4);

  // recount from the raw gate batches of one forward pass over all pixels
  std::vector<std::pair<int, int>> px;
  for (int r = 0; r < cam.height; ++r)
    for (int c = 0; c < cam.width; ++c) px.emplace_back(r, c);
  auto rays = rays_for_pixels(cam, -1, px, opt.near, opt.far);
  auto raw = model.render_rays(rays, bank, std::vector<int>(px.size(), -1), opt.samples);
  for (std::size_t l = 0; l < 2; ++l) {
    std::vector<double> count(4, 0.0);
    const auto& g = raw.views.gates[l];
    for (std::size_t row = 0; row < g.tokens; ++row)
      for (std::size_t e = 0; e < 4; ++e) count[e] += g.sparse.value(row * 4 + e) != 0.0;
    double total = 0.0, sum = 0.0;
    for (double c : count) total += c;
    for (std::size_t e = 0; e < 4; ++e) {
      CHECK(hist[l][e] == Catch::Approx(count[e] / total).margin(1e-12));
      sum += hist[l][e];
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
    CHECK(total == 2.0 * static_cast<double>(raw.views.valid_rows.size()));
  }
  // no selections at all: uniform rows
  auto empty = usage_histogram({std::vector<std::uint32_t>(8, 0)}, 4);
  CHECK(empty[0] == std::vector<double>(4, 0.25));
}

TEST_CASE("expert artifacts from an untrained model", "[metrics][io]") {
  TempDir tmp;
  Rng rng(10);
  Model model(mini_config(), rng);
  std::vector<SceneDataset> scenes;
  for (std::uint64_t i = 0; i < 2; ++i)
    scenes.push_back(generate_dataset(i, 40 + i, {.views = 4, .targets = 1, .finetune = 0, .image_size = 10, .scene = {}}));
  auto sum = emit_expert_artifacts(model, scenes, tmp.path, 6);
  CHECK(sum.files.size() == 2 * 2 + 2 + 2);
  for (const auto& f : sum.files) CHECK(fs::exists(f));
  const auto pal = pattern_palette(6);
  std::set<std::array<std::uint8_t, 3>> allowed(pal.begin(), pal.end());
  allowed.insert({0, 0, 0});
  auto bytes = read_file(tmp.path / "scene_0_layer1_experts.ppm");
  auto map = decode_ppm(bytes, "map");
  CHECK(map.width == 10);
  const std::string body = bytes.substr(bytes.size() - 300);
  for (std::size_t p = 0; p < 100; ++p)
    CHECK(allowed.count({static_cast<std::uint8_t>(body[3 * p]), static_cast<std::uint8_t>(body[3 * p + 1]),
                         static_cast<std::uint8_t>(body[3 * p + 2])}) == 1);
  for (std::uint64_t i = 0; i < 2; ++i) {
    auto hist = decode_usage_csv(read_file(tmp.path / ("scene_" + std::to_string(i) + "_usage.csv")), "u");
    CHECK(hist == sum.usage[i]);
    for (const auto& row : hist) {
      double s = 0.0;
      for (double v : row) s += v;
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
  auto om = decode_overlap_csv(read_file(tmp.path / "overlap_layer0.csv"), "o");
  CHECK(om.ids == std::vector<std::uint64_t>{0, 1});
  CHECK(std::abs(om.values[0][0] - 1.0) < 1e-12);
  CHECK(om.values[0][1] == om.values[1][0]);
  CHECK(om.values[0][1] <= 1.0 + 1e-12);
}

TEST_CASE("depth image normalization", "[metrics]") {
  auto im = depth_image({1.0, 3.0, 5.0, 9.0}, 2, 2, 1.0, 5.0);
  CHECK(im.at(0, 0, 0) == 0.0);
  CHECK(im.at(0, 1, 1) == 0.5);
  CHECK(im.at(1, 0, 2) == 1.0);
  CHECK(im.at(1, 1, 0) == 1.0);
  CHECK_THROWS_AS(depth_image({1.0}, 2, 2, 1.0, 5.0), ShapeMismatch);
}

TEST_CASE("evaluation scores every target view", "[metrics]") {
  Rng rng(11);
  Model model(mini_config(), rng);
  auto d = generate_dataset(5, 77, {.views = 5, .targets = 2, .finetune = 0, .image_size = 12, .scene = {}});
  auto rep = evaluate(model, d, d.views_tagged(ViewTag::Source), d.views_tagged(ViewTag::Target), 4);
  REQUIRE(rep.views.size() == 2);
  CHECK(rep.views[0].view == 3);
  CHECK(rep.views[1].view == 4);
  for (const auto& v : rep.views) {
    CHECK(v.psnr >= 0.0);
    CHECK(v.ssim <= 1.0);
  }
  set_num_threads(2);
  auto again = evaluate(model, d, d.views_tagged(ViewTag::Source), d.views_tagged(ViewTag::Target), 4);
  set_num_threads(1);
  CHECK(again.views == rep.views);
  CHECK(mean_color_baseline_psnr(d, d.views_tagged(ViewTag::Source), 3) > 0.0);
}
