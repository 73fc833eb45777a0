// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Prints one PASS or FAIL line per criterion and exits
// nonzero if any criterion fails. Pass criterion numbers as arguments to run a
// subset, e.g. `acceptance 2 3 4`.
//
// Every tolerance and budget below is fixed here on purpose. Do not loosen one
// to make a run pass.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

#include "viewmoe/audit.hpp"
#include "viewmoe/metrics.hpp"
#include "viewmoe/training.hpp"

using namespace viewmoe;

namespace {

// criterion 1
constexpr double kGradcheckBudgetSeconds = 120.0;
// criterion 2
constexpr std::size_t kDispatchTokens = 1000;
constexpr double kDispatchTolerance = 1e-10;
// criterion 3
constexpr std::size_t kGateTokens = 100000;
constexpr double kGateSumTolerance = 1e-12;
constexpr std::uint64_t kToyPathCount = 1296;
// criterion 4
constexpr double kSymKlFixture = 0.43945;
constexpr double kSymKlTolerance = 1e-4;
constexpr double kDiversityTolerance = 1e-12;
// criterion 5
constexpr std::size_t kOverfitSteps = 2000;
constexpr std::size_t kOverfitEarlySteps = 500;
constexpr double kOverfitMarginDb = 5.0;
constexpr double kOverfitLossDrop = 0.5;
constexpr double kOverfitBudgetSeconds = 600.0;
constexpr std::size_t kLossWindow = 20;  // steps averaged at each end of the loss comparison
// criterion 6
constexpr std::size_t kRegularizerSteps = 400;
constexpr std::size_t kConvergedWindow = 50;  // trailing steps averaged as "converged"
constexpr double kRegularizerLambdaDiv = 1e-3;
constexpr double kControlMaxUsage = 0.5;
// criterion 7
constexpr double kRoundTripTolerance = 1e-9;
constexpr double kPermutationTolerance = 1e-10;
// criterion 8
constexpr std::size_t kResumeSteps = 100;
// criterion 9
constexpr double kPsnrFixtureTolerance = 1e-6;
constexpr double kSsimOracleTolerance = 1e-8;
constexpr std::size_t kSsimPairs = 20;

constexpr std::uint64_t kSeeds[] = {0, 1, 2};

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(3) << v;
  return s.str();
}

std::string fixed(double v, int digits = 3) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

// ---------------------------------------------------------------------------
// 1. gradient checks

void gradients(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradcheck_suite(TrainConfig::preset("tiny"));
  const double secs = seconds_since(t0);
  for (const auto& r : results) {
    o.detail << " " << r.name << "=" << sci(r.max_rel_err);
    o.require(r.pass, r.name + " above " + sci(kGradcheckTolerance));
  }
  o.require(results.size() == 4, "expected 4 registered paths");
  o.detail << " total " << fixed(secs, 1) << " s";
  o.require(secs < kGradcheckBudgetSeconds, "over the time budget");
}

// ---------------------------------------------------------------------------
// 2. sparse dispatch against a dense oracle

/// Every expert on every token, weighted by the sparse gates.
std::vector<double> dense_oracle(const MoELayer& layer, const Tensor& x, const GateBatch& g) {
  const std::size_t P = x.dim(0), d = x.dim(1), E = layer.num_experts();
  const Tensor base = layer.permanent()(x);
  std::vector<double> y(base.values().begin(), base.values().end());
  for (std::size_t e = 0; e < E; ++e) {
    const Tensor out = layer.expert(e)(x);
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t j = 0; j < d; ++j) y[p * d + j] += g.sparse.value(p * E + e) * out.value(p * d + j);
  }
  return y;
}

void dispatch(Outcome& o) {
  const ModelConfig m = TrainConfig::preset("tiny").model;
  Rng rng(21);
  MoELayer layer(m.dim, m.dim, m.experts, m.top_k, rng);
  std::vector<double> tokens(kDispatchTokens * m.dim);
  for (auto& t : tokens) t = rng.uniform(-2, 2);
  const Tensor x = Tensor::constant({kDispatchTokens, m.dim}, tokens);
  const auto out = layer.forward(x);
  const auto want = dense_oracle(layer, x, out.gates);
  double worst = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::abs(want[i] - out.output.value(i)));
  o.detail << " max |sparse - dense| " << sci(worst) << " over " << kDispatchTokens << " tokens";
  o.require(worst < kDispatchTolerance, "deviation at or above " + sci(kDispatchTolerance));
}

// ---------------------------------------------------------------------------
// 3. gate distributions

/// e is selected iff fewer than K experts beat it; f beats e when its logit is
/// larger, or equal with a lower index.
std::set<std::size_t> brute_force_top_k(std::span<const double> l, std::size_t k) {
  std::set<std::size_t> s;
  for (std::size_t e = 0; e < l.size(); ++e) {
    std::size_t beaten_by = 0;
    for (std::size_t f = 0; f < l.size(); ++f)
      if (l[f] > l[e] || (l[f] == l[e] && f < e)) ++beaten_by;
    if (beaten_by < k) s.insert(e);
  }
  return s;
}

void gates(Outcome& o) {
  const ModelConfig m = TrainConfig::preset("tiny").model;
  const std::size_t E = m.experts, K = m.top_k;
  Rng rng(31);
  Router router(m.dim, E, K, rng);
  std::vector<double> tokens(kGateTokens * m.dim);
  for (auto& t : tokens) t = rng.uniform(-2, 2);
  // half the tokens come from the router, half are logits on a coarse grid so
  // exact ties are frequent
  const std::size_t half = kGateTokens / 2;
  const auto routed = router.route(Tensor::constant({half, m.dim}, std::vector<double>(tokens.begin(), tokens.begin() + half * m.dim)));
  std::vector<double> grid(half * E);
  for (auto& v : grid) v = std::floor(rng.uniform(0, 3));
  const auto tied = gates_from_logits(Tensor::constant({half, E}, grid), K);

  std::size_t bad_count = 0, bad_selection = 0, ties = 0;
  double worst_sum = 0.0;
  for (const GateBatch* g : {&routed, &tied}) {
    for (std::size_t p = 0; p < g->tokens; ++p) {
      std::size_t nonzero = 0;
      double total = 0.0;
      for (std::size_t e = 0; e < E; ++e) {
        const double w = g->sparse.value(p * E + e);
        nonzero += w != 0.0;
        total += w;
      }
      bad_count += nonzero != K;
      worst_sum = std::max(worst_sum, std::abs(total - 1.0));
      const auto logits = g->logits.values().subspan(p * E, E);
      std::set<double> distinct(logits.begin(), logits.end());
      ties += distinct.size() < E;
      const auto sel = g->selection(p);
      bad_selection += std::set<std::size_t>(sel.begin(), sel.end()) != brute_force_top_k(logits, K);
    }
  }
  o.detail << " " << kGateTokens << " tokens (" << ties << " with tied logits): wrong nonzero count " << bad_count
           << ", worst |sum - 1| " << sci(worst_sum) << ", selections differing from brute force " << bad_selection;
  o.require(bad_count == 0, "a token without exactly K nonzero gates");
  o.require(worst_sum <= kGateSumTolerance, "gate sum off by more than " + sci(kGateSumTolerance));
  o.require(bad_selection == 0, "top-K disagrees with brute force");

  // L=4, E=4, K=2: closed form and explicit enumeration
  const auto combos = expert_combinations(4, 2);
  std::uint64_t enumerated = 0;
  for (std::size_t a = 0; a < combos.size(); ++a)
    for (std::size_t b = 0; b < combos.size(); ++b)
      for (std::size_t c = 0; c < combos.size(); ++c)
        for (std::size_t d = 0; d < combos.size(); ++d) ++enumerated;
  o.detail << "; paths L=4 E=4 K=2: formula " << routing_path_count(4, 2, 4) << ", enumerated " << enumerated;
  o.require(routing_path_count(4, 2, 4) == kToyPathCount && enumerated == kToyPathCount, "path count is not 1296");
}

// ---------------------------------------------------------------------------
// 4. diversity and symmetric KL fixtures

void loss_fixtures(Outcome& o) {
  auto cv = [](std::vector<double> g) { return usage_dispersion(Tensor::constant({g.size()}, g)).item(); };
  const double balanced = cv({0.25, 0.25, 0.25, 0.25}), half = cv({0.5, 0.5, 0.0, 0.0}),
               one = cv({1.0, 0.0, 0.0, 0.0});
  const std::vector<double> p{0.5, 0.5}, q{0.9, 0.1};
  const double kl = symmetric_kl(p, q);
  o.detail << " cv2 " << balanced << " / " << fixed(half, 12) << " / " << fixed(one, 12) << ", symmetric KL "
           << fixed(kl, 6);
  o.require(std::abs(balanced) <= kDiversityTolerance, "balanced usage is not 0");
  o.require(std::abs(half - 1.0) <= kDiversityTolerance, "two-expert usage is not 1");
  o.require(std::abs(one - 3.0) <= kDiversityTolerance, "one-expert usage is not 3");
  o.require(std::abs(kl - kSymKlFixture) <= kSymKlTolerance, "symmetric KL fixture");
}

// ---------------------------------------------------------------------------
// 5. overfit smoke test

double mean_of(const std::vector<double>& v, std::size_t lo, std::size_t hi) {
  double s = 0.0;
  for (std::size_t i = lo; i < hi; ++i) s += v[i];
  return s / static_cast<double>(hi - lo);
}

void overfit(Outcome& o) {
  TrainConfig cfg = TrainConfig::preset("tiny");
  cfg.num_scenes = 1;
  cfg.min_primitives = cfg.max_primitives = 2;
  cfg.steps = kOverfitSteps;
  const auto d = generate_dataset(0, 7, cfg.dataset_options());
  const auto sources = d.views_tagged(ViewTag::Source);
  const auto targets = d.views_tagged(ViewTag::Target);
  for (const auto seed : kSeeds) {
    cfg.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    Trainer t(cfg, {training_scene(d)});
    std::vector<double> photometric, total;
    while (t.steps_done() < cfg.steps) {
      const auto r = t.step();
      photometric.push_back(r.photometric);
      total.push_back(r.total);
    }
    const double secs = seconds_since(t0);
    const auto early = kOverfitEarlySteps - kLossWindow;
    const double photo_ratio = mean_of(photometric, early, kOverfitEarlySteps) / mean_of(photometric, 0, kLossWindow);
    const double total_ratio = mean_of(total, early, kOverfitEarlySteps) / mean_of(total, 0, kLossWindow);
    const auto rep = evaluate(t.model(), d, sources, targets, cfg.samples);
    double worst_margin = std::numeric_limits<double>::infinity();
    for (const auto& v : rep.views)
      worst_margin = std::min(worst_margin, v.psnr - mean_color_baseline_psnr(d, sources, v.view));
    o.detail << " seed " << seed << ": held-out PSNR " << fixed(rep.mean_psnr(), 2) << " dB, margin over mean color "
             << fixed(worst_margin, 2) << " dB, loss ratio at step " << kOverfitEarlySteps << " photometric "
             << fixed(photo_ratio) << " total " << fixed(total_ratio) << ", " << fixed(secs, 0) << " s;";
    const std::string tag = "seed " + std::to_string(seed);
    o.require(worst_margin >= kOverfitMarginDb, tag + " below baseline + 5 dB");
    o.require(photo_ratio <= 1.0 - kOverfitLossDrop, tag + " photometric loss fell less than 50%");
    o.require(total_ratio <= 1.0 - kOverfitLossDrop, tag + " total loss fell less than 50%");
    o.require(secs < kOverfitBudgetSeconds, tag + " over 10 minutes");
  }
}

// ---------------------------------------------------------------------------
// 6. regularizer effects

struct Converged {
  double max_usage = 0.0;                 // largest per-layer max, mean over the window
  std::vector<double> layer_max;          // per layer
  double paired_kl = 0.0;
};

Converged train_curriculum(double lambda_div, double lambda_sc, std::uint64_t seed) {
  TrainConfig cfg = TrainConfig::preset("tiny");
  cfg.lambda_div = lambda_div;
  cfg.lambda_sc = lambda_sc;
  cfg.seed = seed;
  cfg.steps = kRegularizerSteps;
  std::vector<SceneDataset> data;
  for (std::size_t i = 0; i < cfg.num_scenes; ++i)
    data.push_back(generate_dataset(static_cast<int>(i), 100 + i, cfg.dataset_options()));
  std::vector<TrainingScene> scenes;
  for (const auto& d : data) scenes.push_back(training_scene(d));
  Trainer t(cfg, scenes);
  const std::size_t L = cfg.model.layers, E = cfg.model.experts;
  std::vector<std::vector<double>> usage(L, std::vector<double>(E, 0.0));
  Converged c;
  while (t.steps_done() < cfg.steps) {
    const auto r = t.step();
    if (r.step + kConvergedWindow < cfg.steps) continue;
    c.paired_kl += r.paired_kl / kConvergedWindow;
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t e = 0; e < E; ++e) usage[l][e] += r.usage[l][e] / kConvergedWindow;
  }
  for (const auto& layer : usage) c.layer_max.push_back(*std::max_element(layer.begin(), layer.end()));
  c.max_usage = *std::max_element(c.layer_max.begin(), c.layer_max.end());
  return c;
}

void regularizers(Outcome& o) {
  const double lambda_sc = TrainConfig::preset("tiny").lambda_sc;
  for (const auto seed : kSeeds) {
    // each regularizer is compared against a control that differs only in it
    const Converged control = train_curriculum(0.0, 0.0, seed);
    const Converged div = train_curriculum(kRegularizerLambdaDiv, 0.0, seed);
    const Converged sc = train_curriculum(0.0, lambda_sc, seed);
    o.detail << " seed " << seed << ": max usage control " << fixed(control.max_usage) << " vs lambda_div "
             << fixed(div.max_usage) << ", paired KL control " << sci(control.paired_kl) << " vs lambda_sc "
             << sci(sc.paired_kl) << ";";
    const std::string tag = "seed " + std::to_string(seed);
    o.require(control.max_usage >= kControlMaxUsage, tag + " control never reached 0.5 usage on any layer");
    o.require(div.max_usage <= control.max_usage, tag + " diversity term did not lower max usage");
    o.require(sc.paired_kl <= control.paired_kl, tag + " consistency term did not lower paired KL");
  }
}

// ---------------------------------------------------------------------------
// 7. geometry and rendering invariants

Mat3 random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
  return q.normalized().toRotationMatrix();
}

void rendering(Outcome& o) {
  Rng rng(71);
  double round_trip = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    Camera cam;
    cam.fx = rng.uniform(20, 200);
    cam.fy = rng.uniform(20, 200);
    cam.width = 64;
    cam.height = 48;
    cam.cx = rng.uniform(0, 64);
    cam.cy = rng.uniform(0, 48);
    cam.rotation = random_rotation(rng);
    cam.center = Vec3(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
    const double u = rng.uniform(0, 64), v = rng.uniform(0, 48), depth = rng.uniform(0.1, 10);
    const auto p = project(cam, unproject(cam, u, v, depth));
    round_trip = std::max({round_trip, std::abs(p.u - u), std::abs(p.v - v), std::abs(p.depth - depth)});
  }

  const TrainConfig cfg = TrainConfig::preset("tiny");
  Rng init(72);
  const Model model(cfg.model, init);
  const auto d = generate_dataset(0, 73, cfg.dataset_options());
  const auto sources = d.views_tagged(ViewTag::Source);
  const auto target = d.views_tagged(ViewTag::Target).at(0);
  auto encode = [&](const std::vector<std::size_t>& order) {
    std::vector<Camera> cams;
    std::vector<const Image*> ims;
    for (auto v : order) {
      cams.push_back(d.cameras[v]);
      ims.push_back(&d.images[v]);
    }
    return model.encode(cams, ims);
  };
  const RenderOptions opt{.samples = cfg.samples, .near = d.near, .far = d.far};
  const auto base = render_image(model, d.cameras[target], encode(sources), opt);

  double permutation = 0.0;
  std::vector<std::size_t> order = sources;
  for (int trial = 0; trial < 3; ++trial) {
    std::reverse(order.begin(), order.end());
    std::rotate(order.begin(), order.begin() + 1, order.end());
    const auto r = render_image(model, d.cameras[target], encode(order), opt);
    for (std::size_t i = 0; i < r.rgb.data.size(); ++i)
      permutation = std::max(permutation, std::abs(r.rgb.data[i] - base.rgb.data[i]));
    for (std::size_t i = 0; i < r.depth.size(); ++i)
      permutation = std::max(permutation, std::abs(r.depth[i] - base.depth[i]));
  }
  std::size_t inside = 0;
  for (double z : base.depth) inside += z >= d.near && z <= d.far;

  o.detail << " project(unproject) " << sci(round_trip) << ", source permutation " << sci(permutation)
           << ", depth in [" << d.near << ", " << d.far << "] for " << inside << "/" << base.depth.size() << " rays";
  o.require(round_trip < kRoundTripTolerance, "projection round trip");
  o.require(permutation < kPermutationTolerance, "source order changes the render");
  o.require(inside == base.depth.size(), "depth outside the ray bounds");
}

// ---------------------------------------------------------------------------
// 8. persistence and resume

std::map<std::string, std::string> directory_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = read_file(e.path());
  return out;
}

void persistence(Outcome& o) {
  set_num_threads(1);
  TrainConfig cfg = TrainConfig::preset("tiny");
  const fs::path root = fs::temp_directory_path() / "viewmoe_acceptance";
  fs::remove_all(root);

  const auto d = generate_dataset(4, 81, cfg.dataset_options());
  save_dataset(root / "a", d);
  const auto loaded = load_dataset(root / "a");
  save_dataset(root / "b", loaded);
  const bool dataset_same = directory_bytes(root / "a") == directory_bytes(root / "b") && loaded.images == d.images &&
                            loaded.tags == d.tags && loaded.near == d.near && loaded.far == d.far;

  std::vector<SceneDataset> data;
  for (std::size_t i = 0; i < cfg.num_scenes; ++i)
    data.push_back(generate_dataset(static_cast<int>(i), 90 + i, cfg.dataset_options()));
  std::vector<TrainingScene> scenes;
  for (const auto& s : data) scenes.push_back(training_scene(s));
  Trainer straight(cfg, scenes);
  std::vector<TrainStepReport> want;
  while (straight.steps_done() < kResumeSteps) want.push_back(straight.step());

  Trainer first(cfg, scenes);
  std::vector<TrainStepReport> got;
  while (first.steps_done() < kResumeSteps / 2) got.push_back(first.step());
  save_checkpoint(root / "half.move", first.checkpoint());
  const auto ck = load_checkpoint(root / "half.move");
  const bool checkpoint_same = encode_checkpoint(ck) == read_file(root / "half.move") && ck == first.checkpoint();
  Trainer resumed(cfg, scenes, ck);
  while (resumed.steps_done() < kResumeSteps) got.push_back(resumed.step());

  std::size_t differing = 0;
  for (std::size_t i = 0; i < want.size(); ++i) differing += !(want[i] == got[i]);
  const bool final_same = encode_checkpoint(resumed.checkpoint()) == encode_checkpoint(straight.checkpoint());
  fs::remove_all(root);

  o.detail << " dataset re-save " << (dataset_same ? "identical" : "differs") << ", checkpoint re-encode "
           << (checkpoint_same ? "identical" : "differs") << ", resumed trajectory: " << differing << "/"
           << want.size() << " steps differ, final state " << (final_same ? "identical" : "differs");
  o.require(dataset_same, "dataset round trip");
  o.require(checkpoint_same, "checkpoint round trip");
  o.require(differing == 0 && final_same, "resume diverges from the uninterrupted run");
}

// ---------------------------------------------------------------------------
// 9. image metrics

/// Direct windowed SSIM with explicit 2-D Gaussian weights.
double ssim_oracle(const Image& a, const Image& b) {
  const int n = 11;
  const double sigma = 1.5;
  double w[11][11], wsum = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) wsum += w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * sigma * sigma));
  auto gray = [](const Image& im, int r, int c) { return (im.at(r, c, 0) + im.at(r, c, 1) + im.at(r, c, 2)) / 3.0; };
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0.0;
  int windows = 0;
  for (int r0 = 0; r0 + n <= a.height; ++r0)
    for (int c0 = 0; c0 + n <= a.width; ++c0) {
      double mx = 0, my = 0, vx = 0, vy = 0, cxy = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          mx += w[i][j] / wsum * gray(a, r0 + i, c0 + j);
          my += w[i][j] / wsum * gray(b, r0 + i, c0 + j);
        }
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const double dx = gray(a, r0 + i, c0 + j) - mx, dy = gray(b, r0 + i, c0 + j) - my;
          vx += w[i][j] / wsum * dx * dx;
          vy += w[i][j] / wsum * dy * dy;
          cxy += w[i][j] / wsum * dx * dy;
        }
      total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++windows;
    }
  return total / windows;
}

void image_metrics(Outcome& o) {
  Image a(16, 16), b(16, 16), c(16, 16);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    a.data[i] = 0.2;
    b.data[i] = 0.3;  // MSE 0.01
    c.data[i] = 0.7;  // MSE 0.25
  }
  const double p20 = psnr(a, b), p6 = psnr(a, c);
  Rng rng(91);
  double worst = 0.0;
  for (std::size_t i = 0; i < kSsimPairs; ++i) {
    Image x(24, 20), y(24, 20);
    const double mix = rng.uniform();
    for (std::size_t k = 0; k < x.data.size(); ++k) {
      x.data[k] = rng.uniform();
      y.data[k] = std::clamp(mix * x.data[k] + (1 - mix) * rng.uniform(), 0.0, 1.0);
    }
    worst = std::max(worst, std::abs(ssim(x, y) - ssim_oracle(x, y)));
  }
  o.detail << " PSNR fixtures " << fixed(p20, 9) << " / " << fixed(p6, 9) << " dB, SSIM vs windowed oracle "
           << sci(worst) << " over " << kSsimPairs << " pairs";
  o.require(std::abs(p20 - 20.0) <= kPsnrFixtureTolerance, "20 dB fixture");
  o.require(std::abs(p6 - 10.0 * std::log10(4.0)) <= kPsnrFixtureTolerance, "6.0206 dB fixture");
  o.require(worst <= kSsimOracleTolerance, "SSIM oracle");
}

}  // namespace

int main(int argc, char** argv) {
  retain_heap_memory();
  set_num_threads(1);
  logger().set_level(spdlog::level::warn);
  const std::vector<std::pair<int, std::function<void(Outcome&)>>> criteria = {
      {1, gradients}, {2, dispatch},     {3, gates},       {4, loss_fixtures}, {5, overfit},
      {6, regularizers}, {7, rendering}, {8, persistence}, {9, image_metrics},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failures = 0;
  for (const auto& [id, run] : criteria) {
    if (!wanted.empty() && !wanted.count(id)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      run(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " [exception: " << e.what() << "]";
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << fixed(seconds_since(t0), 1) << " s):"
              << o.detail.str() << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
