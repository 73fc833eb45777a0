// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Registered gradient checks: every differentiable path the trainer relies on,
// compared against central differences at a model size taken from a config.
#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "viewmoe/gradcheck.hpp"
#include "viewmoe/training.hpp"

namespace viewmoe {

struct GradcheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double seconds = 0.0;
  bool pass = false;
};

inline constexpr double kGradcheckTolerance = 1e-4;
inline constexpr double kGradcheckStep = 1e-5;

namespace detail {

inline std::vector<Tensor> tensors_of(const ParamList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

/// Tokens spread over `rays` rays of `per_ray` samples, with pairs between
/// consecutive rays.
struct MoeFixture {
  std::vector<MoELayer> layers;
  Tensor x;
  std::vector<std::size_t> ray_of_token;
  PointPairSet pairs;
  ParamList params;

  MoeFixture(const ModelConfig& m, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t rays = 4, per_ray = 5, P = rays * per_ray;
    for (std::size_t l = 0; l < m.layers; ++l) layers.emplace_back(m.dim, m.dim, m.experts, m.top_k, rng);
    std::vector<double> v(P * m.dim);
    for (auto& t : v) t = rng.uniform(-1.5, 1.5);
    x = Tensor::parameter({P, m.dim}, std::move(v));
    for (std::size_t p = 0; p < P; ++p) ray_of_token.push_back(p / per_ray);
    for (std::size_t r = 0; r + 1 < rays; ++r)
      for (std::size_t s = 0; s < per_ray; s += 2)
        pairs.pairs.push_back({r * per_ray + s, (r + 1) * per_ray + s, 0.1 + 0.05 * static_cast<double>(r + s)});
    pairs.rho = pair_confidence(pairs.pairs);
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect("moe" + std::to_string(l), params);
    params.push_back({"tokens", x});
  }

  /// Layers applied in sequence; gates of each layer are collected.
  std::vector<MoEOutput> run() const {
    std::vector<MoEOutput> out;
    Tensor h = x;
    for (const auto& layer : layers) {
      out.push_back(layer.forward(h));
      h = out.back().output;
    }
    return out;
  }
};

inline GradcheckResult timed(const std::string& name, const std::function<double()>& check) {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckResult r;
  r.name = name;
  r.max_rel_err = check();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.pass = r.max_rel_err < kGradcheckTolerance;
  return r;
}

}  // namespace detail

/// Runs every registered check at the model size of `cfg`. Each tensor is
/// probed at up to `coords` random coordinates.
inline std::vector<GradcheckResult> run_gradcheck_suite(const TrainConfig& cfg, std::size_t coords = 12,
                                                        std::uint64_t seed = 0) {
  cfg.validate();
  std::vector<GradcheckResult> out;
  const detail::MoeFixture moe(cfg.model, seed + 1);
  const auto moe_tensors = detail::tensors_of(moe.params);

  out.push_back(detail::timed("diversity_loss", [&] {
    auto f = [&] {
      auto runs = moe.run();
      Tensor total = Tensor::scalar(0.0);
      for (const auto& r : runs) total = add(total, diversity_loss(r.gates, moe.ray_of_token, cfg.div_form));
      return scale(total, 1.0 / static_cast<double>(runs.size()));
    };
    return gradcheck_params(f, moe_tensors, kGradcheckStep, coords, seed);
  }));

  out.push_back(detail::timed("spatial_consistency_loss", [&] {
    auto f = [&] {
      std::vector<Tensor> dense;
      for (const auto& r : moe.run()) dense.push_back(r.gates.dense);
      return spatial_consistency_loss(moe.pairs, dense);
    };
    return gradcheck_params(f, moe_tensors, kGradcheckStep, coords, seed);
  }));

  out.push_back(detail::timed("moe_forward", [&] {
    // fixed random projection of the output, so every output coordinate matters
    Rng rng(seed + 2);
    std::vector<double> w(cfg.model.dim);
    for (auto& v : w) v = rng.uniform(-1, 1);
    const Tensor proj = Tensor::constant({cfg.model.dim, 1}, w);
    auto f = [&] { return sum(matmul(square(moe.run().back().output), proj)); };
    return gradcheck_params(f, moe_tensors, kGradcheckStep, coords, seed);
  }));

  out.push_back(detail::timed("render_mse", [&] {
    Rng init(seed + 3);
    Model model(cfg.model, init);
    DatasetOptions opt = cfg.dataset_options();
    opt.views = 3;
    opt.targets = 0;
    opt.finetune = 0;
    const auto d = generate_dataset(0, seed + 4, opt);
    std::vector<Camera> cams{d.cameras[0], d.cameras[1]};
    std::vector<const Image*> ims{&d.images[0], &d.images[1]};
    const Camera& target = d.cameras[2];
    const std::vector<std::pair<int, int>> px = {{target.height / 2, target.width / 2},
                                                 {target.height / 3, target.width / 2 + 1}};
    const auto rays = rays_for_pixels(target, 2, px, d.near, d.far);
    std::vector<double> want;
    for (auto [r, c] : px)
      for (int k = 0; k < 3; ++k) want.push_back(d.images[2].at(r, c, k));
    const Tensor target_rgb = Tensor::constant({px.size(), 3}, want);
    auto f = [&] {
      auto bank = model.encode(cams, ims);
      return mse(model.render_rays(rays, bank, std::vector<int>(px.size(), -1), cfg.samples).rgb, target_rgb);
    };
    return gradcheck_params(f, detail::tensors_of(model.parameters()), kGradcheckStep, coords, seed);
  }));
  return out;
}

}  // namespace viewmoe
