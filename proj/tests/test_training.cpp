// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "viewmoe/training.hpp"

using namespace viewmoe;

namespace {

TrainConfig mini() {
  TrainConfig c = TrainConfig::preset("tiny");
  c.model.dim = 8;
  c.model.heads = 2;
  c.model.ray_blocks = 1;
  c.model.pos_freqs = 2;
  c.model.dir_freqs = 1;
  c.model.depth_freqs = 2;
  c.rays_per_step = 8;
  c.views_per_step = 2;
  c.samples = 6;
  c.image_size = 8;
  c.views_per_scene = 5;
  c.target_views = 1;
  c.eps = 4.0;
  return c;
}

std::vector<SceneDataset> mini_scenes(const TrainConfig& c, std::size_t n) {
  std::vector<SceneDataset> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_dataset(i, 50 + i, c.dataset_options()));
  return out;
}

std::vector<TrainingScene> as_training(const std::vector<SceneDataset>& ds) {
  std::vector<TrainingScene> out;
  for (const auto& d : ds) out.push_back(training_scene(d));
  return out;
}

}  // namespace

TEST_CASE("config presets and key parsing", "[training][config]") {
  auto tiny = TrainConfig::preset("tiny");
  CHECK(tiny.model.layers == 2);
  CHECK(tiny.model.dim == 32);
  CHECK(tiny.model.experts == 4);
  CHECK(tiny.model.top_k == 2);
  CHECK(tiny.samples == 32);
  CHECK(tiny.image_size == 16);
  CHECK(tiny.lambda_sc == 1e-2);
  CHECK(tiny.lambda_div == 1e-3);
  auto paper = TrainConfig::preset("paper");
  CHECK(paper.lambda_sc == 1e4);
  CHECK(paper.lambda_div == 1e-3);
  CHECK(paper.lr_features == 1e-3);
  CHECK(paper.lr_transformer == 5e-4);
  CHECK(paper.samples == 192);
  CHECK_THROWS_AS(TrainConfig::preset("huge"), ConfigError);

  TrainConfig c = tiny;
  c.apply({{"dim", "16"}, {"lambda_div", "0.25"}, {"div_form", "paper"}, {"seed", "7"}});
  CHECK(c.model.dim == 16);
  CHECK(c.lambda_div == 0.25);
  CHECK(c.div_form == DiversityForm::PaperLiteral);
  CHECK(c.seed == 7);
  CHECK_THROWS_AS(c.apply({{"no_such_key", "1"}}), ConfigError);
  CHECK_THROWS_AS(c.apply({{"steps", "-5"}}), ConfigError);
  CHECK_THROWS_AS(c.apply({{"steps", "5x"}}), ConfigError);
  CHECK_THROWS_AS(c.apply({{"div_form", "other"}}), ConfigError);

  TrainConfig back = TrainConfig::preset("paper");
  back.apply(c.to_map());
  CHECK(back.to_map() == c.to_map());

  c.rays_per_step = 9;
  c.views_per_step = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny;
  c.lambda_sc = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("learning rate decays exponentially", "[training]") {
  TrainConfig c;
  c.lr_decay_rate = 0.5;
  c.lr_decay_steps = 100;
  CHECK(c.learning_rate(1e-3, 0) == 1e-3);
  CHECK(c.learning_rate(1e-3, 100) == Catch::Approx(5e-4).epsilon(1e-14));
  CHECK(c.learning_rate(1e-3, 250) == Catch::Approx(1e-3 * std::pow(0.5, 2.5)).epsilon(1e-14));
}

TEST_CASE("batches draw distinct views and pixels", "[training]") {
  auto c = mini();
  auto ds = mini_scenes(c, 1);
  auto s = training_scene(ds[0]);
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto b = build_batch(s, 0, 8, 2, rng);
    REQUIRE(b.rays.size() == 8);
    CHECK(b.views.size() == 2);
    CHECK(b.views[0] != b.views[1]);
    std::set<std::pair<int, std::pair<double, double>>> seen;
    for (std::size_t r = 0; r < 8; ++r) {
      const int view = b.rays.view[r];
      CHECK(view == static_cast<int>(b.views[r / 4]));
      seen.insert({view, {b.rays.u[r], b.rays.v[r]}});
      // the ray's own view is withheld from the encoder
      REQUIRE(b.exclude[r] >= 0);
      CHECK(s.source_views[static_cast<std::size_t>(b.exclude[r])] == static_cast<std::size_t>(view));
      const int row = static_cast<int>(b.rays.v[r] - 0.5), col = static_cast<int>(b.rays.u[r] - 0.5);
      for (int k = 0; k < 3; ++k)
        CHECK(b.target.value(r * 3 + static_cast<std::size_t>(k)) ==
              ds[0].images[static_cast<std::size_t>(view)].at(row, col, k));
    }
    CHECK(seen.size() == 8);
  }
  CHECK_THROWS_AS(build_batch(s, 0, 8, 5, rng), InsufficientViews);
  CHECK_THROWS_AS(build_batch(s, 0, 400, 2, rng), InsufficientViews);
}

TEST_CASE("loss terms combine with their weights", "[training]") {
  auto c = mini();
  auto ds = mini_scenes(c, 1);
  auto s = training_scene(ds[0]);
  Rng init(1);
  Model model(c.model, init);
  for (double ls : {0.0, 3.5}) {
    for (double ld : {0.0, 0.125}) {
      c.lambda_sc = ls;
      c.lambda_div = ld;
      Rng rng(4);
      auto b = build_batch(s, 0, c.rays_per_step, c.views_per_step, rng);
      auto t = compute_losses(model, s, b, c, rng);
      const double want = t.photometric.item() + ld * t.l_div.item() + ls * t.l_sc.item();
      CHECK(std::abs(t.total.item() - want) < 1e-10);
      if (ls == 0.0 && ld == 0.0) CHECK(t.total.item() == t.photometric.item());
      REQUIRE(t.usage.size() == 2);
      for (const auto& u : t.usage) {
        double sum = 0.0;
        for (double v : u) sum += v;
        CHECK(std::abs(sum - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("training is deterministic and independent of the thread count", "[training]") {
  auto c = mini();
  auto ds = mini_scenes(c, 2);
  Trainer a(c, as_training(ds)), b(c, as_training(ds));
  set_num_threads(3);
  std::vector<TrainStepReport> ra;
  for (int i = 0; i < 4; ++i) ra.push_back(a.step());
  set_num_threads(1);
  for (int i = 0; i < 4; ++i) CHECK(b.step() == ra[static_cast<std::size_t>(i)]);
  CHECK(model_state(a.model()) == model_state(b.model()));
}

TEST_CASE("scenes are visited once per epoch", "[training]") {
  auto c = mini();
  c.rays_per_step = 2;
  c.samples = 2;
  auto ds = mini_scenes(c, 3);
  Trainer t(c, as_training(ds));
  std::vector<std::size_t> count(3, 0);
  for (int epoch = 0; epoch < 40; ++epoch) {
    std::set<std::size_t> seen;
    for (int i = 0; i < 3; ++i) seen.insert(t.step().scene);
    CHECK(seen.size() == 3);
    for (auto v : seen) ++count[v];
  }
  CHECK(count == std::vector<std::size_t>(3, 40));
}

TEST_CASE("resuming from a checkpoint continues bit-identically", "[training][io]") {
  auto c = mini();
  auto ds = mini_scenes(c, 2);
  Trainer straight(c, as_training(ds));
  std::vector<TrainStepReport> want;
  for (int i = 0; i < 6; ++i) want.push_back(straight.step());

  Trainer first(c, as_training(ds));
  for (int i = 0; i < 3; ++i) CHECK(first.step() == want[static_cast<std::size_t>(i)]);
  const auto bytes = encode_checkpoint(first.checkpoint());
  Trainer resumed(c, as_training(ds), decode_checkpoint(bytes, "mem"));
  CHECK(resumed.steps_done() == 3);
  for (int i = 3; i < 6; ++i) CHECK(resumed.step() == want[static_cast<std::size_t>(i)]);
  CHECK(encode_checkpoint(resumed.checkpoint()) == encode_checkpoint(straight.checkpoint()));
}

TEST_CASE("mismatched checkpoints are rejected without partial loads", "[training][io]") {
  auto c = mini();
  auto ds = mini_scenes(c, 1);
  Trainer t(c, as_training(ds));
  auto ckpt = t.checkpoint();

  auto other = c;
  other.model.dim = 16;
  CHECK_THROWS_AS(Trainer(other, as_training(ds), ckpt), HyperparameterMismatch);

  Rng init(9);
  Model m(c.model, init);
  const auto before = model_state(m);
  const auto state = model_state(t.model());
  auto bad = state;
  bad.rbegin()->second = {{1}, {0.0}};  // last parameter in name order
  // a naive loader would already have written every parameter before it
  CHECK_THROWS_AS(load_model_state(m, bad), HyperparameterMismatch);
  CHECK(model_state(m) == before);
  bad = state;
  bad.erase(std::prev(bad.end()));
  CHECK_THROWS_AS(load_model_state(m, bad), HyperparameterMismatch);
  CHECK(model_state(m) == before);

  auto rebuilt = model_from_checkpoint(ckpt);
  CHECK(model_state(rebuilt) == model_state(t.model()));
}

TEST_CASE("non-finite losses are reported", "[training]") {
  auto c = mini();
  auto ds = mini_scenes(c, 1);
  Trainer t(c, as_training(ds));
  auto ckpt = t.checkpoint();
  for (auto& [name, rec] : ckpt.tensors)
    if (name.rfind("adam.", 0) != 0)
      for (auto& v : rec.values) v = 1e200;
  Trainer broken(c, as_training(ds), ckpt);
  CHECK_THROWS_AS(broken.step(), NonFiniteLoss);
}

TEST_CASE("adam matches a hand-computed update", "[training]") {
  Tensor w = Tensor::parameter({2}, {1.0, -2.0});
  Tensor f = Tensor::parameter({1}, {0.5});
  Adam opt({{"view.w", w}, {"encoder.f", f}});
  const double g1[2] = {0.5, -1.0}, g2[2] = {0.25, 2.0};
  double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {1.0, -2.0};
  double mf = 0, vf = 0, xf = 0.5;
  for (int t = 1; t <= 2; ++t) {
    const double* g = t == 1 ? g1 : g2;
    auto gw = w.grad_buffer();
    gw[0] = g[0];
    gw[1] = g[1];
    f.grad_buffer()[0] = 3.0;
    opt.step(0.1, 0.01);
    const double c1 = 1 - std::pow(0.9, t), c2 = 1 - std::pow(0.999, t);
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      x[i] -= 0.01 * (m[i] / c1) / (std::sqrt(v[i] / c2) + 1e-8);
      CHECK(w.value(static_cast<std::size_t>(i)) == Catch::Approx(x[i]).epsilon(1e-15));
    }
    mf = 0.9 * mf + 0.1 * 3.0;
    vf = 0.999 * vf + 0.001 * 9.0;
    xf -= 0.1 * (mf / c1) / (std::sqrt(vf / c2) + 1e-8);
    CHECK(f.value(0) == Catch::Approx(xf).epsilon(1e-15));
    CHECK_FALSE(w.has_grad());
  }
  CHECK(opt.steps() == 2);
}

TEST_CASE("few-shot finetuning", "[training]") {
  auto c = mini();
  c.finetune_views = 2;
  c.views_per_scene = 6;
  auto ds = mini_scenes(c, 1);
  Rng init(2);
  Model base(c.model, init);
  const auto before = model_state(base);

  auto same = finetune_few_shot(base, ds[0], 2, 0, c);
  CHECK(model_state(same) == before);

  auto tuned = finetune_few_shot(base, ds[0], 2, 3, c);
  CHECK(model_state(base) == before);
  CHECK_FALSE(model_state(tuned) == before);

  CHECK_THROWS_AS(finetune_few_shot(base, ds[0], 3, 1, c), InsufficientViews);
  CHECK_THROWS_AS(finetune_few_shot(base, ds[0], 0, 1, c), InsufficientViews);
  CHECK(evaluation_sources(ds[0], 2).size() == 5);
}
