// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training configuration, cross-view batch construction, Adam and the
// per-step loss composition, plus checkpointing and few-shot finetuning.
#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "viewmoe/io.hpp"
#include "viewmoe/log.hpp"
#include "viewmoe/renderer.hpp"

namespace viewmoe {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  ModelConfig model;
  double lambda_sc = 1e4;
  double lambda_div = 1e-3;
  DiversityForm div_form = DiversityForm::Cv2;
  double lr_features = 1e-3;
  double lr_transformer = 5e-4;
  double lr_decay_rate = 0.5;
  double lr_decay_steps = 50000;
  std::size_t rays_per_step = 4096;
  std::size_t views_per_step = 4;
  std::size_t samples = 192;
  double eps = 20.0;  // close-ray threshold in pixels
  std::uint64_t seed = 0;
  std::size_t steps = 250000;
  std::size_t finetune_steps = 2400;
  std::size_t shots = 3;
  // toy data generation
  int image_size = 64;
  std::size_t num_scenes = 3;
  std::size_t views_per_scene = 8;
  std::size_t target_views = 2;
  std::size_t finetune_views = 0;
  int min_primitives = 1;
  int max_primitives = 4;

  void validate() const {
    model.validate();
    if (!(lambda_sc >= 0.0 && lambda_div >= 0.0)) throw ConfigError("loss weights must be >= 0");
    if (!(lr_features > 0.0 && lr_transformer > 0.0)) throw ConfigError("learning rates must be > 0");
    if (!(lr_decay_rate > 0.0 && lr_decay_steps > 0.0)) throw ConfigError("decay rate and steps must be > 0");
    if (views_per_step == 0 || rays_per_step == 0 || rays_per_step % views_per_step)
      throw ConfigError("rays_per_step must be a positive multiple of views_per_step");
    if (samples == 0) throw ConfigError("samples must be positive");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (image_size < 2) throw ConfigError("image_size must be at least 2");
  }

  /// lr(step) = lr0 * rate^(step / decay_steps)
  double learning_rate(double lr0, std::size_t step) const {
    return lr0 * std::pow(lr_decay_rate, static_cast<double>(step) / lr_decay_steps);
  }

  DatasetOptions dataset_options() const {
    return {.views = views_per_scene,
            .targets = target_views,
            .finetune = finetune_views,
            .image_size = image_size,
            .distance = 3.0,
            .scene = {.min_primitives = min_primitives, .max_primitives = max_primitives}};
  }

  static TrainConfig preset(const std::string& name);

  /// Applies `key = value` settings. Unknown keys and malformed values are ConfigErrors.
  void apply(const std::map<std::string, std::string>& kv);
  std::map<std::string, std::string> to_map() const;
};

namespace detail {

struct Field {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <class T>
T parse_value(const std::string& s) {
  if (std::is_unsigned_v<T> && s.find('-') != std::string::npos) throw ConfigError("'" + s + "' must not be negative");
  std::istringstream in(s);
  T v{};
  in >> v;
  if (!in || !(in >> std::ws).eof()) throw ConfigError("malformed value '" + s + "'");
  return v;
}

template <class T>
Field field(T TrainConfig::*m) {
  return {[m](TrainConfig& c, const std::string& s) { c.*m = parse_value<T>(s); },
          [m](const TrainConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return format_double(c.*m);
            else
              return std::to_string(c.*m);
          }};
}

template <class T>
Field model_field(T ModelConfig::*m) {
  return {[m](TrainConfig& c, const std::string& s) { c.model.*m = parse_value<T>(s); },
          [m](const TrainConfig& c) { return std::to_string(c.model.*m); }};
}

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> f = {
      {"dim", model_field(&ModelConfig::dim)},
      {"layers", model_field(&ModelConfig::layers)},
      {"experts", model_field(&ModelConfig::experts)},
      {"top_k", model_field(&ModelConfig::top_k)},
      {"heads", model_field(&ModelConfig::heads)},
      {"ray_blocks", model_field(&ModelConfig::ray_blocks)},
      {"passthrough", model_field(&ModelConfig::passthrough)},
      {"pos_freqs", model_field(&ModelConfig::pos_freqs)},
      {"dir_freqs", model_field(&ModelConfig::dir_freqs)},
      {"depth_freqs", model_field(&ModelConfig::depth_freqs)},
      {"lambda_sc", field(&TrainConfig::lambda_sc)},
      {"lambda_div", field(&TrainConfig::lambda_div)},
      {"div_form",
       {[](TrainConfig& c, const std::string& s) {
          if (s == "cv2")
            c.div_form = DiversityForm::Cv2;
          else if (s == "paper")
            c.div_form = DiversityForm::PaperLiteral;
          else
            throw ConfigError("div_form must be cv2 or paper, got '" + s + "'");
        },
        [](const TrainConfig& c) { return std::string(c.div_form == DiversityForm::Cv2 ? "cv2" : "paper"); }}},
      {"lr_features", field(&TrainConfig::lr_features)},
      {"lr_transformer", field(&TrainConfig::lr_transformer)},
      {"lr_decay_rate", field(&TrainConfig::lr_decay_rate)},
      {"lr_decay_steps", field(&TrainConfig::lr_decay_steps)},
      {"rays_per_step", field(&TrainConfig::rays_per_step)},
      {"views_per_step", field(&TrainConfig::views_per_step)},
      {"samples", field(&TrainConfig::samples)},
      {"eps", field(&TrainConfig::eps)},
      {"seed", field(&TrainConfig::seed)},
      {"steps", field(&TrainConfig::steps)},
      {"finetune_steps", field(&TrainConfig::finetune_steps)},
      {"shots", field(&TrainConfig::shots)},
      {"image_size", field(&TrainConfig::image_size)},
      {"num_scenes", field(&TrainConfig::num_scenes)},
      {"views_per_scene", field(&TrainConfig::views_per_scene)},
      {"target_views", field(&TrainConfig::target_views)},
      {"finetune_views", field(&TrainConfig::finetune_views)},
      {"min_primitives", field(&TrainConfig::min_primitives)},
      {"max_primitives", field(&TrainConfig::max_primitives)},
  };
  return f;
}

}  // namespace detail

inline void TrainConfig::apply(const std::map<std::string, std::string>& kv) {
  const auto& f = detail::fields();
  for (const auto& [k, v] : kv) {
    auto it = f.find(k);
    if (it == f.end()) throw ConfigError("unknown config key '" + k + "'");
    try {
      it->second.set(*this, v);
    } catch (const ConfigError& e) {
      throw ConfigError("config key '" + k + "': " + e.what());
    }
  }
}

inline std::map<std::string, std::string> TrainConfig::to_map() const {
  std::map<std::string, std::string> out;
  for (const auto& [k, f] : detail::fields()) out[k] = f.get(*this);
  return out;
}

inline TrainConfig TrainConfig::preset(const std::string& name) {
  TrainConfig c;
  if (name == "paper") {
    c.model.dim = 64;
    c.model.layers = 4;
    return c;
  }
  // At the desk presets lambda_sc = 1e4 outweighs the photometric loss by
  // orders of magnitude and collapses routing and colors; 1e-2 keeps it a
  // secondary term.
  if (name == "small") {
    c.lambda_sc = 1e-2;
    c.model.dim = 64;
    c.model.layers = 4;
    c.rays_per_step = 512;
    c.views_per_step = 4;
    c.samples = 32;
    c.image_size = 32;
    c.eps = 8.0;
    c.steps = 20000;
    c.finetune_steps = 500;
    c.lr_decay_steps = 20000;
    return c;
  }
  if (name == "tiny") {
    c.lambda_sc = 1e-2;
    c.model.dim = 32;
    c.model.layers = 2;
    c.model.pos_freqs = 3;
    c.rays_per_step = 32;
    c.views_per_step = 2;
    c.samples = 32;
    c.image_size = 16;
    c.eps = 4.0;
    c.steps = 2000;
    c.finetune_steps = 200;
    c.lr_decay_steps = 2000;
    c.views_per_scene = 6;
    c.target_views = 1;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "' (tiny, small, paper)");
}

// ---------------------------------------------------------------------------
// Model state

/// Parameter values by name.
inline std::map<std::string, TensorRecord> model_state(const Model& m) {
  std::map<std::string, TensorRecord> out;
  for (const auto& p : m.parameters()) {
    auto v = p.tensor.values();
    out[p.name] = {p.tensor.shape(), {v.begin(), v.end()}};
  }
  return out;
}

/// Overwrites every parameter. All names and shapes are checked before the
/// first write, so a failed load leaves the model untouched.
inline void load_model_state(Model& m, const std::map<std::string, TensorRecord>& state) {
  const auto params = m.parameters();
  for (const auto& p : params) {
    auto it = state.find(p.name);
    if (it == state.end()) throw HyperparameterMismatch("missing parameter '" + p.name + "'");
    if (it->second.shape != p.tensor.shape())
      throw HyperparameterMismatch("parameter '" + p.name + "' has shape " + shape_str(it->second.shape) +
                                   ", model expects " + shape_str(p.tensor.shape()));
  }
  for (const auto& p : params) {
    const auto& src = state.at(p.name).values;
    Tensor t = p.tensor;
    std::copy(src.begin(), src.end(), t.mutable_values().begin());
  }
}

/// Independent copy of a model (parameters are not shared).
inline Model clone_model(const Model& m) {
  Rng scratch(0);
  Model out(m.config(), scratch);
  load_model_state(out, model_state(m));
  return out;
}

inline ModelConfig model_config_from(const std::map<std::string, std::string>& header) {
  TrainConfig c;
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : header)
    if (k.rfind("model.", 0) == 0) kv[k.substr(6)] = v;
  c.apply(kv);
  return c.model;
}

// ---------------------------------------------------------------------------
// Adam

/// Adam with beta = (0.9, 0.999), eps = 1e-8 and one learning-rate group for
/// the feature encoder and one for everything else.
class Adam {
 public:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  Adam() = default;
  explicit Adam(const ParamList& params) : params_(params) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  static bool is_feature_param(const std::string& name) { return name.rfind("encoder.", 0) == 0; }

  /// Applies one update with the given group learning rates, then clears gradients.
  void step(double lr_features, double lr_transformer) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor p = params_[i].tensor;
      if (!p.has_grad()) continue;
      const double lr = is_feature_param(params_[i].name) ? lr_features : lr_transformer;
      auto g = p.grad_buffer();
      auto w = p.mutable_values();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m_[i][j] = kBeta1 * m_[i][j] + (1 - kBeta1) * g[j];
        v_[i][j] = kBeta2 * v_[i][j] + (1 - kBeta2) * g[j] * g[j];
        w[j] -= lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + kEps);
      }
      p.zero_grad();
    }
  }

  std::uint64_t steps() const { return t_; }

  void save(std::map<std::string, TensorRecord>& out) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out["adam.m." + params_[i].name] = {params_[i].tensor.shape(), m_[i]};
      out["adam.v." + params_[i].name] = {params_[i].tensor.shape(), v_[i]};
    }
  }

  void load(const std::map<std::string, TensorRecord>& in, std::uint64_t t) {
    for (std::size_t i = 0; i < params_.size(); ++i)
      for (const char* which : {"adam.m.", "adam.v."}) {
        auto it = in.find(which + params_[i].name);
        if (it == in.end() || it->second.values.size() != m_[i].size())
          throw HyperparameterMismatch(std::string("optimizer state missing for '") + params_[i].name + "'");
      }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i] = in.at("adam.m." + params_[i].name).values;
      v_[i] = in.at("adam.v." + params_[i].name).values;
    }
    t_ = t;
  }

 private:
  ParamList params_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Batches

/// Which views of a scene emit training rays and which feed the encoder.
struct TrainingScene {
  const SceneDataset* data = nullptr;
  std::vector<std::size_t> ray_views;
  std::vector<std::size_t> source_views;
};

inline TrainingScene training_scene(const SceneDataset& d) {
  return {&d, d.views_tagged(ViewTag::Source), d.views_tagged(ViewTag::Source)};
}
// The result points into its dataset, which must outlive it.
TrainingScene training_scene(const SceneDataset&&) = delete;

struct Batch {
  std::size_t scene = 0;            // index into the training scenes
  std::vector<std::size_t> views;   // dataset views the rays come from
  RayBatch rays;                    // view field holds the dataset view index
  std::vector<int> exclude;         // per ray: position of its own view in the source list, or -1
  Tensor target;                    // [R, 3] linear radiance
};

/// Draws `views_per_step` distinct ray views of one scene and `rays / views`
/// distinct pixels from each.
inline Batch build_batch(const TrainingScene& s, std::size_t scene_index, std::size_t rays_per_step,
                         std::size_t views_per_step, Rng& rng) {
  const SceneDataset& d = *s.data;
  if (s.ray_views.size() < views_per_step || views_per_step == 0)
    throw InsufficientViews("scene " + std::to_string(d.id) + " has " + std::to_string(s.ray_views.size()) +
                            " training views, need " + std::to_string(views_per_step));
  if (s.source_views.size() < 2) throw InsufficientViews("need at least 2 source views");
  Batch b;
  b.scene = scene_index;
  std::vector<std::size_t> pool = s.ray_views;
  for (std::size_t i = 0; i < views_per_step; ++i) {
    std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
    b.views.push_back(pool[i]);
  }
  const std::size_t per_view = rays_per_step / views_per_step;
  std::vector<double> target;
  for (std::size_t v : b.views) {
    const Camera& cam = d.cameras[v];
    const std::size_t n_px = static_cast<std::size_t>(cam.width) * static_cast<std::size_t>(cam.height);
    if (per_view > n_px) throw InsufficientViews("more rays per view than pixels");
    std::vector<std::size_t> pixels(n_px);
    std::iota(pixels.begin(), pixels.end(), 0);
    std::vector<std::pair<int, int>> px;
    for (std::size_t i = 0; i < per_view; ++i) {
      std::swap(pixels[i], pixels[i + rng.index(n_px - i)]);
      px.emplace_back(static_cast<int>(pixels[i] / cam.width), static_cast<int>(pixels[i] % cam.width));
    }
    b.rays.append(rays_for_pixels(cam, static_cast<int>(v), px, d.near, d.far));
    int own = -1;
    for (std::size_t j = 0; j < s.source_views.size(); ++j)
      if (s.source_views[j] == v) own = static_cast<int>(j);
    for (auto [row, col] : px) {
      b.exclude.push_back(own);
      for (int c = 0; c < 3; ++c) target.push_back(d.images[v].at(row, col, c));
    }
  }
  b.target = Tensor::constant({b.rays.size(), 3}, std::move(target));
  return b;
}

// ---------------------------------------------------------------------------
// Training step

struct TrainStepReport {
  std::size_t step = 0;
  std::size_t scene = 0;
  double photometric = 0.0;
  double l_div = 0.0;
  double l_sc = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
  double paired_kl = 0.0;  // unweighted mean symmetric KL over point pairs, mean over layers
  std::size_t pairs = 0;
  std::vector<std::vector<double>> usage;  // per layer, mean sparse gate per expert

  bool operator==(const TrainStepReport&) const = default;
};

struct LossTerms {
  Tensor photometric, l_div, l_sc, total;
  double paired_kl = 0.0;
  std::size_t pairs = 0;
  std::vector<std::vector<double>> usage;
};

/// Forward pass and loss composition for one batch; records on the active tape.
inline LossTerms compute_losses(const Model& model, const TrainingScene& s, const Batch& b, const TrainConfig& cfg,
                                Rng& rng) {
  const SceneDataset& d = *s.data;
  std::vector<Camera> cams;
  std::vector<const Image*> ims;
  for (auto v : s.source_views) {
    cams.push_back(d.cameras[v]);
    ims.push_back(&d.images[v]);
  }
  auto bank = model.encode(cams, ims);
  auto r = model.render_rays(b.rays, bank, b.exclude, cfg.samples, true, &rng);

  LossTerms out;
  out.photometric = mse(r.rgb, b.target);
  const auto& views = r.views;
  const std::size_t L = views.gates.size();
  if (L == 0) {
    out.l_div = Tensor::scalar(0.0);
    out.l_sc = Tensor::scalar(0.0);
  } else {
    std::vector<std::size_t> ray_of_token;
    for (auto p : views.valid_rows) ray_of_token.push_back(p / cfg.samples);
    Tensor div = Tensor::scalar(0.0);
    for (const auto& g : views.gates) {
      div = add(div, diversity_loss(g, ray_of_token, cfg.div_form));
      const Tensor u = mean_usage(g.sparse, ray_of_token);
      out.usage.emplace_back(u.values().begin(), u.values().end());
    }
    out.l_div = scale(div, 1.0 / static_cast<double>(L));

    out.l_sc = Tensor::scalar(0.0);
    auto close = filter_close_rays(b.rays, cfg.eps);
    if (!close.empty()) {
      try {
        PointPairSet pts = pair_nearest_points(close, r.points, views.valid);
        // flat sample index -> gate row
        std::vector<std::size_t> row_of(r.points.size(), 0);
        for (std::size_t i = 0; i < views.valid_rows.size(); ++i) row_of[views.valid_rows[i]] = i;
        for (auto& p : pts.pairs) {
          p.a = row_of[p.a];
          p.b = row_of[p.b];
        }
        std::vector<Tensor> dense;
        for (const auto& g : views.gates) dense.push_back(g.dense);
        out.l_sc = spatial_consistency_loss(pts, dense);
        out.pairs = pts.pairs.size();
        double kl = 0.0;
        for (const auto& g : views.gates) {
          const auto dv = g.dense.values();
          for (const auto& p : pts.pairs)
            for (std::size_t e = 0; e < g.experts; ++e) {
              const double x = dv[p.a * g.experts + e], y = dv[p.b * g.experts + e];
              kl += 0.5 * (x - y) * (std::log(x) - std::log(y));
            }
        }
        out.paired_kl = kl / static_cast<double>(pts.pairs.size() * L);
      } catch (const EmptyPairSet&) {
        logger().debug("no valid point pairs in this batch");
      }
    }
  }
  out.total = out.photometric;
  if (cfg.lambda_div != 0.0) out.total = add(out.total, scale(out.l_div, cfg.lambda_div));
  if (cfg.lambda_sc != 0.0) out.total = add(out.total, scale(out.l_sc, cfg.lambda_sc));
  return out;
}

/// Owns a model, its optimizer and the sampling state for a set of scenes.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, std::vector<TrainingScene> scenes) : cfg_(cfg), scenes_(std::move(scenes)) {
    cfg_.validate();
    if (scenes_.empty()) throw InsufficientViews("no training scenes");
    Rng init(cfg_.seed);
    model_ = Model(cfg_.model, init);
    adam_ = Adam(model_.parameters());
    rng_ = Rng(cfg_.seed ^ 0x7EA1'5EEDULL);
  }

  /// Resumes from a checkpoint written by checkpoint(). The scene list must match.
  Trainer(const TrainConfig& cfg, std::vector<TrainingScene> scenes, const Checkpoint& ckpt)
      : Trainer(cfg, std::move(scenes)) {
    const ModelConfig saved = model_config_from(ckpt.header);
    if (!(saved == cfg_.model)) throw HyperparameterMismatch("checkpoint model hyperparameters differ from config");
    auto get = [&](const std::string& k) {
      auto it = ckpt.header.find(k);
      if (it == ckpt.header.end()) throw FormatError("checkpoint", 0, "missing header key '" + k + "'");
      return it->second;
    };
    if (std::stoull(get("train.scenes")) != scenes_.size())
      throw HyperparameterMismatch("checkpoint was trained on a different number of scenes");
    Model staged = clone_model(model_);
    load_model_state(staged, ckpt.tensors);
    Adam staged_adam(staged.parameters());
    staged_adam.load(ckpt.tensors, std::stoull(get("train.adam_steps")));
    model_ = std::move(staged);
    adam_ = std::move(staged_adam);
    step_ = std::stoull(get("train.step"));
    rng_.set_state(get("train.rng"));
    order_.clear();
    std::istringstream os(get("train.scene_order"));
    for (std::size_t v; os >> v;) order_.push_back(v);
    order_pos_ = std::stoull(get("train.scene_order_pos"));
  }

  const Model& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t steps_done() const { return step_; }

  TrainStepReport step() {
    const std::size_t si = next_scene();
    const TrainingScene& s = scenes_[si];
    const std::size_t views = std::min(cfg_.views_per_step, s.ray_views.size());
    Batch b = build_batch(s, si, cfg_.rays_per_step, views, rng_);

    TrainStepReport rep;
    rep.step = step_;
    rep.scene = si;
    Tape tape;
    {
      TapeScope scope(tape);
      LossTerms t;
      try {
        t = compute_losses(model_, s, b, cfg_, rng_);
      } catch (const NonFiniteValue& e) {
        throw NonFiniteLoss(diagnose(b, e.what()));
      }
      rep.photometric = t.photometric.item();
      rep.l_div = t.l_div.item();
      rep.l_sc = t.l_sc.item();
      rep.total = t.total.item();
      rep.paired_kl = t.paired_kl;
      rep.pairs = t.pairs;
      rep.usage = std::move(t.usage);
      if (!std::isfinite(rep.total)) throw NonFiniteLoss(diagnose(b, "total loss is not finite"));
      try {
        tape.backward(t.total);
      } catch (const NonFiniteValue& e) {
        throw NonFiniteLoss(diagnose(b, e.what()));
      }
    }
    double sq = 0.0;
    for (const auto& p : model_.parameters()) {
      Tensor t = p.tensor;
      if (t.has_grad())
        for (double g : t.grad_buffer()) sq += g * g;
    }
    rep.grad_norm = std::sqrt(sq);
    if (!std::isfinite(rep.grad_norm)) throw NonFiniteLoss(diagnose(b, "gradient norm is not finite"));
    adam_.step(cfg_.learning_rate(cfg_.lr_features, step_), cfg_.learning_rate(cfg_.lr_transformer, step_));
    ++step_;
    return rep;
  }

  Checkpoint checkpoint() const {
    Checkpoint c;
    for (const auto& [k, v] : cfg_.model.to_map()) c.header[k] = v;
    for (const auto& [k, v] : cfg_.to_map()) c.header["config." + k] = v;
    c.header["train.step"] = std::to_string(step_);
    c.header["train.adam_steps"] = std::to_string(adam_.steps());
    c.header["train.rng"] = rng_.state();
    c.header["train.scenes"] = std::to_string(scenes_.size());
    std::string order;
    for (auto v : order_) order += (order.empty() ? "" : " ") + std::to_string(v);
    c.header["train.scene_order"] = order;
    c.header["train.scene_order_pos"] = std::to_string(order_pos_);
    c.tensors = model_state(model_);
    adam_.save(c.tensors);
    return c;
  }

 private:
  /// Scenes are visited in a fresh random permutation per epoch.
  std::size_t next_scene() {
    if (order_pos_ >= order_.size()) {
      order_.resize(scenes_.size());
      std::iota(order_.begin(), order_.end(), 0);
      for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.index(i)]);
      order_pos_ = 0;
    }
    return order_[order_pos_++];
  }

  std::string diagnose(const Batch& b, const std::string& why) const {
    std::ostringstream os;
    os << "non-finite loss at step " << step_ << " (" << why << "); scene " << scenes_[b.scene].data->id;
    if (b.rays.size()) {
      os << ", first ray: view " << b.rays.view[0] << " pixel (" << b.rays.u[0] << ", " << b.rays.v[0]
         << ") origin " << b.rays.origins[0].transpose() << " direction " << b.rays.directions[0].transpose();
    }
    logger().error("{}", os.str());
    return os.str();
  }

  TrainConfig cfg_;
  std::vector<TrainingScene> scenes_;
  Model model_;
  Adam adam_;
  Rng rng_;
  std::size_t step_ = 0;
  std::vector<std::size_t> order_;
  std::size_t order_pos_ = 0;
};

/// Model state from a checkpoint, with the model built from its own header.
inline Model model_from_checkpoint(const Checkpoint& c) {
  Rng scratch(0);
  Model m(model_config_from(c.header), scratch);
  load_model_state(m, c.tensors);
  return m;
}

// ---------------------------------------------------------------------------
// Few-shot finetuning

/// The first `shots` finetune-tagged views of a scene.
inline std::vector<std::size_t> shot_views(const SceneDataset& d, std::size_t shots) {
  auto pool = d.views_tagged(ViewTag::Finetune);
  if (shots > pool.size())
    throw InsufficientViews("scene " + std::to_string(d.id) + " has " + std::to_string(pool.size()) +
                            " finetune views, " + std::to_string(shots) + " requested");
  pool.resize(shots);
  return pool;
}

/// Source views for evaluating a scene after finetuning on `shots` views.
inline std::vector<std::size_t> evaluation_sources(const SceneDataset& d, std::size_t shots) {
  auto src = d.views_tagged(ViewTag::Source);
  for (auto v : shot_views(d, shots)) src.push_back(v);
  return src;
}

/// Trains a copy of `model` on rays from the shot views only; the shots join
/// the encoder's source set. Zero steps return an exact copy.
inline Model finetune_few_shot(const Model& model, const SceneDataset& scene, std::size_t shots, std::size_t steps,
                               TrainConfig cfg) {
  TrainingScene s{&scene, shot_views(scene, shots), evaluation_sources(scene, shots)};
  if (shots == 0) throw InsufficientViews("few-shot finetuning needs at least one shot");
  cfg.model = model.config();
  cfg.views_per_step = std::min(cfg.views_per_step, shots);
  cfg.rays_per_step -= cfg.rays_per_step % cfg.views_per_step;
  Trainer t(cfg, {s});
  Checkpoint start = t.checkpoint();
  start.tensors = model_state(model);
  Adam fresh(model.parameters());
  fresh.save(start.tensors);
  Trainer tuned(cfg, {s}, start);
  for (std::size_t i = 0; i < steps; ++i) tuned.step();
  return clone_model(tuned.model());
}

}  // namespace viewmoe
