// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// The rendering model: a convolutional feature encoder, a view transformer
// whose feed-forward blocks are MoE layers, and a ray transformer whose
// pooling attention yields both the color and a depth readout.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "viewmoe/geometry.hpp"
#include "viewmoe/image.hpp"
#include "viewmoe/moe.hpp"
#include "viewmoe/nn.hpp"

namespace viewmoe {

struct ModelConfig {
  std::size_t dim = 64;
  std::size_t layers = 4;  // MoE view-transformer blocks
  std::size_t experts = 4;
  std::size_t top_k = 2;
  std::size_t heads = 4;
  std::size_t ray_blocks = 2;
  bool passthrough = false;  // skip the conv encoder, lift raw RGB linearly
  std::size_t pos_freqs = 4;
  std::size_t dir_freqs = 2;
  std::size_t depth_freqs = 4;

  void validate() const {
    if (dim == 0 || layers == 0 || heads == 0 || ray_blocks == 0) throw ConfigError("model sizes must be positive");
    if (dim % heads) throw ConfigError("dim must be divisible by heads");
    if (top_k == 0 || top_k > experts) throw ConfigError("need 1 <= top_k <= experts");
  }

  std::map<std::string, std::string> to_map() const {
    return {{"model.dim", std::to_string(dim)},
            {"model.layers", std::to_string(layers)},
            {"model.experts", std::to_string(experts)},
            {"model.top_k", std::to_string(top_k)},
            {"model.heads", std::to_string(heads)},
            {"model.ray_blocks", std::to_string(ray_blocks)},
            {"model.passthrough", passthrough ? "1" : "0"},
            {"model.pos_freqs", std::to_string(pos_freqs)},
            {"model.dir_freqs", std::to_string(dir_freqs)},
            {"model.depth_freqs", std::to_string(depth_freqs)}};
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Sinusoidal features [v, sin(2^f pi v), cos(2^f pi v) for f < freqs] per component.
inline void positional_encoding(std::span<const double> v, std::size_t freqs, std::vector<double>& out) {
  for (double x : v) out.push_back(x);
  for (std::size_t f = 0; f < freqs; ++f) {
    const double w = std::ldexp(std::numbers::pi, static_cast<int>(f));
    for (double x : v) {
      out.push_back(std::sin(w * x));
      out.push_back(std::cos(w * x));
    }
  }
}

inline std::size_t encoding_width(std::size_t components, std::size_t freqs) { return components * (1 + 2 * freqs); }

// ---------------------------------------------------------------------------
// Attention

struct AttentionResult {
  Tensor out;      // [B*Tq, d]
  Tensor weights;  // [B*heads, Tq, Tk]
};

/// [B*T, d] -> [B*h, T, d/h]
inline Tensor split_heads(const Tensor& x, std::size_t B, std::size_t T, std::size_t h) {
  const std::size_t dh = x.dim(1) / h;
  if (T == 1) return reshape(x, {B * h, 1, dh});
  return reshape(permute(reshape(x, {B, T, h, dh}), {0, 2, 1, 3}), {B * h, T, dh});
}

/// [B*h, T, dh] -> [B*T, h*dh]
inline Tensor merge_heads(const Tensor& x, std::size_t B, std::size_t T, std::size_t h) {
  const std::size_t dh = x.dim(2);
  if (T == 1) return reshape(x, {B, h * dh});
  return reshape(permute(reshape(x, {B, h, T, dh}), {0, 2, 1, 3}), {B * T, h * dh});
}

struct MultiHeadAttention {
  Linear q, k, v, o;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t h, Rng& rng)
      : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), o(dim, dim, rng), heads(h) {}

  /// Each of B groups has Tq queries attending over Tk keys. key_mask is
  /// [B*Tk] (1 = attend) or empty.
  AttentionResult operator()(const Tensor& query, const Tensor& kv, std::size_t B, std::size_t Tq, std::size_t Tk,
                             std::span<const std::uint8_t> key_mask = {}) const {
    const std::size_t dh = q.out_features() / heads;
    Tensor qh = split_heads(q(query), B, Tq, heads);
    Tensor kh = split_heads(k(kv), B, Tk, heads);
    Tensor vh = split_heads(v(kv), B, Tk, heads);
    Tensor scores = scale(bmm_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor w;
    if (key_mask.empty()) {
      w = softmax(scores);
    } else {
      std::vector<std::uint8_t> full(B * heads * Tq * Tk);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < heads * Tq; ++i)
          std::copy_n(key_mask.begin() + static_cast<std::ptrdiff_t>(b * Tk), Tk,
                      full.begin() + static_cast<std::ptrdiff_t>((b * heads * Tq + i) * Tk));
      w = softmax(scores, full);
    }
    return {o(merge_heads(bmm(w, vh), B, Tq, heads)), w};
  }

  void collect(const std::string& prefix, ParamList& out) const {
    q.collect(prefix + ".q", out);
    k.collect(prefix + ".k", out);
    v.collect(prefix + ".v", out);
    o.collect(prefix + ".o", out);
  }
};

/// Head-averaged weights [B, Tk] of a single-query attention.
inline std::vector<double> head_average(const Tensor& weights, std::size_t B, std::size_t heads) {
  const std::size_t Tk = weights.dim(2);
  std::vector<double> out(B * Tk, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    double total = 0.0;
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < Tk; ++t) out[b * Tk + t] += weights.value((b * heads + h) * Tk + t);
    for (std::size_t t = 0; t < Tk; ++t) total += out[b * Tk + t];
    for (std::size_t t = 0; t < Tk; ++t) out[b * Tk + t] /= total;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature extraction

/// Per-image encoder. Conv mode: three 3x3 stride-1 zero-padded convolutions
/// with GELU between them. Passthrough mode: one linear map of raw RGB.
/// Output is [H*W, dim] for an [H, W, 3] image.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(std::size_t dim, bool passthrough, Rng& rng) : passthrough_(passthrough) {
    if (passthrough) {
      convs_.emplace_back(3, dim, rng);
    } else {
      convs_.emplace_back(27, dim, rng);
      convs_.emplace_back(9 * dim, dim, rng);
      convs_.emplace_back(9 * dim, dim, rng);
    }
  }

  bool passthrough() const { return passthrough_; }

  Tensor operator()(const Tensor& image) const {
    detail::require_rank("FeatureExtractor", image, 3);
    const std::size_t H = image.dim(0), W = image.dim(1);
    if (passthrough_) return convs_[0](reshape(image, {H * W, image.dim(2)}));
    Tensor x = image;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      Tensor y = convs_[i](im2col3x3(x));
      if (i + 1 == convs_.size()) return y;
      x = reshape(gelu(y), {H, W, y.dim(1)});
    }
    return x;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(prefix + ".conv" + std::to_string(i), out);
  }

 private:
  bool passthrough_ = false;
  std::vector<Linear> convs_;
};

/// Source views with their encoded features, stacked view-major.
struct FeatureBank {
  std::vector<Camera> cameras;
  int width = 0, height = 0;
  Tensor features;          // [N*H*W, dim]
  std::vector<double> rgb;  // [N*H*W*3], linear radiance

  std::size_t views() const { return cameras.size(); }
};

/// Bilinear taps of a continuous image position (u, v); positions outside the
/// image are clamped to the border.
struct BilinearTaps {
  std::size_t index[4];
  double weight[4];
};

inline BilinearTaps bilinear_taps(double u, double v, int width, int height) {
  const double x = std::clamp(u - 0.5, 0.0, static_cast<double>(width - 1));
  const double y = std::clamp(v - 0.5, 0.0, static_cast<double>(height - 1));
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, width - 1), y1 = std::min(y0 + 1, height - 1);
  const double fx = x - x0, fy = y - y0;
  auto at = [&](int r, int c) { return static_cast<std::size_t>(r) * static_cast<std::size_t>(width) + c; };
  return {{at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1)},
          {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy}};
}

// ---------------------------------------------------------------------------
// View transformer

/// Pre-norm block: the point token attends over its view tokens, then passes
/// through the MoE feed-forward, each with a residual connection.
class ViewBlock {
 public:
  ViewBlock() = default;
  ViewBlock(const ModelConfig& c, Rng& rng)
      : norm_q_(c.dim), norm_kv_(c.dim), norm_ff_(c.dim), attn_(c.dim, c.heads, rng),
        moe_(c.dim, c.dim, c.experts, c.top_k, rng) {}

  struct Output {
    Tensor token;
    GateBatch gates;
    std::vector<double> view_attention;  // [P, N], head-averaged
  };

  Output forward(const Tensor& token, const Tensor& views, std::size_t N, std::span<const std::uint8_t> mask) const {
    const std::size_t P = token.dim(0);
    auto a = attn_(norm_q_(token), norm_kv_(views), P, 1, N, mask);
    Tensor x = add(token, a.out);
    auto m = moe_.forward(norm_ff_(x));
    return {add(x, m.output), std::move(m.gates), head_average(a.weights, P, attn_.heads)};
  }

  const MoELayer& moe() const { return moe_; }

  void collect(const std::string& prefix, ParamList& out) const {
    norm_q_.collect(prefix + ".norm_q", out);
    norm_kv_.collect(prefix + ".norm_kv", out);
    norm_ff_.collect(prefix + ".norm_ff", out);
    attn_.collect(prefix + ".attn", out);
    moe_.collect(prefix + ".moe", out);
  }

 private:
  LayerNorm norm_q_, norm_kv_, norm_ff_;
  MultiHeadAttention attn_;
  MoELayer moe_;
};

/// Per-point inputs to view aggregation.
struct PointQuery {
  std::vector<Vec3> position;
  std::vector<Vec3> direction;  // unit viewing direction of the target ray
  std::vector<int> exclude;     // source view withheld from this point, or -1
};

struct ViewAggregate {
  Tensor tokens;                         // [P, dim]; invalid points hold the null token
  std::vector<std::uint8_t> valid;       // [P]; 0 when every source view is masked
  std::vector<std::size_t> valid_rows;   // gate row -> point index
  std::vector<GateBatch> gates;          // per layer, rows follow valid_rows
  std::vector<std::vector<double>> view_attention;  // per layer [valid points, N]
};

class ViewTransformer {
 public:
  ViewTransformer() = default;
  ViewTransformer(const ModelConfig& c, Rng& rng)
      : config_(c),
        view_in_(c.dim + 6, c.dim, rng),
        query_in_(encoding_width(3, c.pos_freqs) + encoding_width(3, c.dir_freqs) + c.dim, c.dim, rng),
        null_token_(uniform_parameter({1, c.dim}, 0.1, rng)) {
    for (std::size_t l = 0; l < c.layers; ++l) blocks_.emplace_back(c, rng);
  }

  const ViewBlock& block(std::size_t l) const { return blocks_.at(l); }
  std::size_t layers() const { return blocks_.size(); }

  /// Point tokens from the source views. A view is masked for a point when
  /// the point is not in front of it or it is the point's excluded view.
  ViewAggregate aggregate(const PointQuery& pts, const FeatureBank& bank) const {
    const std::size_t P = pts.position.size(), N = bank.views();
    const std::size_t HW = static_cast<std::size_t>(bank.width) * static_cast<std::size_t>(bank.height);
    if (pts.direction.size() != P || pts.exclude.size() != P) throw ShapeMismatch("aggregate: point field sizes differ");
    ViewAggregate out;
    out.valid.assign(P, 0);

    std::vector<std::uint8_t> mask;
    std::vector<std::size_t> taps;
    std::vector<double> tap_w, extra;
    for (std::size_t p = 0; p < P; ++p) {
      std::vector<std::uint8_t> m(N, 0);
      for (std::size_t n = 0; n < N; ++n) {
        if (pts.exclude[p] == static_cast<int>(n)) continue;
        m[n] = try_project(bank.cameras[n], pts.position[p]).has_value();
      }
      if (std::find(m.begin(), m.end(), 1) == m.end()) continue;
      out.valid[p] = 1;
      out.valid_rows.push_back(p);
      mask.insert(mask.end(), m.begin(), m.end());
      for (std::size_t n = 0; n < N; ++n) {
        BilinearTaps t{};
        Vec3 dir = Vec3::Zero();
        if (m[n]) {
          const auto proj = *try_project(bank.cameras[n], pts.position[p]);
          t = bilinear_taps(proj.u, proj.v, bank.width, bank.height);
          dir = pts.direction[p] - (pts.position[p] - bank.cameras[n].center).normalized();
        }
        double rgb[3] = {0, 0, 0};
        for (int j = 0; j < 4; ++j) {
          taps.push_back(n * HW + t.index[j]);
          tap_w.push_back(m[n] ? t.weight[j] : 0.0);
          for (int c = 0; c < 3; ++c) rgb[c] += tap_w.back() * bank.rgb[(n * HW + t.index[j]) * 3 + c];
        }
        extra.insert(extra.end(), {rgb[0], rgb[1], rgb[2], dir.x(), dir.y(), dir.z()});
      }
    }

    const std::size_t V = out.valid_rows.size();
    Tensor point_tokens;
    if (V > 0) {
      Tensor sampled = weighted_gather(bank.features, std::move(taps), std::move(tap_w), 4);  // [V*N, dim]
      Tensor views = view_in_(concat_cols({sampled, Tensor::constant({V * N, 6}, std::move(extra))}));

      // mean over unmasked views as a [V, 1, N] x [V, N, dim] product
      std::vector<double> coef(V * N, 0.0);
      std::vector<double> enc;
      for (std::size_t i = 0; i < V; ++i) {
        double count = 0.0;
        for (std::size_t n = 0; n < N; ++n) count += mask[i * N + n];
        for (std::size_t n = 0; n < N; ++n) coef[i * N + n] = mask[i * N + n] / count;
        const std::size_t p = out.valid_rows[i];
        positional_encoding(std::span<const double>(pts.position[p].data(), 3), config_.pos_freqs, enc);
        positional_encoding(std::span<const double>(pts.direction[p].data(), 3), config_.dir_freqs, enc);
      }
      const std::size_t dim = config_.dim;
      Tensor view_mean = reshape(bmm(Tensor::constant({V, 1, N}, std::move(coef)), reshape(views, {V, N, dim})), {V, dim});
      const std::size_t enc_w = enc.size() / V;
      Tensor token = query_in_(concat_cols({Tensor::constant({V, enc_w}, std::move(enc)), view_mean}));

      for (const auto& b : blocks_) {
        auto r = b.forward(token, views, N, mask);
        token = r.token;
        out.gates.push_back(std::move(r.gates));
        out.view_attention.push_back(std::move(r.view_attention));
      }
      point_tokens = token;
    }

    if (V == P) {
      out.tokens = point_tokens;
    } else {
      std::vector<std::size_t> invalid;
      for (std::size_t p = 0; p < P; ++p)
        if (!out.valid[p]) invalid.push_back(p);
      const std::size_t n_invalid = invalid.size();
      Tensor nulls = scatter_add_rows(repeat_rows(null_token_, n_invalid), std::move(invalid), P);
      out.tokens = V ? add(scatter_add_rows(point_tokens, out.valid_rows, P), nulls) : nulls;
    }
    return out;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    view_in_.collect(prefix + ".view_in", out);
    query_in_.collect(prefix + ".query_in", out);
    out.push_back({prefix + ".null_token", null_token_});
    for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect(prefix + ".block" + std::to_string(l), out);
  }

 private:
  ModelConfig config_;
  Linear view_in_;   // [feature, rgb, direction difference] -> dim
  Linear query_in_;  // [PE(x), PE(theta), mean view token] -> dim
  Tensor null_token_;
  std::vector<ViewBlock> blocks_;
};

// ---------------------------------------------------------------------------
// Ray transformer

class RayBlock {
 public:
  RayBlock() = default;
  RayBlock(std::size_t dim, std::size_t heads, Rng& rng)
      : norm_attn_(dim), norm_ff_(dim), attn_(dim, heads, rng), ff_(dim, 2 * dim, dim, rng) {}

  Tensor operator()(const Tensor& x, std::size_t rays, std::size_t M) const {
    Tensor h = norm_attn_(x);
    Tensor y = add(x, attn_(h, h, rays, M, M).out);
    return add(y, ff_(norm_ff_(y)));
  }

  void collect(const std::string& prefix, ParamList& out) const {
    norm_attn_.collect(prefix + ".norm_attn", out);
    norm_ff_.collect(prefix + ".norm_ff", out);
    attn_.collect(prefix + ".attn", out);
    ff_.collect(prefix + ".ff", out);
  }

 private:
  LayerNorm norm_attn_, norm_ff_;
  MultiHeadAttention attn_;
  FeedForward ff_;
};

struct RayOutput {
  Tensor rgb;                        // [R, 3], in (0, 1)
  std::vector<double> pool_weights;  // [R, M], head-averaged, rows sum to 1
};

/// Self-attention over the M point tokens of each ray, then a learned pooling
/// query whose attention weights are retained, then an MLP to RGB.
class RayTransformer {
 public:
  RayTransformer() = default;
  RayTransformer(const ModelConfig& c, Rng& rng)
      : config_(c),
        depth_in_(encoding_width(1, c.depth_freqs), c.dim, rng),
        pool_query_(uniform_parameter({1, c.dim}, 0.1, rng)),
        norm_pool_(c.dim),
        pool_(c.dim, c.heads, rng),
        head_(c.dim, c.dim, 3, rng) {
    for (std::size_t b = 0; b < c.ray_blocks; ++b) blocks_.emplace_back(c.dim, c.heads, rng);
  }

  /// tokens [R*M, dim] ray-major; t_norm [R*M] are sample depths mapped to [0, 1].
  RayOutput operator()(const Tensor& tokens, std::span<const double> t_norm, std::size_t R, std::size_t M) const {
    std::vector<double> enc;
    for (double t : t_norm) positional_encoding(std::span<const double>(&t, 1), config_.depth_freqs, enc);
    const std::size_t width = encoding_width(1, config_.depth_freqs);
    Tensor x = add(tokens, depth_in_(Tensor::constant({R * M, width}, std::move(enc))));
    for (const auto& b : blocks_) x = b(x, R, M);
    auto pooled = pool_(repeat_rows(pool_query_, R), norm_pool_(x), R, 1, M);
    return {sigmoid(head_(pooled.out)), head_average(pooled.weights, R, pool_.heads)};
  }

  void collect(const std::string& prefix, ParamList& out) const {
    depth_in_.collect(prefix + ".depth_in", out);
    out.push_back({prefix + ".pool_query", pool_query_});
    norm_pool_.collect(prefix + ".norm_pool", out);
    pool_.collect(prefix + ".pool", out);
    head_.collect(prefix + ".head", out);
    for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect(prefix + ".block" + std::to_string(b), out);
  }

 private:
  ModelConfig config_;
  Linear depth_in_;
  Tensor pool_query_;
  LayerNorm norm_pool_;
  MultiHeadAttention pool_;
  FeedForward head_;
  std::vector<RayBlock> blocks_;
};

/// Expected sample depth sum_k w_k t_k of one ray; w is renormalized.
inline double depth_from_attention(std::span<const double> w, std::span<const double> t) {
  if (w.size() != t.size() || w.empty()) throw ShapeMismatch("depth_from_attention: size mismatch");
  if (t.size() == 1) return t[0];
  double total = 0.0, acc = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    total += w[k];
    acc += w[k] * t[k];
  }
  if (!(total > 0.0)) throw DomainError("depth_from_attention: weights sum to zero");
  return acc / total;
}

// ---------------------------------------------------------------------------
// Full model

struct RenderResult {
  Tensor rgb;                        // [R, 3]
  std::vector<double> depth;         // [R]
  std::vector<double> pool_weights;  // [R, M]
  SampledPoints points;
  ViewAggregate views;
};

class Model {
 public:
  Model() = default;
  Model(const ModelConfig& c, Rng& rng) : config_(c) {
    c.validate();
    encoder_ = FeatureExtractor(c.dim, c.passthrough, rng);
    view_ = ViewTransformer(c, rng);
    ray_ = RayTransformer(c, rng);
  }

  const ModelConfig& config() const { return config_; }
  const ViewTransformer& view_transformer() const { return view_; }
  const FeatureExtractor& encoder() const { return encoder_; }

  /// Encodes source images (linear radiance, all of one size).
  FeatureBank encode(const std::vector<Camera>& cameras, const std::vector<const Image*>& images) const {
    if (cameras.size() != images.size() || cameras.empty()) throw ShapeMismatch("encode: need one image per camera");
    FeatureBank bank;
    bank.cameras = cameras;
    bank.width = images[0]->width;
    bank.height = images[0]->height;
    std::vector<Tensor> maps;
    for (std::size_t i = 0; i < images.size(); ++i) {
      const Image& im = *images[i];
      if (im.width != bank.width || im.height != bank.height) throw ShapeMismatch("encode: source sizes differ");
      if (im.width != cameras[i].width || im.height != cameras[i].height)
        throw ShapeMismatch("encode: image does not match its camera");
      maps.push_back(encoder_(im.tensor()));
      bank.rgb.insert(bank.rgb.end(), im.data.begin(), im.data.end());
    }
    bank.features = maps.size() == 1 ? maps[0] : concat_rows(maps);
    return bank;
  }

  /// Renders rays with M stratified samples each. exclude[r] names a source
  /// view ray r may not use (its own target view), or -1.
  RenderResult render_rays(const RayBatch& rays, const FeatureBank& bank, const std::vector<int>& exclude,
                           std::size_t M, bool jitter = false, Rng* rng = nullptr) const {
    const std::size_t R = rays.size();
    if (R == 0) throw ShapeMismatch("render_rays: empty batch");
    if (exclude.size() != R) throw ShapeMismatch("render_rays: exclude list size mismatch");
    RenderResult out;
    out.points = sample_along_rays(rays, M, jitter, rng);
    PointQuery q;
    std::vector<double> t_norm(R * M);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t k = 0; k < M; ++k) {
        const std::size_t i = r * M + k;
        q.position.push_back(out.points.position[i]);
        q.direction.push_back(rays.directions[r]);
        q.exclude.push_back(exclude[r]);
        t_norm[i] = (out.points.depth[i] - rays.near[r]) / (rays.far[r] - rays.near[r]);
      }
    out.views = view_.aggregate(q, bank);
    auto ray = ray_(out.views.tokens, t_norm, R, M);
    out.rgb = ray.rgb;
    out.pool_weights = std::move(ray.pool_weights);
    out.depth.resize(R);
    for (std::size_t r = 0; r < R; ++r)
      out.depth[r] = depth_from_attention(std::span<const double>(out.pool_weights).subspan(r * M, M),
                                          std::span<const double>(out.points.depth).subspan(r * M, M));
    return out;
  }

  void collect(ParamList& out) const {
    encoder_.collect("encoder", out);
    view_.collect("view", out);
    ray_.collect("ray", out);
  }

  ParamList parameters() const {
    ParamList p;
    collect(p);
    return p;
  }

 private:
  ModelConfig config_;
  FeatureExtractor encoder_;
  ViewTransformer view_;
  RayTransformer ray_;
};

// ---------------------------------------------------------------------------
// Image rendering

struct RenderedImage {
  Image rgb;
  std::vector<double> depth;                    // [H*W]
  std::vector<std::vector<int>> expert_pattern;  // per layer [H*W]; index into expert_combinations, -1 if none
  std::vector<std::vector<std::uint32_t>> expert_counts;  // per layer [H*W, E]; samples of the ray routed to e
};

struct RenderOptions {
  std::size_t samples = 32;
  double near = 1.0, far = 5.0;
  std::size_t chunk = 128;  // rays per forward pass
  int exclude = -1;         // source view withheld from every ray
};

/// Most frequent selection pattern among the valid samples of each ray; ties
/// go to the lower pattern index.
inline std::vector<int> ray_pattern_mode(const ViewAggregate& views, std::size_t layer, std::size_t rays,
                                         std::size_t M, std::size_t experts) {
  const GateBatch& g = views.gates.at(layer);
  const std::size_t patterns = binomial(experts, g.k);
  std::vector<std::vector<std::size_t>> counts(rays, std::vector<std::size_t>(patterns, 0));
  for (std::size_t row = 0; row < views.valid_rows.size(); ++row) {
    auto sel = g.selection(row);
    const std::size_t r = views.valid_rows[row] / M;
    ++counts[r][combination_index(std::vector<std::size_t>(sel.begin(), sel.end()), experts)];
  }
  std::vector<int> mode(rays, -1);
  for (std::size_t r = 0; r < rays; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 0; c < patterns; ++c)
      if (counts[r][c] > best) {
        best = counts[r][c];
        mode[r] = static_cast<int>(c);
      }
  }
  return mode;
}

/// Renders every pixel of `target` from the encoded sources, without recording gradients.
inline RenderedImage render_image(const Model& model, const Camera& target, const FeatureBank& bank,
                                  const RenderOptions& opt = {}) {
  target.validate();
  const std::size_t HW = static_cast<std::size_t>(target.width) * static_cast<std::size_t>(target.height);
  const std::size_t L = model.config().layers;
  RenderedImage out;
  out.rgb = Image(target.width, target.height);
  out.depth.assign(HW, 0.0);
  out.expert_pattern.assign(L, std::vector<int>(HW, -1));
  const std::size_t E = model.config().experts;
  out.expert_counts.assign(L, std::vector<std::uint32_t>(HW * E, 0));
  const std::size_t chunk = std::max<std::size_t>(opt.chunk, 1);
  for (std::size_t start = 0; start < HW; start += chunk) {
    const std::size_t end = std::min(HW, start + chunk);
    std::vector<std::pair<int, int>> px;
    for (std::size_t i = start; i < end; ++i)
      px.emplace_back(static_cast<int>(i / target.width), static_cast<int>(i % target.width));
    auto rays = rays_for_pixels(target, -1, px, opt.near, opt.far);
    auto r = model.render_rays(rays, bank, std::vector<int>(px.size(), opt.exclude), opt.samples);
    for (std::size_t j = 0; j < px.size(); ++j) {
      for (int c = 0; c < 3; ++c) out.rgb.data[(start + j) * 3 + c] = r.rgb.value(j * 3 + c);
      out.depth[start + j] = r.depth[j];
    }
    if (r.views.gates.empty()) continue;
    for (std::size_t l = 0; l < L; ++l) {
      auto mode = ray_pattern_mode(r.views, l, px.size(), opt.samples, model.config().experts);
      std::copy(mode.begin(), mode.end(), out.expert_pattern[l].begin() + static_cast<std::ptrdiff_t>(start));
      const GateBatch& g = r.views.gates[l];
      for (std::size_t row = 0; row < r.views.valid_rows.size(); ++row) {
        const std::size_t ray = start + r.views.valid_rows[row] / opt.samples;
        for (auto e : g.selection(row)) ++out.expert_counts[l][ray * E + e];
      }
    }
  }
  return out;
}

}  // namespace viewmoe
