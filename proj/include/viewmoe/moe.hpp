// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Sparse top-K mixture-of-experts layer with an always-on permanent expert,
// plus the two routing regularizers: the expert-usage dispersion loss and the
// distance-weighted symmetric-KL spatial consistency loss.
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "viewmoe/geometry.hpp"
#include "viewmoe/log.hpp"
#include "viewmoe/nn.hpp"

namespace viewmoe {

// ---------------------------------------------------------------------------
// Combinatorics of the routing space

inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  std::uint64_t r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

/// Number of distinct per-token routing paths through `layers` MoE blocks.
inline std::uint64_t routing_path_count(std::uint64_t experts, std::uint64_t k, std::uint64_t layers) {
  std::uint64_t r = 1;
  for (std::uint64_t l = 0; l < layers; ++l) r *= binomial(experts, k);
  return r;
}

/// All K-subsets of {0..E-1} in lexicographic order, each sorted ascending.
inline std::vector<std::vector<std::size_t>> expert_combinations(std::size_t experts, std::size_t k) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur(k);
  std::iota(cur.begin(), cur.end(), 0);
  if (k == 0 || k > experts) return out;
  while (true) {
    out.push_back(cur);
    std::ptrdiff_t i = static_cast<std::ptrdiff_t>(k) - 1;
    while (i >= 0 && cur[i] == static_cast<std::size_t>(i) + experts - k) --i;
    if (i < 0) return out;
    ++cur[i];
    for (std::size_t j = static_cast<std::size_t>(i) + 1; j < k; ++j) cur[j] = cur[j - 1] + 1;
  }
}

/// Position of a selected set within expert_combinations(); order of `selected` is ignored.
inline std::size_t combination_index(std::vector<std::size_t> selected, std::size_t experts) {
  std::sort(selected.begin(), selected.end());
  const std::size_t k = selected.size();
  std::size_t rank = 0, prev = 0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t v = (i ? prev + 1 : 0); v < selected[i]; ++v) rank += binomial(experts - v - 1, k - i - 1);
    prev = selected[i];
  }
  return rank;
}

// ---------------------------------------------------------------------------
// Routing

/// Indices of the K largest values, largest first; ties go to the lower index.
inline std::vector<std::size_t> top_k(std::span<const double> logits, std::size_t k) {
  std::vector<std::size_t> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  idx.resize(k);
  return idx;
}

/// Router outputs for a batch of P tokens over E experts.
struct GateBatch {
  std::size_t tokens = 0;
  std::size_t experts = 0;
  std::size_t k = 0;
  Tensor logits;                      // [P, E]
  Tensor dense;                       // [P, E] softmax over all logits
  Tensor sparse;                      // [P, E] softmax over the selected logits, zero elsewhere
  std::vector<std::size_t> selected;  // [P * K], per token largest-logit first

  std::span<const std::size_t> selection(std::size_t token) const { return {selected.data() + token * k, k}; }
};

/// Single-token view of a GateBatch row.
struct GateDistribution {
  std::vector<double> dense;
  std::vector<double> sparse;
  std::vector<std::size_t> selected;
};

inline GateBatch gates_from_logits(const Tensor& logits, std::size_t k) {
  if (logits.rank() != 2) throw ShapeMismatch("gates_from_logits: logits must be [P, E]");
  const std::size_t P = logits.dim(0), E = logits.dim(1);
  if (k < 1 || k > E) throw DomainError("gates_from_logits: need 1 <= K <= E");
  GateBatch g;
  g.tokens = P;
  g.experts = E;
  g.k = k;
  g.logits = logits;
  g.selected.reserve(P * k);
  std::vector<std::uint8_t> mask(P * E, 0);
  for (std::size_t p = 0; p < P; ++p) {
    auto sel = top_k(logits.values().subspan(p * E, E), k);
    for (auto e : sel) {
      mask[p * E + e] = 1;
      g.selected.push_back(e);
    }
  }
  g.dense = softmax(logits);
  g.sparse = softmax(logits, mask);
  return g;
}

/// Linear gating network followed by top-K selection.
struct Router {
  Linear gate;
  std::size_t k = 1;

  Router() = default;
  Router(std::size_t dim, std::size_t experts, std::size_t top, Rng& rng) : gate(dim, experts, rng, false), k(top) {
    if (top < 1 || top > experts) throw DomainError("Router: need 1 <= K <= E");
  }

  std::size_t experts() const { return gate.out_features(); }

  GateBatch route(const Tensor& tokens) const {
    if (tokens.rank() != 2 || tokens.dim(1) != gate.in_features())
      throw ShapeMismatch("Router: token shape " + shape_str(tokens.shape()));
    return gates_from_logits(gate(tokens), k);
  }

  GateDistribution route_one(std::span<const double> token) const {
    auto g = route(Tensor::constant({1, token.size()}, {token.begin(), token.end()}));
    return {{g.dense.values().begin(), g.dense.values().end()},
            {g.sparse.values().begin(), g.sparse.values().end()},
            g.selected};
  }

  void collect(const std::string& prefix, ParamList& out) const { gate.collect(prefix + ".gate", out); }
};

/// Sparse dispatch: y = permanent(x) + sum over each token's selected experts of
/// w_e * expert(e, rows routed to e). Each expert runs once on the gathered rows
/// routed to it and never on other rows.
template <class PermanentFn, class ExpertFn>
Tensor combine_experts(const Tensor& x, const GateBatch& gates, PermanentFn&& permanent, ExpertFn&& expert) {
  const std::size_t P = x.dim(0), E = gates.experts;
  if (gates.tokens != P) throw ShapeMismatch("combine_experts: gate/token count mismatch");
  std::vector<std::vector<std::size_t>> assigned(E);
  for (std::size_t p = 0; p < P; ++p)
    for (auto e : gates.selection(p)) assigned[e].push_back(p);

  Tensor y = permanent(x);
  for (std::size_t e = 0; e < E; ++e) {
    if (assigned[e].empty()) continue;
    std::vector<std::size_t> flat;
    flat.reserve(assigned[e].size());
    for (auto p : assigned[e]) flat.push_back(p * E + e);
    Tensor out = expert(e, gather_rows(x, assigned[e]));
    out = rowscale(out, gather_elements(gates.sparse, std::move(flat)));
    y = add(y, scatter_add_rows(out, assigned[e], P));
  }
  return y;
}

struct MoEOutput {
  Tensor output;  // [P, d]
  GateBatch gates;
};

/// E routed experts plus one permanent expert of the same architecture:
/// y = f_p(x) + sum_{e in S(x)} w_e(x) f_e(x). Experts outside S(x) are not
/// evaluated for x.
class MoELayer {
 public:
  MoELayer() = default;
  MoELayer(std::size_t dim, std::size_t hidden, std::size_t experts, std::size_t k, Rng& rng)
      : router_(dim, experts, k, rng), permanent_(dim, hidden, dim, rng) {
    for (std::size_t e = 0; e < experts; ++e) experts_.emplace_back(dim, hidden, dim, rng);
  }

  std::size_t num_experts() const { return experts_.size(); }
  std::size_t top_k() const { return router_.k; }
  const Router& router() const { return router_; }
  const FeedForward& expert(std::size_t e) const { return experts_.at(e); }
  const FeedForward& permanent() const { return permanent_; }

  MoEOutput forward(const Tensor& x) const {
    GateBatch gates = router_.route(x);
    Tensor y = combine_experts(
        x, gates, [this](const Tensor& t) { return permanent_(t); },
        [this](std::size_t e, const Tensor& t) { return experts_[e](t); });
    return {y, std::move(gates)};
  }

  void collect(const std::string& prefix, ParamList& out) const {
    router_.collect(prefix + ".router", out);
    permanent_.collect(prefix + ".permanent", out);
    for (std::size_t e = 0; e < experts_.size(); ++e) experts_[e].collect(prefix + ".expert" + std::to_string(e), out);
  }

 private:
  Router router_;
  FeedForward permanent_;
  std::vector<FeedForward> experts_;
};

// ---------------------------------------------------------------------------
// Losses

enum class DiversityForm {
  Cv2,           // var(g) / mean(g)^2, zero at balanced usage
  PaperLiteral,  // mean(g) / var(g)
};

/// Dispersion of an expert-usage vector g [E]; variance is the population variance.
inline Tensor usage_dispersion(const Tensor& g, DiversityForm form = DiversityForm::Cv2) {
  if (g.rank() != 1 || g.numel() == 0) throw ShapeMismatch("usage_dispersion: expected a non-empty vector");
  Tensor m = mean(g);
  Tensor var = mean(square(sub(g, expand_scalar(m, g.shape()))));
  if (form == DiversityForm::Cv2) return div(var, square(m));
  if (var.item() == 0.0) throw DomainError("usage_dispersion: paper-literal form undefined at zero variance");
  return div(m, var);
}

/// Mean sparse routing weight per expert, averaged over tokens within each ray
/// and then over rays. `ray_of_token[p]` groups the rows of `sparse` [P, E].
inline Tensor mean_usage(const Tensor& sparse, const std::vector<std::size_t>& ray_of_token) {
  if (sparse.rank() != 2 || ray_of_token.size() != sparse.dim(0))
    throw ShapeMismatch("mean_usage: grouping does not match gate rows");
  if (ray_of_token.empty()) throw ShapeMismatch("mean_usage: no tokens");
  const std::size_t P = sparse.dim(0), E = sparse.dim(1);
  std::size_t rays = 0;
  for (auto r : ray_of_token) rays = std::max(rays, r + 1);
  std::vector<double> count(rays, 0.0);
  for (auto r : ray_of_token) count[r] += 1.0;
  double nonempty = 0.0;
  for (double c : count) nonempty += c > 0.0;
  std::vector<double> coef(P);
  for (std::size_t p = 0; p < P; ++p) coef[p] = 1.0 / (nonempty * count[ray_of_token[p]]);
  return reshape(matmul(Tensor::constant({1, P}, std::move(coef)), sparse), {E});
}

/// Expert-diversity regularizer over one layer's gates.
inline Tensor diversity_loss(const GateBatch& gates, const std::vector<std::size_t>& ray_of_token,
                             DiversityForm form = DiversityForm::Cv2) {
  return usage_dispersion(mean_usage(gates.sparse, ray_of_token), form);
}

/// Row-wise 0.5 KL(p||q) + 0.5 KL(q||p) = 0.5 sum (p - q)(log p - log q), natural log.
/// p and q are [n, E] with strictly positive entries.
inline Tensor symmetric_kl(const Tensor& p, const Tensor& q) {
  detail::require_same_shape("symmetric_kl", p, q);
  for (double x : p.values())
    if (!(x > 0.0)) throw DomainError("symmetric_kl: distribution entry <= 0");
  for (double x : q.values())
    if (!(x > 0.0)) throw DomainError("symmetric_kl: distribution entry <= 0");
  return scale(sum_last(mul(sub(p, q), sub(log(p), log(q)))), 0.5);
}

/// Plain-value form of symmetric_kl for single distributions.
inline double symmetric_kl(std::span<const double> p, std::span<const double> q) {
  auto t = symmetric_kl(Tensor::constant({1, p.size()}, {p.begin(), p.end()}),
                        Tensor::constant({1, q.size()}, {q.begin(), q.end()}));
  return t.item();
}

/// sum_i rho_i * kl_i.
inline Tensor confidence_weighted(const Tensor& per_pair_kl, const std::vector<double>& rho) {
  if (per_pair_kl.numel() != rho.size()) throw ShapeMismatch("confidence_weighted: size mismatch");
  return sum(mul(reshape(per_pair_kl, {rho.size()}), Tensor::constant({rho.size()}, rho)));
}

/// Spatial consistency loss: rho-weighted symmetric KL between the dense router
/// distributions of each nearest-point pair, averaged over the given layers.
/// An empty pair set contributes zero.
inline Tensor spatial_consistency_loss(const PointPairSet& pairs, const std::vector<Tensor>& dense_per_layer) {
  if (pairs.empty() || dense_per_layer.empty()) {
    logger().debug("spatial consistency: no point pairs this step, loss is 0");
    return Tensor::scalar(0.0);
  }
  std::vector<std::size_t> ia, ib;
  for (const auto& p : pairs.pairs) {
    ia.push_back(p.a);
    ib.push_back(p.b);
  }
  Tensor total;
  for (const auto& dense : dense_per_layer) {
    Tensor kl = symmetric_kl(gather_rows(dense, ia), gather_rows(dense, ib));
    Tensor l = confidence_weighted(kl, pairs.rho);
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, 1.0 / static_cast<double>(dense_per_layer.size()));
}

}  // namespace viewmoe
