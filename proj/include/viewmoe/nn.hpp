// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Small parameterized building blocks shared by the MoE layer and the renderer.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "viewmoe/ops.hpp"
#include "viewmoe/rng.hpp"

namespace viewmoe {

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

inline Tensor uniform_parameter(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::parameter(std::move(shape), std::move(v));
}

/// y = x W (+ b), W is [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;  // undefined when bias-free

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true) {
    weight = uniform_parameter({in, out}, std::sqrt(6.0 / static_cast<double>(in + out)), rng);
    if (with_bias) bias = Tensor::parameter({out}, std::vector<double>(out, 0.0));
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor operator()(const Tensor& x) const {
    Tensor y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

struct LayerNorm {
  Tensor gain;
  Tensor shift;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t n)
      : gain(Tensor::parameter({n}, std::vector<double>(n, 1.0))),
        shift(Tensor::parameter({n}, std::vector<double>(n, 0.0))) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, shift); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".shift", shift});
  }
};

/// Two-layer GELU MLP: in -> hidden -> out.
struct FeedForward {
  Linear up;
  Linear down;

  FeedForward() = default;
  FeedForward(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) : up(in, hidden, rng), down(hidden, out, rng) {}

  Tensor operator()(const Tensor& x) const { return down(gelu(up(x))); }

  void collect(const std::string& prefix, ParamList& out) const {
    up.collect(prefix + ".up", out);
    down.collect(prefix + ".down", out);
  }
};

}  // namespace viewmoe
