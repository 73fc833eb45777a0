// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "viewmoe/tensor.hpp"

namespace viewmoe {

namespace detail {
inline void check_step(double h) {
  if (!(h > 0.0 && h <= 1e-2)) throw DomainError("gradcheck: step must lie in (0, 1e-2]");
}

inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

inline std::vector<std::vector<double>> analytic_grads(const std::function<Tensor()>& f, std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = f();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> out;
  for (auto& p : params) out.push_back(p.grad());
  return out;
}

inline double central_difference(const std::function<Tensor()>& f, Tensor& p, std::size_t i, double h) {
  auto v = p.mutable_values();
  const double orig = v[i];
  v[i] = orig + h;
  const double fp = f().item();
  v[i] = orig - h;
  const double fm = f().item();
  v[i] = orig;
  const double d = (fp - fm) / (2.0 * h);
  if (!std::isfinite(d)) throw NonFiniteValue("gradcheck: non-finite difference quotient");
  return d;
}
}  // namespace detail

/// Max over all coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued f. `x` must be a parameter tensor; its values are restored.
inline double gradcheck(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-5) {
  detail::check_step(h);
  if (!x.requires_grad()) throw DetachedGraph("gradcheck: x must require gradients");
  std::vector<Tensor> params{x};
  auto fn = [&] { return f(x); };
  const auto analytic = detail::analytic_grads(fn, params);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i)
    worst = std::max(worst, detail::rel_error(analytic[0][i], detail::central_difference(fn, x, i, h)));
  x.zero_grad();
  return worst;
}

/// Multi-parameter variant. Checks up to `max_coords` randomly chosen
/// coordinates per tensor (all of them when the tensor is smaller).
inline double gradcheck_params(const std::function<Tensor()>& f, std::vector<Tensor> params, double h = 1e-5,
                               std::size_t max_coords = 16, std::uint64_t seed = 7) {
  detail::check_step(h);
  const auto analytic = detail::analytic_grads(f, params);
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    std::vector<std::size_t> coords(params[t].numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    for (auto i : coords)
      worst = std::max(worst, detail::rel_error(analytic[t][i], detail::central_difference(f, params[t], i, h)));
  }
  for (auto& p : params) p.zero_grad();
  return worst;
}

}  // namespace viewmoe
