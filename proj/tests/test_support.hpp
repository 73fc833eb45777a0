// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test suites. The finite-difference routine here is a
// separate implementation from viewmoe::gradcheck so each checks the other.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "viewmoe/tensor.hpp"

namespace testing_support {

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

/// Central-difference gradient of a scalar function of one parameter tensor.
inline std::vector<double> fd_gradient(const std::function<double()>& f, viewmoe::Tensor& x, double h) {
  std::vector<double> g(x.numel());
  auto v = x.mutable_values();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double orig = v[i];
    v[i] = orig + h;
    const double fp = f();
    v[i] = orig - h;
    const double fm = f();
    v[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline std::vector<double> tape_gradient(const std::function<viewmoe::Tensor()>& f, viewmoe::Tensor& x) {
  x.zero_grad();
  viewmoe::Tape tape;
  {
    viewmoe::TapeScope scope(tape);
    tape.backward(f());
  }
  auto g = x.grad();
  x.zero_grad();
  return g;
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(a[i])));
  return worst;
}

}  // namespace testing_support
