// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor ops. Shapes must match exactly; the only broadcast is
// a rank-1 bias added along the trailing dimension.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "viewmoe/parallel.hpp"
#include "viewmoe/tensor.hpp"

namespace viewmoe {

namespace kernels {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

/// Rows per independently computed block. Fixed, so results do not depend on
/// the worker count.
inline constexpr std::size_t kGemmRows = 256;

inline Eigen::Index ix(std::size_t n) { return static_cast<Eigen::Index>(n); }

/// C[M,N] (+)= op(A) * op(B), row-major storage. op transposes when the flag is
/// set; A is then stored [K,M] and B [N,K]. Row blocks of C are computed
/// independently.
inline void gemm(std::size_t M, std::size_t N, std::size_t K, const double* A, bool ta, const double* B, bool tb,
                 double* C, bool accumulate) {
  if (M == 0 || N == 0) return;
  if (K == 0) {
    if (!accumulate) std::fill(C, C + M * N, 0.0);
    return;
  }
  if (M * N * K <= 4096) {  // dispatch overhead dominates below this size
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < K; ++k)
          acc += (ta ? A[k * M + i] : A[i * K + k]) * (tb ? B[j * K + k] : B[k * N + j]);
        C[i * N + j] = accumulate ? C[i * N + j] + acc : acc;
      }
    return;
  }
  const std::size_t blocks = (M + kGemmRows - 1) / kGemmRows;
  parallel_for(blocks, 1, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t blk = lo; blk < hi; ++blk) {
      const std::size_t r0 = blk * kGemmRows, rows = std::min(kGemmRows, M - r0);
      MutMap c(C + r0 * N, ix(rows), ix(N));
      const ConstMap a = ta ? ConstMap(A, ix(K), ix(M)) : ConstMap(A + r0 * K, ix(rows), ix(K));
      const ConstMap b = tb ? ConstMap(B, ix(N), ix(K)) : ConstMap(B, ix(K), ix(N));
      auto run = [&](const auto& lhs, const auto& rhs) {
        if (accumulate)
          c.noalias() += lhs * rhs;
        else
          c.noalias() = lhs * rhs;
      };
      if (ta && tb)
        run(a.middleCols(ix(r0), ix(rows)).transpose(), b.transpose());
      else if (ta)
        run(a.middleCols(ix(r0), ix(rows)).transpose(), b);
      else if (tb)
        run(a, b.transpose());
      else
        run(a, b);
    }
  });
}

inline void gemm(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C,
                 bool accumulate) {
  gemm(M, N, K, A, false, B, false, C, accumulate);
}

}  // namespace kernels

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_rank(const char* op, const Tensor& a, std::size_t r) {
  if (a.rank() != r)
    throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(a.shape()));
}

inline std::size_t last_dim(const Tensor& a) { return a.shape().empty() ? 1 : a.shape().back(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// a + b for identical shapes, or a[..., n] + b[n] (bias along the trailing dim).
inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value(i) + b.value(i);
    auto pa = a.ptr(), pb = b.ptr();
    return detail::make_result("add", a.shape(), std::move(v), {&a, &b}, [pa, pb](Node& out) {
      for (Node* p : {pa.get(), pb.get()})
        if (p->requires_grad) p->accumulate_grad(out.grad);
    });
  }
  if (b.rank() == 1 && b.dim(0) == detail::last_dim(a)) {
    const std::size_t n = b.dim(0);
    std::vector<double> v(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t r = 0; r < v.size(); r += n)
      for (std::size_t j = 0; j < n; ++j) v[r + j] = av[r + j] + bv[j];
    auto pa = a.ptr(), pb = b.ptr();
    return detail::make_result("add_bias", a.shape(), std::move(v), {&a, &b}, [pa, pb, n](Node& out) {
      if (pa->requires_grad) pa->accumulate_grad(out.grad);
      if (pb->requires_grad) {
        auto g = pb->grad_buffer();
        for (std::size_t r = 0; r < out.grad.size(); r += n)
          for (std::size_t j = 0; j < n; ++j) g[j] += out.grad[r + j];
      }
    });
  }
  throw ShapeMismatch("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value(i) - b.value(i);
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make_result("sub", a.shape(), std::move(v), {&a, &b}, [pa, pb](Node& out) {
    if (pa->requires_grad) {
      auto g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    }
    if (pb->requires_grad) {
      auto g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= out.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value(i) * b.value(i);
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make_result("mul", a.shape(), std::move(v), {&a, &b}, [pa, pb](Node& out) {
    if (pa->requires_grad) {
      auto g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * pa->value[i];
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("div", a, b);
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (b.value(i) == 0.0) throw DomainError("div: division by zero");
    v[i] = a.value(i) / b.value(i);
  }
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make_result("div", a.shape(), std::move(v), {&a, &b}, [pa, pb](Node& out) {
    if (pa->requires_grad) {
      auto g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] / pb->value[i];
    }
    if (pb->requires_grad) {
      auto g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= out.grad[i] * out.value[i] / pb->value[i];
    }
  });
}

namespace detail {
/// Elementwise op whose derivative is a function of (input, output).
template <class F, class D>
Tensor pointwise(const char* op, const Tensor& a, F f, D dfdx) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(a.value(i));
  auto pa = a.ptr();
  return make_result(op, a.shape(), std::move(v), {&a}, [pa, dfdx](Node& out) {
    auto g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * dfdx(pa->value[i], out.value[i]);
  });
}
}  // namespace detail

inline Tensor scale(const Tensor& a, double s) {
  return detail::pointwise("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::pointwise("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor square(const Tensor& a) {
  return detail::pointwise("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor exp(const Tensor& a) {
  return detail::pointwise("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  for (double x : a.values())
    if (!(x > 0.0)) throw DomainError("log: non-positive input");
  return detail::pointwise("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor relu(const Tensor& a) {
  return detail::pointwise(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& a) {
  return detail::pointwise(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + x * pdf;
      });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::pointwise(
      "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeMismatch("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<double> v(a.values().begin(), a.values().end());
  auto pa = a.ptr();
  return detail::make_result("reshape", std::move(shape), std::move(v), {&a},
                             [pa](Node& out) { pa->accumulate_grad(out.grad); });
}

/// out.shape[i] = a.shape[axes[i]].
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  if (axes.size() != r) throw ShapeMismatch("permute: axis count mismatch");
  std::vector<bool> seen(r, false);
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) throw ShapeMismatch("permute: invalid axes");
    seen[ax] = true;
  }
  Shape out_shape(r);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.dim(i);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = a.dim(axes[i]);
    src_stride[i] = in_strides[axes[i]];
  }
  // Trailing axes that stay in place form contiguous runs; map[out_run] = in_offset.
  std::size_t keep = 0, run = 1;
  while (keep < r && axes[r - 1 - keep] == r - 1 - keep) run *= a.dim(r - 1 - keep++);
  const std::size_t outer = r - keep;
  const std::size_t n = a.numel();
  const std::size_t runs = run ? n / run : 0;
  std::vector<std::size_t> map(runs);
  std::vector<std::size_t> idx(outer, 0);
  for (std::size_t o = 0; o < runs; ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < outer; ++i) src += idx[i] * src_stride[i];
    map[o] = src;
    for (std::size_t i = outer; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> v(n);
  const double* av = a.values().data();
  for (std::size_t o = 0; o < runs; ++o) std::copy_n(av + map[o], run, v.data() + o * run);
  auto pa = a.ptr();
  return detail::make_result("permute", std::move(out_shape), std::move(v), {&a},
                             [pa, run, map = std::move(map)](Node& out) {
                               double* g = pa->grad_buffer().data();
                               for (std::size_t o = 0; o < map.size(); ++o)
                                 for (std::size_t j = 0; j < run; ++j) g[map[o] + j] += out.grad[o * run + j];
                             });
}

/// Rows [begin, end) along the first dimension.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0 || begin > end || end > a.dim(0)) throw ShapeMismatch("slice_rows: range out of bounds");
  const std::size_t row = a.numel() / a.dim(0);
  Shape s = a.shape();
  s[0] = end - begin;
  std::vector<double> v(a.values().begin() + begin * row, a.values().begin() + end * row);
  auto pa = a.ptr();
  return detail::make_result("slice_rows", std::move(s), std::move(v), {&a}, [pa, begin, row](Node& out) {
    auto g = pa->grad_buffer();
    for (std::size_t i = 0; i < out.grad.size(); ++i) g[begin * row + i] += out.grad[i];
  });
}

/// Concatenates 2-D tensors with equal row counts along the last dimension.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols: no inputs");
  const std::size_t rows = parts[0].dim(0);
  std::size_t cols = 0;
  std::vector<std::size_t> offs;
  for (const auto& p : parts) {
    detail::require_rank("concat_cols", p, 2);
    if (p.dim(0) != rows) throw ShapeMismatch("concat_cols: row count mismatch");
    offs.push_back(cols);
    cols += p.dim(1);
  }
  std::vector<double> v(rows * cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t c = parts[k].dim(1);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) v[r * cols + offs[k] + j] = parts[k].value(r * c + j);
  }
  std::vector<std::shared_ptr<Node>> ps;
  for (const auto& p : parts) ps.push_back(p.ptr());
  return detail::make_result("concat_cols", {rows, cols}, std::move(v), parts, [ps, offs, rows, cols](Node& out) {
    for (std::size_t k = 0; k < ps.size(); ++k) {
      if (!ps[k]->requires_grad) continue;
      auto g = ps[k]->grad_buffer();
      const std::size_t c = ps[k]->shape[1];
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) g[r * c + j] += out.grad[r * cols + offs[k] + j];
    }
  });
}

/// Concatenates along the first dimension; trailing dimensions must agree.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows: no inputs");
  Shape s = parts[0].shape();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != s.size() || !std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1))
      throw ShapeMismatch("concat_rows: trailing shape mismatch");
    rows += p.dim(0);
  }
  s[0] = rows;
  std::vector<double> v;
  v.reserve(shape_numel(s));
  std::vector<std::size_t> offs;
  for (const auto& p : parts) {
    offs.push_back(v.size());
    v.insert(v.end(), p.values().begin(), p.values().end());
  }
  std::vector<std::shared_ptr<Node>> ps;
  for (const auto& p : parts) ps.push_back(p.ptr());
  return detail::make_result("concat_rows", std::move(s), std::move(v), parts, [ps, offs](Node& out) {
    for (std::size_t k = 0; k < ps.size(); ++k) {
      if (!ps[k]->requires_grad) continue;
      auto g = ps[k]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[offs[k] + i];
    }
  });
}

/// Broadcasts a [c] or [1, c] tensor to [n, c].
inline Tensor repeat_rows(const Tensor& a, std::size_t n) {
  if (!(a.rank() == 1 || (a.rank() == 2 && a.dim(0) == 1)))
    throw ShapeMismatch("repeat_rows: expected [c] or [1,c], got " + shape_str(a.shape()));
  const std::size_t c = a.numel();
  std::vector<double> v(n * c);
  for (std::size_t r = 0; r < n; ++r) std::copy(a.values().begin(), a.values().end(), v.begin() + r * c);
  auto pa = a.ptr();
  return detail::make_result("repeat_rows", {n, c}, std::move(v), {&a}, [pa, c](Node& out) {
    auto g = pa->grad_buffer();
    for (std::size_t i = 0; i < out.grad.size(); ++i) g[i % c] += out.grad[i];
  });
}

/// Broadcasts a single-element tensor to `shape`.
inline Tensor expand_scalar(const Tensor& s, Shape shape) {
  if (s.numel() != 1) throw NotScalar("expand_scalar: input is " + shape_str(s.shape()));
  const std::size_t n = shape_numel(shape);
  auto ps = s.ptr();
  return detail::make_result("expand_scalar", std::move(shape), std::vector<double>(n, s.value(0)), {&s},
                             [ps](Node& out) {
                               double acc = 0.0;
                               for (double g : out.grad) acc += g;
                               ps->grad_buffer()[0] += acc;
                             });
}

// ---------------------------------------------------------------------------
// Indexing

/// Selects rows of a [n, ...] tensor.
inline Tensor gather_rows(const Tensor& a, std::vector<std::size_t> idx) {
  if (a.rank() == 0) throw ShapeMismatch("gather_rows: scalar input");
  const std::size_t n = a.dim(0);
  const std::size_t row = n ? a.numel() / n : 0;
  Shape s = a.shape();
  s[0] = idx.size();
  std::vector<double> v(idx.size() * row);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw ShapeMismatch("gather_rows: index out of range");
    std::copy_n(a.values().begin() + idx[r] * row, row, v.begin() + r * row);
  }
  auto pa = a.ptr();
  return detail::make_result("gather_rows", std::move(s), std::move(v), {&a}, [pa, idx = std::move(idx), row](Node& out) {
    auto g = pa->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < row; ++j) g[idx[r] * row + j] += out.grad[r * row + j];
  });
}

/// out[idx[r]] += a[r]; out has n rows.
inline Tensor scatter_add_rows(const Tensor& a, std::vector<std::size_t> idx, std::size_t n) {
  if (a.rank() == 0 || a.dim(0) != idx.size()) throw ShapeMismatch("scatter_add_rows: index count mismatch");
  const std::size_t row = idx.empty() ? (a.numel()) : a.numel() / idx.size();
  Shape s = a.shape();
  s[0] = n;
  std::vector<double> v(n * row, 0.0);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw ShapeMismatch("scatter_add_rows: index out of range");
    for (std::size_t j = 0; j < row; ++j) v[idx[r] * row + j] += a.value(r * row + j);
  }
  auto pa = a.ptr();
  return detail::make_result("scatter_add_rows", std::move(s), std::move(v), {&a},
                             [pa, idx = std::move(idx), row](Node& out) {
                               auto g = pa->grad_buffer();
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 for (std::size_t j = 0; j < row; ++j) g[r * row + j] += out.grad[idx[r] * row + j];
                             });
}

/// Flat-index element selection; result has shape [idx.size()].
inline Tensor gather_elements(const Tensor& a, std::vector<std::size_t> idx) {
  std::vector<double> v(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= a.numel()) throw ShapeMismatch("gather_elements: index out of range");
    v[i] = a.value(idx[i]);
  }
  auto pa = a.ptr();
  const std::size_t m = idx.size();
  return detail::make_result("gather_elements", {m}, std::move(v), {&a}, [pa, idx = std::move(idx)](Node& out) {
    auto g = pa->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += out.grad[i];
  });
}

/// out[p] = sum_j weight[p*k + j] * table[index[p*k + j]] for a [T, C] table.
/// Weights are constants; gradients flow into the table only.
inline Tensor weighted_gather(const Tensor& table, std::vector<std::size_t> index, std::vector<double> weight,
                              std::size_t k) {
  detail::require_rank("weighted_gather", table, 2);
  if (index.size() != weight.size() || k == 0 || index.size() % k)
    throw ShapeMismatch("weighted_gather: index/weight layout mismatch");
  const std::size_t T = table.dim(0), C = table.dim(1), P = index.size() / k;
  std::vector<double> v(P * C, 0.0);
  const auto tv = table.values();
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t e = p * k + j;
      if (weight[e] == 0.0) continue;
      if (index[e] >= T) throw ShapeMismatch("weighted_gather: index out of range");
      const double w = weight[e];
      const double* src = tv.data() + index[e] * C;
      double* dst = v.data() + p * C;
      for (std::size_t c = 0; c < C; ++c) dst[c] += w * src[c];
    }
  auto pt = table.ptr();
  return detail::make_result("weighted_gather", {P, C}, std::move(v), {&table},
                             [pt, index = std::move(index), weight = std::move(weight), k, C](Node& out) {
                               auto g = pt->grad_buffer();
                               const std::size_t P = index.size() / k;
                               for (std::size_t p = 0; p < P; ++p)
                                 for (std::size_t j = 0; j < k; ++j) {
                                   const std::size_t e = p * k + j;
                                   if (weight[e] == 0.0) continue;
                                   double* dst = g.data() + index[e] * C;
                                   const double* src = out.grad.data() + p * C;
                                   for (std::size_t c = 0; c < C; ++c) dst[c] += weight[e] * src[c];
                                 }
                             });
}

/// Multiplies row r of x [n, c] by s[r].
inline Tensor rowscale(const Tensor& x, const Tensor& s) {
  detail::require_rank("rowscale", x, 2);
  if (s.numel() != x.dim(0)) throw ShapeMismatch("rowscale: scale count mismatch");
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<double> v(n * c);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) v[r * c + j] = x.value(r * c + j) * s.value(r);
  auto px = x.ptr(), ps = s.ptr();
  return detail::make_result("rowscale", x.shape(), std::move(v), {&x, &s}, [px, ps, n, c](Node& out) {
    if (px->requires_grad) {
      auto g = px->grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) g[r * c + j] += out.grad[r * c + j] * ps->value[r];
    }
    if (ps->requires_grad) {
      auto g = ps->grad_buffer();
      for (std::size_t r = 0; r < n; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += out.grad[r * c + j] * px->value[r * c + j];
        g[r] += acc;
      }
    }
  });
}

/// Zero-padded 3x3 patches of an [H, W, C] map, laid out as [H*W, 9*C]
/// (kernel row, kernel col, channel).
inline Tensor im2col3x3(const Tensor& x) {
  detail::require_rank("im2col3x3", x, 3);
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  std::vector<double> v(H * W * 9 * C, 0.0);
  // src[dst] or -1
  std::vector<std::int64_t> map(v.size(), -1);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          const auto si = static_cast<std::int64_t>(i) + di, sj = static_cast<std::int64_t>(j) + dj;
          if (si < 0 || sj < 0 || si >= static_cast<std::int64_t>(H) || sj >= static_cast<std::int64_t>(W)) continue;
          const std::size_t base = (i * W + j) * 9 * C + static_cast<std::size_t>((di + 1) * 3 + (dj + 1)) * C;
          for (std::size_t c = 0; c < C; ++c) {
            const auto src = (static_cast<std::size_t>(si) * W + static_cast<std::size_t>(sj)) * C + c;
            v[base + c] = x.value(src);
            map[base + c] = static_cast<std::int64_t>(src);
          }
        }
  auto px = x.ptr();
  return detail::make_result("im2col3x3", {H * W, 9 * C}, std::move(v), {&x}, [px, map = std::move(map)](Node& out) {
    auto g = px->grad_buffer();
    for (std::size_t d = 0; d < map.size(); ++d)
      if (map[d] >= 0) g[static_cast<std::size_t>(map[d])] += out.grad[d];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<double> v(M * N);
  kernels::gemm(M, N, K, a.values().data(), b.values().data(), v.data(), false);
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make_result("matmul", {M, N}, std::move(v), {&a, &b}, [pa, pb, M, N, K](Node& out) {
    if (pa->requires_grad) {
      // dA = dC * B^T
      kernels::gemm(M, K, N, out.grad.data(), false, pb->value.data(), true, pa->grad_buffer().data(), true);
    }
    if (pb->requires_grad) {
      // dB = A^T * dC
      kernels::gemm(K, N, M, pa->value.data(), true, out.grad.data(), false, pb->grad_buffer().data(), true);
    }
  });
}

namespace detail {
inline Tensor bmm_impl(const Tensor& a, const Tensor& b, bool b_transposed) {
  require_rank("bmm", a, 3);
  require_rank("bmm", b, 3);
  const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2);
  const std::size_t N = b_transposed ? b.dim(1) : b.dim(2);
  const std::size_t bk = b_transposed ? b.dim(2) : b.dim(1);
  if (b.dim(0) != B || bk != K) throw ShapeMismatch("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> v(B * M * N);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  parallel_for(B, 32, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t z = lo; z < hi; ++z)
      kernels::gemm(M, N, K, av + z * M * K, false, bv + z * K * N, b_transposed, v.data() + z * M * N, false);
  });
  auto pa = a.ptr(), pb = b.ptr();
  return make_result(b_transposed ? "bmm_nt" : "bmm", {B, M, N}, std::move(v), {&a, &b},
                     [pa, pb, B, M, N, K, b_transposed](Node& out) {
                       const double* G = out.grad.data();
                       if (pa->requires_grad) {
                         // dA = G * op(B)^T
                         double* ga = pa->grad_buffer().data();
                         for (std::size_t z = 0; z < B; ++z)
                           kernels::gemm(M, K, N, G + z * M * N, false, pb->value.data() + z * K * N, !b_transposed,
                                         ga + z * M * K, true);
                       }
                       if (pb->requires_grad) {
                         double* gb = pb->grad_buffer().data();
                         for (std::size_t z = 0; z < B; ++z) {
                           if (b_transposed)  // dB[N,K] = G^T * A
                             kernels::gemm(N, K, M, G + z * M * N, true, pa->value.data() + z * M * K, false,
                                           gb + z * K * N, true);
                           else  // dB[K,N] = A^T * G
                             kernels::gemm(K, N, M, pa->value.data() + z * M * K, true, G + z * M * N, false,
                                           gb + z * K * N, true);
                         }
                       }
                     });
}
}  // namespace detail

/// Batched product [B,M,K] x [B,K,N] -> [B,M,N].
inline Tensor bmm(const Tensor& a, const Tensor& b) { return detail::bmm_impl(a, b, false); }
/// Batched product with the second operand transposed: [B,M,K] x [B,N,K]^T -> [B,M,N].
inline Tensor bmm_nt(const Tensor& a, const Tensor& b) { return detail::bmm_impl(a, b, true); }

// ---------------------------------------------------------------------------
// Normalization and reductions

/// Softmax over the last dimension. With a mask (1 = keep), masked entries get
/// exactly zero probability; a row with no kept entry is a DomainError.
inline Tensor softmax(const Tensor& a, std::span<const std::uint8_t> mask = {}) {
  if (!mask.empty() && mask.size() != a.numel()) throw ShapeMismatch("softmax: mask size mismatch");
  const std::size_t n = detail::last_dim(a);
  const std::size_t rows = n ? a.numel() / n : 0;
  std::vector<double> v(a.numel(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.values().data() + r * n;
    double* y = v.data() + r * n;
    auto keep = [&](std::size_t j) { return mask.empty() || mask[r * n + j]; };
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (keep(j)) mx = std::max(mx, x[j]);
    if (mx == -std::numeric_limits<double>::infinity()) throw DomainError("softmax: row has no unmasked entry");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (keep(j)) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  auto pa = a.ptr();
  return detail::make_result(mask.empty() ? "softmax" : "masked_softmax", a.shape(), std::move(v), {&a},
                             [pa, n, rows](Node& out) {
                               auto g = pa->grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* y = out.value.data() + r * n;
                                 const double* dy = out.grad.data() + r * n;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
                                 for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
                               }
                             });
}

/// Layer normalization over the last dimension with affine gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t n = detail::last_dim(x);
  if (gamma.numel() != n || beta.numel() != n) throw ShapeMismatch("layer_norm: affine size mismatch");
  const std::size_t rows = x.numel() / n;
  std::vector<double> v(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.values().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xr[j] - mu) * inv_std[r];
      v[r * n + j] = gamma.value(j) * xhat[r * n + j] + beta.value(j);
    }
  }
  auto px = x.ptr(), pg = gamma.ptr(), pb = beta.ptr();
  return detail::make_result("layer_norm", x.shape(), std::move(v), {&x, &gamma, &beta},
                             [px, pg, pb, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& out) {
                               const double* dy = out.grad.data();
                               if (pg->requires_grad) {
                                 auto g = pg->grad_buffer();
                                 for (std::size_t i = 0; i < out.grad.size(); i += n)
                                   for (std::size_t j = 0; j < n; ++j) g[j] += dy[i + j] * xhat[i + j];
                               }
                               if (pb->requires_grad) {
                                 auto g = pb->grad_buffer();
                                 for (std::size_t i = 0; i < out.grad.size(); i += n)
                                   for (std::size_t j = 0; j < n; ++j) g[j] += dy[i + j];
                               }
                               if (px->requires_grad) {
                                 auto g = px->grad_buffer();
                                 const double inv_n = 1.0 / static_cast<double>(n);
                                 for (std::size_t r = 0; r < rows; ++r) {
                                   double m1 = 0.0, m2 = 0.0;
                                   for (std::size_t j = 0; j < n; ++j) {
                                     const double dxh = dy[r * n + j] * pg->value[j];
                                     m1 += dxh;
                                     m2 += dxh * xhat[r * n + j];
                                   }
                                   m1 *= inv_n;
                                   m2 *= inv_n;
                                   for (std::size_t j = 0; j < n; ++j) {
                                     const double dxh = dy[r * n + j] * pg->value[j];
                                     g[r * n + j] += inv_std[r] * (dxh - m1 - xhat[r * n + j] * m2);
                                   }
                                 }
                               }
                             });
}

/// Sum of all elements, shape [1].
inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double x : a.values()) acc += x;
  auto pa = a.ptr();
  return detail::make_result("sum", {1}, {acc}, {&a}, [pa](Node& out) {
    auto g = pa->grad_buffer();
    for (double& x : g) x += out.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeMismatch("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

/// Sums over the last dimension; [..., n] -> [...].
inline Tensor sum_last(const Tensor& a) {
  const std::size_t n = detail::last_dim(a);
  const std::size_t rows = a.numel() / n;
  Shape s = a.shape();
  s.pop_back();
  if (s.empty()) s = {1};
  std::vector<double> v(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) v[r] += a.value(r * n + j);
  auto pa = a.ptr();
  return detail::make_result("sum_last", std::move(s), std::move(v), {&a}, [pa, n](Node& out) {
    auto g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i / n];
  });
}

/// Column means of a [n, c] tensor -> [c].
inline Tensor mean_rows(const Tensor& a) {
  detail::require_rank("mean_rows", a, 2);
  const std::size_t n = a.dim(0), c = a.dim(1);
  if (n == 0) throw ShapeMismatch("mean_rows: no rows");
  std::vector<double> v(c, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) v[j] += a.value(r * c + j);
  for (double& x : v) x /= static_cast<double>(n);
  auto pa = a.ptr();
  return detail::make_result("mean_rows", {c}, std::move(v), {&a}, [pa, n, c](Node& out) {
    auto g = pa->grad_buffer();
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += out.grad[j] * inv;
  });
}

/// Mean squared difference, shape [1].
inline Tensor mse(const Tensor& a, const Tensor& b) { return mean(square(sub(a, b))); }

}  // namespace viewmoe
