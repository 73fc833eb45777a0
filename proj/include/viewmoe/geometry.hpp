// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Pinhole cameras, ray generation, stratified sampling along rays and the
// point pairing used by the spatial consistency loss.
//
// Camera frame convention: x right, y down, z forward. Pixel (row, col) has its
// center at (u, v) = (col + 0.5, row + 0.5).
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "viewmoe/error.hpp"
#include "viewmoe/rng.hpp"

namespace viewmoe {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct Camera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  Mat3 rotation = Mat3::Identity();  // world_from_camera
  Vec3 center = Vec3::Zero();
  int width = 1, height = 1;

  void validate() const {
    if (!(fx > 0.0 && fy > 0.0)) throw InvalidCamera("focal lengths must be positive");
    if (width <= 0 || height <= 0) throw InvalidCamera("image size must be positive");
    if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height))
      throw InvalidCamera("principal point outside the image");
    if ((rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-10)
      throw InvalidCamera("rotation is not orthonormal");
    if (std::abs(rotation.determinant() - 1.0) > 1e-10) throw InvalidCamera("rotation has det != +1");
  }

  /// Camera at `eye` looking at `target`; `up` is the approximate world up.
  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width, int height) {
    const Vec3 z = (target - eye).normalized();
    const Vec3 x = z.cross(up).normalized();  // right
    const Vec3 y = z.cross(x);                // down
    Camera c;
    c.rotation.col(0) = x;
    c.rotation.col(1) = y;
    c.rotation.col(2) = z;
    c.center = eye;
    c.fx = c.fy = focal;
    c.cx = width / 2.0;
    c.cy = height / 2.0;
    c.width = width;
    c.height = height;
    c.validate();
    return c;
  }
};

struct Projection {
  double u, v, depth;
};

/// Pinhole projection, or nullopt when the point is not in front of the camera.
inline std::optional<Projection> try_project(const Camera& cam, const Vec3& x) {
  const Vec3 p = cam.rotation.transpose() * (x - cam.center);
  if (!(p.z() > 0.0)) return std::nullopt;
  return Projection{cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy, p.z()};
}

inline Projection project(const Camera& cam, const Vec3& x) {
  auto p = try_project(cam, x);
  if (!p) throw BehindCamera("point is behind the camera");
  return *p;
}

/// World point at camera-frame depth `depth` through subpixel (u, v).
inline Vec3 unproject(const Camera& cam, double u, double v, double depth) {
  const Vec3 p((u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth);
  return cam.rotation * p + cam.center;
}

/// Unit direction (world frame) of the ray through (u, v).
inline Vec3 pixel_direction(const Camera& cam, double u, double v) {
  return (cam.rotation * Vec3((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0)).normalized();
}

struct RayBatch {
  std::vector<Vec3> origins;
  std::vector<Vec3> directions;
  std::vector<double> u, v;
  std::vector<int> view;
  std::vector<double> near, far;

  std::size_t size() const { return origins.size(); }

  void push_back(const Vec3& o, const Vec3& d, double pu, double pv, int view_id, double t_near, double t_far) {
    if (!(t_near > 0.0 && t_near < t_far)) throw InvalidCamera("ray bounds must satisfy 0 < near < far");
    origins.push_back(o);
    directions.push_back(d.normalized());
    u.push_back(pu);
    v.push_back(pv);
    view.push_back(view_id);
    near.push_back(t_near);
    far.push_back(t_far);
  }

  void append(const RayBatch& o) {
    for (std::size_t i = 0; i < o.size(); ++i)
      push_back(o.origins[i], o.directions[i], o.u[i], o.v[i], o.view[i], o.near[i], o.far[i]);
  }
};

/// Rays through pixel centers (row, col) of one view.
inline RayBatch rays_for_pixels(const Camera& cam, int view_id, const std::vector<std::pair<int, int>>& pixels,
                                double t_near, double t_far) {
  RayBatch b;
  for (auto [row, col] : pixels) {
    const double u = col + 0.5, v = row + 0.5;
    b.push_back(cam.center, pixel_direction(cam, u, v), u, v, view_id, t_near, t_far);
  }
  return b;
}

/// Samples of a batch, `samples` per ray, stored ray-major.
struct SampledPoints {
  std::size_t rays = 0;
  std::size_t samples = 0;
  std::vector<double> depth;
  std::vector<Vec3> position;

  std::size_t size() const { return depth.size(); }
};

/// Stratified sampling of [near, far]: stratum midpoints, or one uniform draw
/// per stratum when jittering.
inline SampledPoints sample_along_rays(const RayBatch& batch, std::size_t samples, bool jitter, Rng* rng = nullptr) {
  if (samples == 0) throw DomainError("sample_along_rays: need at least one sample");
  if (jitter && !rng) throw DomainError("sample_along_rays: jitter needs an rng");
  SampledPoints out;
  out.rays = batch.size();
  out.samples = samples;
  out.depth.reserve(batch.size() * samples);
  out.position.reserve(batch.size() * samples);
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const double span = batch.far[r] - batch.near[r];
    for (std::size_t k = 0; k < samples; ++k) {
      const double offset = jitter ? rng->uniform() : 0.5;
      const double t = batch.near[r] + (static_cast<double>(k) + offset) / static_cast<double>(samples) * span;
      out.depth.push_back(t);
      out.position.push_back(batch.origins[r] + t * batch.directions[r]);
    }
  }
  return out;
}

/// Ray index pairs (a < b) from the same view whose pixel positions are closer
/// than `eps` pixels.
inline std::vector<std::pair<std::size_t, std::size_t>> filter_close_rays(const RayBatch& batch, double eps) {
  if (!(eps > 0.0)) throw DomainError("filter_close_rays: eps must be positive");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t a = 0; a < batch.size(); ++a)
    for (std::size_t b = a + 1; b < batch.size(); ++b) {
      if (batch.view[a] != batch.view[b]) continue;
      if (std::hypot(batch.u[a] - batch.u[b], batch.v[a] - batch.v[b]) < eps) out.emplace_back(a, b);
    }
  return out;
}

struct PointPair {
  std::size_t a;  // flat sample index on the first ray
  std::size_t b;  // nearest sample on the partner ray
  double distance;
};

struct PointPairSet {
  std::vector<PointPair> pairs;
  std::vector<double> rho;  // softmax of -distance over all pairs

  bool empty() const { return pairs.empty(); }
};

/// Confidence weights exp(-d_i) / sum_j exp(-d_j), shifted by min d for range.
inline std::vector<double> pair_confidence(const std::vector<PointPair>& pairs) {
  std::vector<double> rho(pairs.size());
  if (pairs.empty()) return rho;
  double dmin = std::numeric_limits<double>::infinity();
  for (const auto& p : pairs) dmin = std::min(dmin, p.distance);
  double z = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) z += (rho[i] = std::exp(-(pairs[i].distance - dmin)));
  for (auto& r : rho) r /= z;
  return rho;
}

/// For every sample on ray a of each ray pair, its nearest sample on ray b
/// (brute force). Samples with valid[i] == 0 take no part. Throws EmptyPairSet
/// when no pair survives.
inline PointPairSet pair_nearest_points(const std::vector<std::pair<std::size_t, std::size_t>>& ray_pairs,
                                        const SampledPoints& points, const std::vector<std::uint8_t>& valid = {}) {
  auto ok = [&](std::size_t i) { return valid.empty() || valid[i]; };
  PointPairSet out;
  const std::size_t M = points.samples;
  for (auto [ra, rb] : ray_pairs) {
    for (std::size_t i = 0; i < M; ++i) {
      const std::size_t a = ra * M + i;
      if (!ok(a)) continue;
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < M; ++j) {
        const std::size_t b = rb * M + j;
        if (!ok(b)) continue;
        const double d = (points.position[a] - points.position[b]).norm();
        if (d < best_d) {
          best_d = d;
          best = b;
        }
      }
      if (best_d < std::numeric_limits<double>::infinity()) out.pairs.push_back({a, best, best_d});
    }
  }
  if (out.pairs.empty()) throw EmptyPairSet("no point pairs");
  out.rho = pair_confidence(out.pairs);
  return out;
}

}  // namespace viewmoe
