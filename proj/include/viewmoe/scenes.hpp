// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Procedural scenes of spheres, boxes and a ground patch under one directional
// light, and the analytic ray tracer that renders their ground-truth images.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include "viewmoe/geometry.hpp"
#include "viewmoe/image.hpp"
#include "viewmoe/parallel.hpp"
#include "viewmoe/rng.hpp"

namespace viewmoe {

inline constexpr int kGeneratorVersion = 1;

enum class PrimitiveKind { Sphere, Box, Ground };

struct Material {
  Vec3 albedo = Vec3::Constant(0.5);  // components in [0, 1]
  double specular = 0.0;              // Phong strength, 0 for matte
  double shininess = 16.0;            // Phong exponent
};

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::Sphere;
  Vec3 center = Vec3::Zero();
  double radius = 0.3;                        // sphere
  Vec3 half_extent = Vec3::Constant(0.2);     // box, ground patch (z extent ignored)
  Material material;
};

struct SyntheticScene {
  std::uint64_t seed = 0;
  std::vector<Primitive> primitives;
  Vec3 light_dir = Vec3(0.3, -0.4, 1.0).normalized();  // unit, towards the light
  double ambient = 0.25;
  Vec3 background = Vec3::Constant(0.1);

  bool has_specular() const {
    return std::any_of(primitives.begin(), primitives.end(), [](const Primitive& p) { return p.material.specular > 0; });
  }
};

struct SceneOptions {
  int min_primitives = 1;
  int max_primitives = 4;
};

/// Deterministic function of (seed, options). Everything lies within the
/// cube [-1, 1]^3.
inline SyntheticScene generate_scene(std::uint64_t seed, const SceneOptions& opt = {}) {
  if (opt.min_primitives < 1 || opt.max_primitives > 4 || opt.min_primitives > opt.max_primitives)
    throw ConfigError("scene primitive count must satisfy 1 <= min <= max <= 4");
  Rng rng(seed * 0x9E3779B97F4A7C15ULL + 0x5CE4E5ULL);
  SyntheticScene s;
  s.seed = seed;
  const double az = rng.uniform(0, 2 * std::numbers::pi), el = rng.uniform(0.5, 1.2);
  s.light_dir = Vec3(std::cos(az) * std::cos(el), std::sin(az) * std::cos(el), std::sin(el));
  s.ambient = rng.uniform(0.15, 0.35);
  s.background = Vec3(rng.uniform(0.02, 0.3), rng.uniform(0.02, 0.3), rng.uniform(0.02, 0.3));

  const int count = opt.min_primitives + static_cast<int>(rng.index(opt.max_primitives - opt.min_primitives + 1));
  bool ground = false;
  for (int i = 0; i < count; ++i) {
    Primitive p;
    const double pick = rng.uniform();
    if (!ground && count > 1 && pick < 0.2) {
      ground = true;
      p.kind = PrimitiveKind::Ground;
      p.center = Vec3(0, 0, -0.6);
      p.half_extent = Vec3(1.0, 1.0, 0.0);
    } else if (pick < 0.6) {
      p.kind = PrimitiveKind::Sphere;
      p.radius = rng.uniform(0.15, 0.4);
      p.center = Vec3(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3));
    } else {
      p.kind = PrimitiveKind::Box;
      p.half_extent = Vec3(rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3));
      p.center = Vec3(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3));
    }
    p.material.albedo = Vec3(rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0));
    if (rng.uniform() < 0.4) {
      p.material.specular = rng.uniform(0.3, 0.8);
      p.material.shininess = rng.uniform(8.0, 64.0);
    }
    s.primitives.push_back(p);
  }
  return s;
}

struct Hit {
  double t;
  Vec3 normal;
  const Primitive* primitive;
};

/// Nearest intersection with t > 1e-9 along origin + t * dir (dir unit).
inline std::optional<Hit> intersect(const Primitive& p, const Vec3& origin, const Vec3& dir) {
  constexpr double kMin = 1e-9;
  switch (p.kind) {
    case PrimitiveKind::Sphere: {
      const Vec3 oc = origin - p.center;
      const double b = oc.dot(dir), c = oc.squaredNorm() - p.radius * p.radius;
      const double disc = b * b - c;
      if (disc < 0) return std::nullopt;
      const double sq = std::sqrt(disc);
      double t = -b - sq;
      if (t <= kMin) t = -b + sq;
      if (t <= kMin) return std::nullopt;
      return Hit{t, (origin + t * dir - p.center) / p.radius, &p};
    }
    case PrimitiveKind::Box: {
      double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
      int axis0 = 0, axis1 = 0;
      for (int a = 0; a < 3; ++a) {
        const double lo = p.center[a] - p.half_extent[a], hi = p.center[a] + p.half_extent[a];
        if (dir[a] == 0.0) {
          if (origin[a] < lo || origin[a] > hi) return std::nullopt;
          continue;
        }
        double ta = (lo - origin[a]) / dir[a], tb = (hi - origin[a]) / dir[a];
        if (ta > tb) std::swap(ta, tb);
        if (ta > t0) {
          t0 = ta;
          axis0 = a;
        }
        if (tb < t1) {
          t1 = tb;
          axis1 = a;
        }
      }
      if (t0 > t1 || t1 <= kMin) return std::nullopt;
      const bool inside = t0 <= kMin;
      const double t = inside ? t1 : t0;
      const int axis = inside ? axis1 : axis0;
      Vec3 n = Vec3::Zero();
      n[axis] = (origin[axis] + t * dir[axis] > p.center[axis]) ? 1.0 : -1.0;
      return Hit{t, n, &p};
    }
    case PrimitiveKind::Ground: {
      if (dir.z() == 0.0) return std::nullopt;
      const double t = (p.center.z() - origin.z()) / dir.z();
      if (t <= kMin) return std::nullopt;
      const Vec3 x = origin + t * dir;
      if (std::abs(x.x() - p.center.x()) > p.half_extent.x() || std::abs(x.y() - p.center.y()) > p.half_extent.y())
        return std::nullopt;
      return Hit{t, Vec3(0, 0, origin.z() > p.center.z() ? 1.0 : -1.0), &p};
    }
  }
  return std::nullopt;
}

/// Linear radiance along one ray: nearest hit, Lambert plus Phong, no shadows.
inline Vec3 trace(const SyntheticScene& s, const Vec3& origin, const Vec3& dir) {
  std::optional<Hit> best;
  for (const auto& p : s.primitives) {
    auto h = intersect(p, origin, dir);
    if (h && (!best || h->t < best->t)) best = h;
  }
  if (!best) return s.background;
  const Material& m = best->primitive->material;
  Vec3 n = best->normal;
  if (n.dot(dir) > 0) n = -n;  // shade the side facing the viewer
  const double diffuse = std::max(0.0, n.dot(s.light_dir));
  Vec3 c = m.albedo * (s.ambient + (1.0 - s.ambient) * diffuse);
  if (m.specular > 0 && diffuse > 0) {
    const Vec3 r = 2.0 * n.dot(s.light_dir) * n - s.light_dir;
    c += Vec3::Constant(m.specular * std::pow(std::max(0.0, r.dot(-dir)), m.shininess));
  }
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

/// Ground-truth image through pixel centers.
inline Image oracle_render(const SyntheticScene& s, const Camera& cam) {
  cam.validate();
  Image im(cam.width, cam.height);
  parallel_for(static_cast<std::size_t>(cam.height), 4, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t row = lo; row < hi; ++row)
      for (int col = 0; col < cam.width; ++col) {
        const Vec3 c = trace(s, cam.center, pixel_direction(cam, col + 0.5, static_cast<double>(row) + 0.5));
        for (int k = 0; k < 3; ++k) im.at(static_cast<int>(row), col, k) = c[k];
      }
  });
  return im;
}

/// Views on two rings around the origin at the given distance.
inline std::vector<Camera> ring_cameras(std::size_t n, int size, double distance, std::uint64_t seed) {
  Rng rng(seed ^ 0xCA3E7A5ULL);
  const double phase = rng.uniform(0, 2 * std::numbers::pi);
  std::vector<Camera> cams;
  for (std::size_t i = 0; i < n; ++i) {
    const double az = phase + 2 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
    const double el = (i % 2 ? 0.55 : 0.3);
    const Vec3 eye = distance * Vec3(std::cos(az) * std::cos(el), std::sin(az) * std::cos(el), std::sin(el));
    cams.push_back(Camera::look_at(eye, Vec3::Zero(), Vec3(0, 0, 1), 1.2 * size, size, size));
  }
  return cams;
}

}  // namespace viewmoe
