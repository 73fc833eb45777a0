// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "viewmoe/error.hpp"
#include "viewmoe/tensor.hpp"

namespace viewmoe {

/// Row-major RGB image in linear radiance, data[(row * width + col) * 3 + c].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, double fill = 0.0) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}

  std::size_t pixels() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
  double& at(int row, int col, int c) { return data[(static_cast<std::size_t>(row) * width + col) * 3 + c]; }
  double at(int row, int col, int c) const { return data[(static_cast<std::size_t>(row) * width + col) * 3 + c]; }

  /// Constant [H, W, 3] tensor view of the pixels.
  Tensor tensor() const {
    return Tensor::constant({static_cast<std::size_t>(height), static_cast<std::size_t>(width), 3}, data);
  }

  bool operator==(const Image&) const = default;
};

inline void require_same_size(const char* op, const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height)
    throw ShapeMismatch(std::string(op) + ": image sizes differ");
}

}  // namespace viewmoe
