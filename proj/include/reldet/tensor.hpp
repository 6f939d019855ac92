#pragma once

#include <numeric>
#include <stdexcept>

#include "reldet/aligned.hpp"
#include <string>
#include <vector>

namespace reldet {

// Dense row-major tensor of doubles. Activations use NHWC layout.
struct Tensor {
  std::vector<int> shape;
  AlignedVec data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), 0.0);
  }

  static size_t numel_of(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= size_t(d);
    }
    return n;
  }

  size_t numel() const { return data.size(); }
  int dim(int i) const { return shape[size_t(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i)
      s += (i ? "," : "") + std::to_string(shape[i]);
    return s + ")";
  }
};

}  // namespace reldet
