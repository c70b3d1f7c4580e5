#pragma once

#include <array>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "ulp/errors.hpp"

namespace ulp {

// Dense row-major ("C order") n-dimensional array of doubles.
struct Tensor {
  std::vector<size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<size_t> s) : shape(std::move(s)), data(numel(shape), 0.0) {}
  Tensor(std::vector<size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape)) throw DimensionError("tensor data does not match shape");
  }

  static size_t numel(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
  }

  size_t size() const { return data.size(); }
  size_t ndim() const { return shape.size(); }

  double& at(std::initializer_list<size_t> idx) { return data[offset(idx)]; }
  double at(std::initializer_list<size_t> idx) const { return data[offset(idx)]; }

  size_t offset(std::initializer_list<size_t> idx) const {
    if (idx.size() != shape.size()) throw DimensionError("index rank mismatch");
    size_t off = 0;
    size_t dim = 0;
    for (size_t i : idx) {
      if (i >= shape[dim]) throw DimensionError("index out of range");
      off = off * shape[dim] + i;
      ++dim;
    }
    return off;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

}  // namespace ulp
