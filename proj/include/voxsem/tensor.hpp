#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxsem {

// Dense row-major tensor of 64-bit floats.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel(shape)), 0.0);
  }
  Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<size_t>(numel(shape)) != data.size())
      throw std::invalid_argument("tensor: shape/data size mismatch");
  }

  static long numel(const std::vector<int>& s) {
    long n = 1;
    for (int d : s) {
      if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension");
      n *= d;
    }
    return n;
  }

  long size() const { return static_cast<long>(data.size()); }
  double& operator[](long i) { return data[static_cast<size_t>(i)]; }
  double operator[](long i) const { return data[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
    return s + "]";
  }
};

inline void accumulate(Tensor& dst, const Tensor& src) {
  if (dst.data.size() != src.data.size()) throw std::invalid_argument("accumulate: size mismatch");
  for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace voxsem
