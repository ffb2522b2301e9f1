#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace gabortex {

// Dense row-major tensor of 64-bit floats. Shape extents are always >= 1 and
// product(shape) == data.size().
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;

  explicit Tensor(std::vector<int> shp, double fill = 0.0) : shape(std::move(shp)) {
    data.assign(static_cast<std::size_t>(checked_numel(shape)), fill);
  }

  static Tensor scalar(double v) {
    Tensor t(std::vector<int>{1});
    t.data[0] = v;
    return t;
  }

  static Tensor from(std::vector<int> shp, std::vector<double> d) {
    Tensor t;
    t.shape = std::move(shp);
    if (checked_numel(t.shape) != static_cast<std::int64_t>(d.size()))
      throw std::invalid_argument("Tensor::from: shape does not match data length");
    t.data = std::move(d);
    return t;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
  bool is_scalar() const { return numel() == 1; }

  double& at(int i) { return data[static_cast<std::size_t>(i)]; }
  double at(int i) const { return data[static_cast<std::size_t>(i)]; }
  double& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  double at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  double& at(int i, int j, int k) {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  double at(int i, int j, int k) const {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double min_value() const {
    double m = data.empty() ? 0.0 : data[0];
    for (double v : data) m = std::min(m, v);
    return m;
  }

  double max_value() const {
    double m = data.empty() ? 0.0 : data[0];
    for (double v : data) m = std::max(m, v);
    return m;
  }

  static std::int64_t checked_numel(const std::vector<int>& shp) {
    if (shp.empty()) throw std::invalid_argument("Tensor: empty shape");
    std::int64_t n = 1;
    for (int e : shp) {
      if (e < 1) throw std::invalid_argument("Tensor: shape extent < 1");
      n *= e;
      if (n > (std::int64_t{1} << 34)) throw std::invalid_argument("Tensor: shape too large");
    }
    return n;
  }
};

inline std::string shape_string(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace gabortex
