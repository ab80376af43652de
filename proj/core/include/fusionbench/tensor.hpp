#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace fusionbench {

/// Dense planar (channel, row, column) array of doubles.
///
/// Images are stored as 3 x H x W and BEV grids as C_b x H_b x W_b. Values
/// produced by the generator are float-representable so persisting them as
/// 32-bit floats is lossless.
struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  bool empty() const { return data.empty(); }

  double& operator()(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double operator()(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  std::span<double> plane(int c) {
    return {data.data() + static_cast<std::size_t>(c) * plane_size(), plane_size()};
  }
  std::span<const double> plane(int c) const {
    return {data.data() + static_cast<std::size_t>(c) * plane_size(), plane_size()};
  }

  bool same_shape(const Tensor& other) const {
    return channels == other.channels && height == other.height && width == other.width;
  }

  void fill(double value) { std::fill(data.begin(), data.end(), value); }

  bool operator==(const Tensor& other) const = default;
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.channels, t.height, t.width); }

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Round every element through float32 so the tensor survives a float round trip exactly.
inline void round_to_float(Tensor& t) {
  for (double& x : t.data) x = static_cast<double>(static_cast<float>(x));
}

inline void clip(Tensor& t, double lo, double hi) {
  for (double& x : t.data) x = x < lo ? lo : (x > hi ? hi : x);
}

}  // namespace fusionbench
