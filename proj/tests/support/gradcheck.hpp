#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fusionbench/rng.hpp"
#include "fusionbench/tensor.hpp"

namespace fusionbench::testing {

struct GradCheck {
  int checked = 0;
  int failed = 0;
  double worst = 0.0;  // largest relative error seen
};

/// Compares grad against central differences of f at `count` coordinates of
/// x drawn from `candidates` (flat indices). The relative error is
/// |a - n| / max(|a|, |n|, floor); coordinates whose central difference
/// straddles a clip or ReLU kink are caught by the one-sided agreement test
/// and replaced by another draw.
inline GradCheck check_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                const Tensor& grad, std::vector<std::size_t> candidates,
                                int count, std::uint64_t seed, double h = 1e-6,
                                double tolerance = 1e-2, double floor = 1e-7) {
  GradCheck out;
  Rng rng(seed);
  for (std::size_t i = candidates.size(); i > 1; --i) {
    std::swap(candidates[i - 1], candidates[rng.uniform_int(0, static_cast<int>(i) - 1)]);
  }
  const double f0 = f(x);
  Tensor probe = x;
  for (std::size_t idx : candidates) {
    if (out.checked >= count) break;
    const double keep = probe.data[idx];
    probe.data[idx] = keep + h;
    const double fp = f(probe);
    probe.data[idx] = keep - h;
    const double fm = f(probe);
    probe.data[idx] = keep;
    const double right = (fp - f0) / h;
    const double left = (f0 - fm) / h;
    const double scale = std::max({std::abs(right), std::abs(left), floor});
    if (std::abs(right - left) > 0.1 * scale) continue;  // non-smooth point
    const double numeric = (fp - fm) / (2 * h);
    const double analytic = grad.data[idx];
    const double rel =
        std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
    ++out.checked;
    out.worst = std::max(out.worst, rel);
    if (rel > tolerance) ++out.failed;
  }
  return out;
}

/// Flat indices of every channel inside a pixel rectangle.
inline std::vector<std::size_t> pixels_in(const Tensor& t, int x0, int y0, int x1, int y1) {
  std::vector<std::size_t> out;
  x0 = std::max(x0, 0);
  y0 = std::max(y0, 0);
  x1 = std::min(x1, t.width);
  y1 = std::min(y1, t.height);
  for (int c = 0; c < t.channels; ++c)
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x)
        out.push_back((static_cast<std::size_t>(c) * t.height + y) * t.width + x);
  return out;
}

}  // namespace fusionbench::testing
