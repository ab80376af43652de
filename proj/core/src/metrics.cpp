#include "fusionbench/metrics.hpp"

#include <cmath>

#include "fusionbench/errors.hpp"

namespace fusionbench {

double per_pixel_l2(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw InputError("per_pixel_l2: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return std::sqrt(s) / (static_cast<double>(a.height) * a.width);
}

}  // namespace fusionbench
