#pragma once

#include "fusionbench/tensor.hpp"

namespace fusionbench {

/// ||a - b||_2 / (H * W). Throws InputError on shape mismatch.
double per_pixel_l2(const Tensor& a, const Tensor& b);

}  // namespace fusionbench
