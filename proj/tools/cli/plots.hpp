#pragma once

#include <span>
#include <string>
#include <vector>

namespace fusionbench::cli {

/// Histogram of `values` with `bins` equal-width bins as a standalone SVG.
std::string svg_histogram(const std::string& title, std::span<const double> values, int bins = 20);

/// Vertical bars in [0, 1] (success rates), one per label.
std::string svg_bars(const std::string& title, std::span<const std::string> labels,
                     std::span<const double> values);

}  // namespace fusionbench::cli
