#include "plots.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace fusionbench::cli {

namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 360;
constexpr int kLeft = 60;
constexpr int kRight = 20;
constexpr int kTop = 40;
constexpr int kBottom = 60;

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

void open_svg(std::ostringstream& o, const std::string& title) {
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
    << escape(title) << "</text>\n"
    << "<line x1=\"" << kLeft << "\" y1=\"" << kHeight - kBottom << "\" x2=\"" << kWidth - kRight
    << "\" y2=\"" << kHeight - kBottom << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\""
    << kHeight - kBottom << "\" stroke=\"black\"/>\n";
}

}  // namespace

std::string svg_histogram(const std::string& title, std::span<const double> values, int bins) {
  bins = std::max(bins, 1);
  std::ostringstream o;
  open_svg(o, title);
  if (values.empty()) {
    o << "<text x=\"" << kWidth / 2 << "\" y=\"" << kHeight / 2
      << "\" text-anchor=\"middle\">no values</text>\n</svg>\n";
    return o.str();
  }
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it;
  const double hi = *hi_it > lo ? *hi_it : lo + 1e-12;
  std::vector<int> counts(bins, 0);
  for (double v : values) {
    const int b = std::min(bins - 1, static_cast<int>((v - lo) / (hi - lo) * bins));
    ++counts[b];
  }
  const int peak = *std::max_element(counts.begin(), counts.end());
  const double plot_w = kWidth - kLeft - kRight;
  const double plot_h = kHeight - kTop - kBottom;
  const double bw = plot_w / bins;
  for (int b = 0; b < bins; ++b) {
    const double h = plot_h * counts[b] / peak;
    o << "<rect x=\"" << num(kLeft + b * bw) << "\" y=\"" << num(kHeight - kBottom - h)
      << "\" width=\"" << num(bw - 1) << "\" height=\"" << num(h)
      << "\" fill=\"steelblue\"/>\n";
  }
  o << "<text x=\"" << kLeft << "\" y=\"" << kHeight - kBottom + 16 << "\">" << num(lo) << "</text>\n"
    << "<text x=\"" << kWidth - kRight << "\" y=\"" << kHeight - kBottom + 16
    << "\" text-anchor=\"end\">" << num(hi) << "</text>\n"
    << "<text x=\"" << kWidth / 2 << "\" y=\"" << kHeight - 16
    << "\" text-anchor=\"middle\">per-pixel L2 distortion</text>\n"
    << "<text x=\"" << kLeft - 6 << "\" y=\"" << kTop + 4 << "\" text-anchor=\"end\">" << peak
    << "</text>\n</svg>\n";
  return o.str();
}

std::string svg_bars(const std::string& title, std::span<const std::string> labels,
                     std::span<const double> values) {
  std::ostringstream o;
  open_svg(o, title);
  const std::size_t n = std::min(labels.size(), values.size());
  const double plot_w = kWidth - kLeft - kRight;
  const double plot_h = kHeight - kTop - kBottom;
  const double bw = n ? plot_w / n : plot_w;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = std::clamp(values[i], 0.0, 1.0);
    const double h = plot_h * v;
    const double x = kLeft + i * bw;
    o << "<rect x=\"" << num(x + 0.15 * bw) << "\" y=\"" << num(kHeight - kBottom - h)
      << "\" width=\"" << num(0.7 * bw) << "\" height=\"" << num(h) << "\" fill=\"indianred\"/>\n"
      << "<text x=\"" << num(x + 0.5 * bw) << "\" y=\"" << num(kHeight - kBottom - h - 4)
      << "\" text-anchor=\"middle\">" << num(v) << "</text>\n"
      << "<text x=\"" << num(x + 0.5 * bw) << "\" y=\"" << kHeight - kBottom + 16
      << "\" text-anchor=\"middle\" font-size=\"10\">" << escape(labels[i]) << "</text>\n";
  }
  o << "<text x=\"" << kLeft - 6 << "\" y=\"" << kTop + 4 << "\" text-anchor=\"end\">1</text>\n"
    << "<text x=\"" << kLeft - 6 << "\" y=\"" << kHeight - kBottom
    << "\" text-anchor=\"end\">0</text>\n</svg>\n";
  return o.str();
}

}  // namespace fusionbench::cli
