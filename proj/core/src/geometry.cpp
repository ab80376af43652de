#include "fusionbench/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace fusionbench {

double intersection_area(const Box2& a, const Box2& b) {
  const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  return (w > 0.0 && h > 0.0) ? w * h : 0.0;
}

double iou(const Box2& a, const Box2& b) {
  const double area_a = a.area();
  const double area_b = b.area();
  if (area_a <= 0.0 || area_b <= 0.0) return 0.0;
  const double inter = intersection_area(a, b);
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

Box2 clip_box(const Box2& box, double width, double height) {
  return {std::clamp(box.x0, 0.0, width), std::clamp(box.y0, 0.0, height),
          std::clamp(box.x1, 0.0, width), std::clamp(box.y1, 0.0, height)};
}

std::array<double, 5> encode_box(const Box3& anchor, const Box3& box) {
  return {(box.u - anchor.u) / anchor.width, (box.v - anchor.v) / anchor.length,
          std::log(box.width / anchor.width), std::log(box.length / anchor.length),
          std::log(box.height / anchor.height)};
}

Box3 decode_box(const Box3& anchor, const std::array<double, 5>& d) {
  constexpr double kMaxLog = 1.5;
  Box3 out;
  out.u = anchor.u + d[0] * anchor.width;
  out.v = anchor.v + d[1] * anchor.length;
  out.width = anchor.width * std::exp(std::clamp(d[2], -kMaxLog, kMaxLog));
  out.length = anchor.length * std::exp(std::clamp(d[3], -kMaxLog, kMaxLog));
  out.height = anchor.height * std::exp(std::clamp(d[4], -kMaxLog, kMaxLog));
  return out;
}

Box2 Camera::project(const Box3& box) const {
  const double s = depth_scale(box.v);
  const double xc = px_per_cell * box.u;
  const double half_w = 0.5 * px_per_cell * box.width * s;
  const double bottom = horizon_row + px_per_depth_row * box.v;
  const double top = bottom - px_per_meter * box.height * s;
  return {xc - half_w, top, xc + half_w, bottom};
}

std::array<double, 2> Camera::project_center(const Box3& box) const {
  const double s = depth_scale(box.v);
  const double bottom = horizon_row + px_per_depth_row * box.v;
  return {px_per_cell * box.u, bottom - 0.5 * px_per_meter * box.height * s};
}

}  // namespace fusionbench
