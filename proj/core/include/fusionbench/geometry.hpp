#pragma once

#include <array>

namespace fusionbench {

/// Axis-aligned box (x_min, y_min, x_max, y_max). Used for image boxes in
/// pixels and BEV boxes in grid cells (u = column, v = row).
struct Box2 {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 0.0;
  double y1 = 0.0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() > 0.0 && height() > 0.0 ? width() * height() : 0.0; }
  double center_x() const { return 0.5 * (x0 + x1); }
  double center_y() const { return 0.5 * (y0 + y1); }
  bool valid() const { return x0 < x1 && y0 < y1; }
  bool contains(const Box2& inner) const {
    return inner.x0 >= x0 && inner.y0 >= y0 && inner.x1 <= x1 && inner.y1 <= y1;
  }

  bool operator==(const Box2&) const = default;
};

/// Intersection over union. Zero-area boxes give 0.
double iou(const Box2& a, const Box2& b);

double intersection_area(const Box2& a, const Box2& b);

Box2 clip_box(const Box2& box, double width, double height);

/// Upright 3D box: BEV footprint center (u, v) and extent in grid cells plus
/// a height in meters. This is the joint object the camera projection maps
/// into both views.
struct Box3 {
  double u = 0.0;         // lateral center, cells
  double v = 0.0;         // depth center, cells (row 0 = farthest)
  double width = 1.0;     // lateral extent, cells
  double length = 1.0;    // depth extent, cells
  double height = 1.0;    // meters

  Box2 bev_box() const {
    return {u - 0.5 * width, v - 0.5 * length, u + 0.5 * width, v + 0.5 * length};
  }

  bool operator==(const Box3&) const = default;
};

/// Regression offsets of `box` relative to `anchor`:
/// (du/w_a, dv/l_a, log w/w_a, log l/l_a, log h/h_a).
std::array<double, 5> encode_box(const Box3& anchor, const Box3& box);
Box3 decode_box(const Box3& anchor, const std::array<double, 5>& deltas);

/// BEV grid extents. Rows run from far (row 0) to near.
struct GridSpec {
  int channels = 2;  // occupancy, normalized max height
  int rows = 96;
  int cols = 96;
  double x_min = -12.0;  // lateral, meters
  double x_max = 12.0;
  double y_min = 0.0;    // forward distance, meters
  double y_max = 24.0;
  double z_max = 2.5;    // height normalizer, meters

  double cell_width() const { return (x_max - x_min) / cols; }
  double cell_length() const { return (y_max - y_min) / rows; }

  bool operator==(const GridSpec&) const = default;
};

/// Fixed camera model linking the BEV grid to the image plane.
///
/// Lateral position maps linearly to image columns; depth row maps linearly
/// to the image row of the object's ground contact; apparent size scales
/// with a depth factor that grows toward the camera.
struct Camera {
  int image_height = 128;
  int image_width = 192;
  int bev_rows = 96;
  double px_per_cell = 2.0;
  double horizon_row = 36.0;
  double px_per_depth_row = 0.9;
  double px_per_meter = 13.0;
  double far_scale = 0.7;
  double near_scale = 1.3;

  double depth_scale(double v) const {
    return far_scale + (near_scale - far_scale) * v / bev_rows;
  }

  /// Image box of a 3D box (unclipped).
  Box2 project(const Box3& box) const;

  /// Image position of the center of a 3D box.
  std::array<double, 2> project_center(const Box3& box) const;

  bool operator==(const Camera&) const = default;
};

}  // namespace fusionbench
