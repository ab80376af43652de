#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fusionbench/geometry.hpp"
#include "fusionbench/tensor.hpp"

namespace fusionbench {

enum ObjectClass : int { kBackground = 0, kVehicle = 1, kPedestrianCyclist = 2 };
inline constexpr int kNumClasses = 3;

const char* class_name(int class_id);

/// Integer pixel rectangle (x, y, w, h).
struct PixelRect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  bool operator==(const PixelRect&) const = default;
};

struct GroundTruthObject {
  int class_id = kVehicle;
  Box2 image_box;          // pixels
  Box2 bev_box;            // grid cells
  double height_m = 1.5;   // object height, meters
  PixelRect patchable_region;

  /// Joint 3D box recovered from the BEV footprint and height.
  Box3 box3() const;

  bool operator==(const GroundTruthObject&) const = default;
};

/// One multimodal sample: camera image, BEV LIDAR grid and ground truth.
struct Scene {
  Tensor image;  // 3 x H x W, values in [0, 1]
  Tensor bev;    // C_b x H_b x W_b: occupancy, normalized max height
  std::vector<GroundTruthObject> objects;
  std::string scene_id;
  std::uint64_t seed = 0;

  bool operator==(const Scene&) const = default;
};

struct Range {
  double lo = 0.0;
  double hi = 1.0;

  bool valid() const { return lo <= hi; }
  bool operator==(const Range&) const = default;
};

struct ClassGeometry {
  Range width_m;
  Range length_m;
  Range height_m;

  bool operator==(const ClassGeometry&) const = default;
};

struct SceneSpec {
  int n_objects = 2;
  GridSpec grid;
  Camera camera;
  double vehicle_fraction = 0.6;
  ClassGeometry vehicle{{2.4, 3.4}, {3.6, 5.0}, {1.3, 1.8}};
  ClassGeometry pedestrian{{0.9, 1.4}, {0.9, 1.4}, {1.5, 1.9}};
  Range depth_rows{14.0, 88.0};      // allowed footprint-center rows
  double lateral_margin_cells = 2.0;
  double max_image_overlap = 0.1;    // pairwise image IOU bound between placed items
  int placement_attempts = 400;

  double image_noise = 0.07;         // per-pixel Gaussian texture noise
  double object_color_jitter = 0.05;
  int ground_clutter_points = 40;    // sparse low returns anywhere on the grid
  double ground_clutter_max_z = 0.12;
  Range lidar_distractors{0, 3};     // LIDAR-only clusters (vegetation, debris)
  ClassGeometry distractor{{1.0, 3.4}, {1.0, 5.0}, {0.5, 1.8}};
  double distractor_density = 0.7;
  Range lidar_mimics{0, 2};          // hedges whose returns look like a vehicle's
  Range image_distractors{0, 2};     // image-only dark patches (shadows, stains)

  int image_height() const { return camera.image_height; }
  int image_width() const { return camera.image_width; }

  /// Throws InputError when sizes or ranges are degenerate.
  void validate() const;

  bool operator==(const SceneSpec&) const = default;
};

struct Point3 {
  double x = 0.0;  // lateral, meters
  double y = 0.0;  // forward, meters
  double z = 0.0;  // height, meters
};

/// Deterministic function of (seed, spec). Throws InfeasibleSpecError when the
/// objects cannot be placed under the overlap bound.
Scene generate_scene(std::uint64_t seed, const SceneSpec& spec);

/// Bins points into the grid. Occupancy is 1 for any cell holding a point and
/// the height channel keeps max(z) / z_max clipped to [0, 1]. Points outside
/// the lateral or forward extents are silently dropped.
Tensor rasterize_bev(std::span<const Point3> points, const GridSpec& grid);

/// Grid cell indices (row, col) of a point, or {-1, -1} when outside extents.
std::array<int, 2> bev_cell(const Point3& p, const GridSpec& grid);

/// Meters coordinates of a continuous BEV position (u = col, v = row).
Point3 bev_to_world(double u, double v, double z, const GridSpec& grid);

/// Number of occupied cells that intersect `bev_box` with positive area.
int occupied_cells(const Tensor& bev, const Box2& bev_box);

/// Adds sparse low returns inside `footprint` (at least one) so the region
/// carries LIDAR support without looking like an object. Returns the number
/// of points added.
int plant_lidar_clutter(Scene& scene, const Box3& footprint, const GridSpec& grid,
                        std::uint64_t seed, double density = 0.5, double max_height_m = 1.0);

struct DatasetSpec {
  int count = 10;
  std::uint64_t seed = 1;
  int min_objects = 1;
  int max_objects = 3;
  SceneSpec scene;

  bool operator==(const DatasetSpec&) const = default;
};

/// Scene k uses seed Rng::mix(spec.seed, k) and an object count drawn from
/// [min_objects, max_objects] with that seed.
std::vector<Scene> generate_dataset(const DatasetSpec& spec);

}  // namespace fusionbench
