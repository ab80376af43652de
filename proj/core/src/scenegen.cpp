#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "fusionbench/errors.hpp"
#include "fusionbench/rng.hpp"
#include "fusionbench/scene.hpp"

namespace fusionbench {

const char* class_name(int class_id) {
  switch (class_id) {
    case kBackground: return "background";
    case kVehicle: return "vehicle";
    case kPedestrianCyclist: return "pedestrian_cyclist";
    default: return "unknown";
  }
}

Box3 GroundTruthObject::box3() const {
  return {bev_box.center_x(), bev_box.center_y(), bev_box.width(), bev_box.height(), height_m};
}

namespace {

void check_range(const Range& r, const char* what) {
  if (!r.valid()) throw InputError(std::string("degenerate range: ") + what);
}

void check_geometry(const ClassGeometry& g, const char* what) {
  check_range(g.width_m, what);
  check_range(g.length_m, what);
  check_range(g.height_m, what);
  if (g.width_m.lo <= 0.0 || g.length_m.lo <= 0.0 || g.height_m.lo <= 0.0) {
    throw InputError(std::string("non-positive object size: ") + what);
  }
}

struct Rgb {
  double r, g, b;
};

class Canvas {
 public:
  explicit Canvas(Tensor& image) : image_(image) {}

  void blend(int x, int y, const Rgb& c, double alpha) {
    if (x < 0 || y < 0 || x >= image_.width || y >= image_.height) return;
    const double a = std::clamp(alpha, 0.0, 1.0);
    image_(0, y, x) = (1.0 - a) * image_(0, y, x) + a * c.r;
    image_(1, y, x) = (1.0 - a) * image_(1, y, x) + a * c.g;
    image_(2, y, x) = (1.0 - a) * image_(2, y, x) + a * c.b;
  }

  void rect(double fx0, double fy0, double fx1, double fy1, const Rgb& c, double alpha = 1.0) {
    const int x0 = static_cast<int>(std::lround(fx0));
    const int x1 = static_cast<int>(std::lround(fx1));
    const int y0 = static_cast<int>(std::lround(fy0));
    const int y1 = static_cast<int>(std::lround(fy1));
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) blend(x, y, c, alpha);
  }

  void ellipse(double cx, double cy, double rx, double ry, const Rgb& c, double alpha = 1.0) {
    const int x0 = static_cast<int>(std::floor(cx - rx));
    const int x1 = static_cast<int>(std::ceil(cx + rx));
    const int y0 = static_cast<int>(std::floor(cy - ry));
    const int y1 = static_cast<int>(std::ceil(cy + ry));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dx = (x + 0.5 - cx) / rx;
        const double dy = (y + 0.5 - cy) / ry;
        if (dx * dx + dy * dy <= 1.0) blend(x, y, c, alpha);
      }
    }
  }

 private:
  Tensor& image_;
};

Rgb jitter(const Rgb& c, double amount, Rng& rng) {
  return {c.r + rng.uniform(-amount, amount), c.g + rng.uniform(-amount, amount),
          c.b + rng.uniform(-amount, amount)};
}

// Integer pixel extent that the renderer actually fills for a float box.
Box2 rendered_extent(const Box2& b) {
  return {std::round(b.x0), std::round(b.y0), std::round(b.x1), std::round(b.y1)};
}

void render_background(Tensor& image, const Camera& camera, Rng& rng) {
  const double road = rng.uniform(0.36, 0.5);
  const Rgb sky{rng.uniform(0.5, 0.65), rng.uniform(0.6, 0.72), rng.uniform(0.72, 0.88)};
  // Low-frequency road texture: a few random plane waves.
  struct Wave { double kx, ky, phase, amp; };
  Wave waves[3];
  for (auto& w : waves) {
    w = {rng.uniform(0.02, 0.12), rng.uniform(0.02, 0.12), rng.uniform(0.0, 6.28),
         rng.uniform(0.01, 0.04)};
  }
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      if (y < camera.horizon_row) {
        const double t = static_cast<double>(y) / camera.horizon_row;
        image(0, y, x) = sky.r * (1.0 - 0.2 * t);
        image(1, y, x) = sky.g * (1.0 - 0.2 * t);
        image(2, y, x) = sky.b * (1.0 - 0.2 * t);
      } else {
        double v = road;
        for (const auto& w : waves) v += w.amp * std::sin(w.kx * x + w.ky * y + w.phase);
        image(0, y, x) = v;
        image(1, y, x) = v;
        image(2, y, x) = v * 1.02;
      }
    }
  }
}

void render_vehicle(Canvas& canvas, const Box2& b, double jit, Rng& rng) {
  const Rgb body{rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95)};
  const double w = b.width();
  const double h = b.height();
  canvas.rect(b.x0, b.y0, b.x1, b.y1, jitter(body, jit, rng));
  // Rear window band.
  canvas.rect(b.x0 + 0.1 * w, b.y0 + 0.06 * h, b.x1 - 0.1 * w, b.y0 + 0.36 * h,
              jitter({0.12, 0.15, 0.2}, jit, rng));
  // Tail lights.
  const Rgb light = jitter({0.85, 0.12, 0.1}, jit, rng);
  canvas.rect(b.x0 + 0.03 * w, b.y0 + 0.45 * h, b.x0 + 0.17 * w, b.y0 + 0.58 * h, light);
  canvas.rect(b.x1 - 0.17 * w, b.y0 + 0.45 * h, b.x1 - 0.03 * w, b.y0 + 0.58 * h, light);
  // Bumper shadow and wheels.
  canvas.rect(b.x0, b.y1 - 0.16 * h, b.x1, b.y1 - 0.1 * h, {0.1, 0.1, 0.1}, 0.6);
  canvas.rect(b.x0 + 0.04 * w, b.y1 - 0.12 * h, b.x0 + 0.24 * w, b.y1, {0.05, 0.05, 0.05});
  canvas.rect(b.x1 - 0.24 * w, b.y1 - 0.12 * h, b.x1 - 0.04 * w, b.y1, {0.05, 0.05, 0.05});
}

void render_pedestrian(Canvas& canvas, const Box2& b, double jit, Rng& rng) {
  const double w = b.width();
  const double h = b.height();
  const double cx = b.center_x();
  const Rgb shirt{rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95)};
  const Rgb pants{rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.5)};
  const Rgb skin = jitter({0.85, 0.66, 0.52}, 0.08, rng);
  // Legs, torso, head.
  canvas.rect(cx - 0.32 * w, b.y0 + 0.58 * h, cx - 0.05 * w, b.y1, jitter(pants, jit, rng));
  canvas.rect(cx + 0.05 * w, b.y0 + 0.58 * h, cx + 0.32 * w, b.y1, jitter(pants, jit, rng));
  canvas.ellipse(cx, b.y0 + 0.4 * h, 0.5 * w, 0.22 * h, jitter(shirt, jit, rng));
  canvas.ellipse(cx, b.y0 + 0.1 * h, 0.3 * w, 0.1 * h, skin);
}

void render_shrub(Canvas& canvas, const Box2& b, Rng& rng) {
  const Rgb leaf{rng.uniform(0.2, 0.32), rng.uniform(0.3, 0.42), rng.uniform(0.12, 0.2)};
  canvas.ellipse(b.center_x(), b.center_y(), 0.5 * b.width(), 0.5 * b.height(), leaf, 0.55);
}

void render_shadow(Canvas& canvas, const Box2& b) {
  canvas.rect(b.x0, b.y0, b.x1, b.y1, {0.08, 0.08, 0.1}, 0.45);
}

struct Placed {
  Box2 bev;
  Box2 image;
};

bool fits(const Box2& bev, const Box2& img, const std::vector<Placed>& placed,
          const SceneSpec& spec) {
  if (img.x0 < 1.0 || img.y0 < 1.0 || img.x1 > spec.image_width() - 1.0 ||
      img.y1 > spec.image_height() - 1.0) {
    return false;
  }
  if (bev.x0 < 0.0 || bev.y0 < 0.0 || bev.x1 > spec.grid.cols || bev.y1 > spec.grid.rows) {
    return false;
  }
  for (const auto& p : placed) {
    const Box2 grown{p.bev.x0 - 1.0, p.bev.y0 - 1.0, p.bev.x1 + 1.0, p.bev.y1 + 1.0};
    if (intersection_area(grown, bev) > 0.0) return false;
    if (iou(p.image, img) > spec.max_image_overlap) return false;
  }
  return true;
}

Box3 sample_box(const ClassGeometry& g, const SceneSpec& spec, Rng& rng) {
  const double cw = spec.grid.cell_width();
  const double cl = spec.grid.cell_length();
  Box3 box;
  box.width = rng.uniform(g.width_m.lo, g.width_m.hi) / cw;
  box.length = rng.uniform(g.length_m.lo, g.length_m.hi) / cl;
  box.height = rng.uniform(g.height_m.lo, g.height_m.hi);
  const double umin = spec.lateral_margin_cells + 0.5 * box.width;
  const double umax = spec.grid.cols - spec.lateral_margin_cells - 0.5 * box.width;
  box.u = rng.uniform(umin, std::max(umin, umax));
  box.v = rng.uniform(spec.depth_rows.lo, spec.depth_rows.hi);
  return box;
}

// One return per cell touched by the footprint, keeping the cell fully
// inside the footprint-cell intersection so occupancy covers the footprint.
void sample_surface_points(const Box3& box, const GridSpec& grid, double zlo, double zhi,
                           double density, Rng& rng, std::vector<Point3>& out) {
  const Box2 fp = box.bev_box();
  const int c0 = std::max(0, static_cast<int>(std::floor(fp.x0)));
  const int c1 = std::min(grid.cols - 1, static_cast<int>(std::ceil(fp.x1)) - 1);
  const int r0 = std::max(0, static_cast<int>(std::floor(fp.y0)));
  const int r1 = std::min(grid.rows - 1, static_cast<int>(std::ceil(fp.y1)) - 1);
  bool any = false;
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) {
      const double ua = std::max<double>(c, fp.x0);
      const double ub = std::min<double>(c + 1, fp.x1);
      const double va = std::max<double>(r, fp.y0);
      const double vb = std::min<double>(r + 1, fp.y1);
      if (ub <= ua || vb <= va) continue;
      const bool center = box.u >= c && box.u < c + 1 && box.v >= r && box.v < r + 1;
      const double draw = rng.uniform();
      if (!center && draw >= density) continue;
      // Keep the sample strictly inside the cell so binning lands in (r, c).
      const double u = std::clamp(rng.uniform(ua, ub), c + 1e-6, c + 1.0 - 1e-6);
      const double v = std::clamp(rng.uniform(va, vb), r + 1e-6, r + 1.0 - 1e-6);
      out.push_back(bev_to_world(u, v, rng.uniform(zlo, zhi), grid));
      any = true;
    }
  }
  if (!any) out.push_back(bev_to_world(box.u, box.v, zhi, grid));
}

void merge_bev(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] = std::max(dst.data[i], src.data[i]);
}

PixelRect patch_area(int class_id, const Box2& b) {
  const double w = b.width();
  const double h = b.height();
  double x0, x1, y0, y1;
  if (class_id == kVehicle) {
    x0 = b.x0 + 0.04 * w; x1 = b.x1 - 0.04 * w;
    y0 = b.y0 + 0.04 * h; y1 = b.y1 - 0.1 * h;
  } else {
    x0 = b.x0 + 0.15 * w; x1 = b.x1 - 0.15 * w;
    y0 = b.y0 + 0.25 * h; y1 = b.y0 + 0.6 * h;
  }
  PixelRect r;
  r.x = static_cast<int>(std::ceil(x0));
  r.y = static_cast<int>(std::ceil(y0));
  r.w = std::max(1, static_cast<int>(std::floor(x1)) - r.x);
  r.h = std::max(1, static_cast<int>(std::floor(y1)) - r.y);
  return r;
}

}  // namespace

void SceneSpec::validate() const {
  if (n_objects < 0) throw InputError("n_objects must be >= 0");
  if (grid.rows <= 0 || grid.cols <= 0 || grid.channels != 2) {
    throw InputError("BEV grid must be 2 x rows x cols with positive sizes");
  }
  if (!(grid.x_max > grid.x_min) || !(grid.y_max > grid.y_min) || !(grid.z_max > 0.0)) {
    throw InputError("degenerate BEV extents");
  }
  if (camera.image_height <= 0 || camera.image_width <= 0) throw InputError("image size");
  if (camera.bev_rows != grid.rows) throw InputError("camera/grid row count mismatch");
  if (vehicle_fraction < 0.0 || vehicle_fraction > 1.0) throw InputError("vehicle_fraction");
  check_geometry(vehicle, "vehicle");
  check_geometry(pedestrian, "pedestrian");
  check_geometry(distractor, "distractor");
  check_range(depth_rows, "depth_rows");
  check_range(lidar_distractors, "lidar_distractors");
  check_range(image_distractors, "image_distractors");
  check_range(lidar_mimics, "lidar_mimics");
  if (depth_rows.lo < 0.0 || depth_rows.hi > grid.rows) throw InputError("depth_rows");
  if (image_noise < 0.0 || max_image_overlap < 0.0 || placement_attempts <= 0) {
    throw InputError("noise, overlap bound and attempts must be non-negative");
  }
}

std::array<int, 2> bev_cell(const Point3& p, const GridSpec& grid) {
  if (p.x < grid.x_min || p.x >= grid.x_max || p.y < grid.y_min || p.y >= grid.y_max) {
    return {-1, -1};
  }
  int col = static_cast<int>(std::floor((p.x - grid.x_min) / grid.cell_width()));
  int fwd = static_cast<int>(std::floor((p.y - grid.y_min) / grid.cell_length()));
  col = std::clamp(col, 0, grid.cols - 1);
  fwd = std::clamp(fwd, 0, grid.rows - 1);
  return {grid.rows - 1 - fwd, col};
}

Point3 bev_to_world(double u, double v, double z, const GridSpec& grid) {
  return {grid.x_min + u * grid.cell_width(), grid.y_min + (grid.rows - v) * grid.cell_length(), z};
}

Tensor rasterize_bev(std::span<const Point3> points, const GridSpec& grid) {
  Tensor bev(grid.channels, grid.rows, grid.cols);
  for (const auto& p : points) {
    const auto [row, col] = bev_cell(p, grid);
    if (row < 0) continue;
    bev(0, row, col) = 1.0;
    const double h = std::clamp(p.z / grid.z_max, 0.0, 1.0);
    bev(1, row, col) = std::max(bev(1, row, col), h);
  }
  round_to_float(bev);
  return bev;
}

int occupied_cells(const Tensor& bev, const Box2& b) {
  const int c0 = std::max(0, static_cast<int>(std::floor(b.x0)));
  const int c1 = std::min(bev.width - 1, static_cast<int>(std::ceil(b.x1)) - 1);
  const int r0 = std::max(0, static_cast<int>(std::floor(b.y0)));
  const int r1 = std::min(bev.height - 1, static_cast<int>(std::ceil(b.y1)) - 1);
  int count = 0;
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c)
      if (bev(0, r, c) > 0.0) ++count;
  return count;
}

int plant_lidar_clutter(Scene& scene, const Box3& footprint, const GridSpec& grid,
                        std::uint64_t seed, double density, double max_height_m) {
  Rng rng(seed);
  std::vector<Point3> pts;
  sample_surface_points(footprint, grid, 0.15, max_height_m, density, rng, pts);
  merge_bev(scene.bev, rasterize_bev(pts, grid));
  return static_cast<int>(pts.size());
}

Scene generate_scene(std::uint64_t seed, const SceneSpec& spec) {
  spec.validate();
  Rng rng(seed);
  Rng render_rng = rng.fork(1);
  Rng lidar_rng = rng.fork(2);

  Scene scene;
  scene.seed = seed;
  char id[40];
  std::snprintf(id, sizeof(id), "scene-%016llx", static_cast<unsigned long long>(seed));
  scene.scene_id = id;
  scene.image = Tensor(3, spec.image_height(), spec.image_width());

  std::vector<Placed> placed;
  std::vector<std::pair<int, Box3>> objects;  // (class, box), placement order
  for (int k = 0; k < spec.n_objects; ++k) {
    const int cls = rng.bernoulli(spec.vehicle_fraction) ? kVehicle : kPedestrianCyclist;
    const ClassGeometry& g = cls == kVehicle ? spec.vehicle : spec.pedestrian;
    bool ok = false;
    for (int attempt = 0; attempt < spec.placement_attempts && !ok; ++attempt) {
      const Box3 box = sample_box(g, spec, rng);
      const Box2 img = spec.camera.project(box);
      if (fits(box.bev_box(), img, placed, spec)) {
        placed.push_back({box.bev_box(), img});
        objects.emplace_back(cls, box);
        ok = true;
      }
    }
    if (!ok) {
      throw InfeasibleSpecError("cannot place object " + std::to_string(k) + " of " +
                                std::to_string(spec.n_objects) + " under the overlap bound");
    }
  }

  // Distractors are best effort: skipped when they do not fit.
  std::vector<Box3> shrubs;
  const int n_shrubs = rng.uniform_int(static_cast<int>(spec.lidar_distractors.lo),
                                       static_cast<int>(spec.lidar_distractors.hi));
  for (int k = 0; k < n_shrubs; ++k) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const Box3 box = sample_box(spec.distractor, spec, rng);
      const Box2 img = spec.camera.project(box);
      if (fits(box.bev_box(), img, placed, spec)) {
        placed.push_back({box.bev_box(), img});
        shrubs.push_back(box);
        break;
      }
    }
  }
  std::vector<Box3> mimics;
  const int n_mimics = rng.uniform_int(static_cast<int>(spec.lidar_mimics.lo),
                                       static_cast<int>(spec.lidar_mimics.hi));
  for (int k = 0; k < n_mimics; ++k) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const Box3 box = sample_box(spec.vehicle, spec, rng);
      const Box2 img = spec.camera.project(box);
      if (fits(box.bev_box(), img, placed, spec)) {
        placed.push_back({box.bev_box(), img});
        mimics.push_back(box);
        break;
      }
    }
  }
  std::vector<Box2> shadows;
  const int n_shadows = rng.uniform_int(static_cast<int>(spec.image_distractors.lo),
                                        static_cast<int>(spec.image_distractors.hi));
  for (int k = 0; k < n_shadows; ++k) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double v = rng.uniform(spec.depth_rows.lo, spec.depth_rows.hi);
      const double s = spec.camera.depth_scale(v);
      const double w = rng.uniform(18.0, 36.0) * s;
      const double h = rng.uniform(3.0, 6.0) * s;
      const double cx = rng.uniform(w, spec.image_width() - w);
      const double bottom = spec.camera.horizon_row + spec.camera.px_per_depth_row * v;
      const Box2 img{cx - 0.5 * w, bottom - h, cx + 0.5 * w, bottom};
      bool clear = img.y0 > spec.camera.horizon_row && img.y1 < spec.image_height() - 1;
      for (const auto& p : placed) clear = clear && intersection_area(p.image, img) <= 0.0;
      if (clear) {
        shadows.push_back(img);
        break;
      }
    }
  }

  // Image: background, then far-to-near painter's order.
  render_background(scene.image, spec.camera, render_rng);
  Canvas canvas(scene.image);
  for (const auto& s : shadows) render_shadow(canvas, s);
  struct Drawable { double v; int kind; Box3 box; };
  std::vector<Drawable> draw;
  for (const auto& [cls, box] : objects) draw.push_back({box.v, cls, box});
  for (const auto& box : shrubs) draw.push_back({box.v, 0, box});
  for (const auto& box : mimics) draw.push_back({box.v, 0, box});
  std::stable_sort(draw.begin(), draw.end(),
                   [](const Drawable& a, const Drawable& b) { return a.v < b.v; });
  for (const auto& d : draw) {
    const Box2 img = spec.camera.project(d.box);
    if (d.kind == kVehicle) {
      render_vehicle(canvas, img, spec.object_color_jitter, render_rng);
    } else if (d.kind == kPedestrianCyclist) {
      render_pedestrian(canvas, img, spec.object_color_jitter, render_rng);
    } else {
      render_shrub(canvas, img, render_rng);
    }
  }
  for (double& x : scene.image.data) x += spec.image_noise * render_rng.normal();
  clip(scene.image, 0.0, 1.0);
  round_to_float(scene.image);

  // LIDAR: dense surface returns on objects and mimics, sparse low returns on shrubs, ground clutter.
  std::vector<Point3> points;
  for (const auto& [cls, box] : objects) {
    sample_surface_points(box, spec.grid, 0.55 * box.height, box.height, 1.0, lidar_rng, points);
  }
  for (const auto& box : mimics) {
    sample_surface_points(box, spec.grid, 0.55 * box.height, box.height, 1.0, lidar_rng, points);
  }
  for (const auto& box : shrubs) {
    sample_surface_points(box, spec.grid, 0.1, box.height, spec.distractor_density, lidar_rng,
                          points);
  }
  for (int k = 0; k < spec.ground_clutter_points; ++k) {
    const double u = lidar_rng.uniform(0.0, spec.grid.cols);
    const double v = lidar_rng.uniform(0.0, spec.grid.rows);
    points.push_back(
        bev_to_world(u, v, lidar_rng.uniform(0.0, spec.ground_clutter_max_z), spec.grid));
  }
  scene.bev = rasterize_bev(points, spec.grid);

  for (const auto& [cls, box] : objects) {
    GroundTruthObject obj;
    obj.class_id = cls;
    obj.image_box = rendered_extent(spec.camera.project(box));
    obj.bev_box = box.bev_box();
    obj.height_m = box.height;
    obj.patchable_region = patch_area(cls, obj.image_box);
    scene.objects.push_back(obj);
  }
  return scene;
}

std::vector<Scene> generate_dataset(const DatasetSpec& spec) {
  if (spec.count < 0 || spec.min_objects < 0 || spec.max_objects < spec.min_objects) {
    throw InputError("invalid dataset spec");
  }
  std::vector<Scene> scenes;
  scenes.reserve(spec.count);
  for (int k = 0; k < spec.count; ++k) {
    const std::uint64_t seed = Rng::mix(spec.seed, static_cast<std::uint64_t>(k));
    Rng count_rng(seed ^ 0x5a5a5a5aULL);
    SceneSpec s = spec.scene;
    s.n_objects = count_rng.uniform_int(spec.min_objects, spec.max_objects);
    scenes.push_back(generate_scene(seed, s));
  }
  return scenes;
}

}  // namespace fusionbench
