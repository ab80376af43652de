#include "fusionbench/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "fusionbench/array_io.hpp"
#include "fusionbench/errors.hpp"
#include "fusionbench/metrics.hpp"
#include "fusionbench/rng.hpp"

namespace fusionbench {

// ---------------------------------------------------------------------------
// AttackSurface

namespace {

double smooth_l1(double x) { return std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5; }
double smooth_l1_grad(double x) { return std::abs(x) < 1.0 ? x : (x > 0 ? 1.0 : -1.0); }

}  // namespace

struct AttackSurface::Term {
  Head head = Head::stage2;
  Box3 box;
  std::array<double, kNumClasses> prob_weight{};
  int nll_class = -1;
  double nll_weight = 0.0;
  double nll_floor = 1e-300;
  bool regress = false;
  std::array<double, kBoxParams> delta_target{};
};

AttackSurface::AttackSurface(const FusionDetector& detector, const Scene& scene)
    : detector_(detector),
      scene_(scene),
      bev_branch_(ForwardPass::run_bev_branch(detector.params(), scene.bev)) {}

double AttackSurface::detection_threshold() const { return detector_.config().detection_threshold; }

const DetectorConfig& AttackSurface::config() const { return detector_.config(); }

std::vector<Detection> AttackSurface::detect(const Tensor& image) const {
  ForwardPass pass(detector_.params(), detector_.config(), image, bev_branch_);
  auto dets = detector_.detect(pass, scene_.bev);
  annotate_iou_gt(dets, scene_.objects);
  return dets;
}

const AnchorBox& AttackSurface::nearest_anchor(const Box3& box) const {
  const Box2 b = box.bev_box();
  const auto& anchors = detector_.anchors();
  std::size_t best = 0;
  double best_iou = -1.0;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const double v = iou(anchors[i].bev_box, b);
    if (v > best_iou) {
      best_iou = v;
      best = i;
    }
  }
  return anchors[best];
}

double AttackSurface::evaluate(const Tensor& image, std::span<const Term> terms,
                               Tensor* grad) const {
  ForwardPass pass(detector_.params(), detector_.config(), image, bev_branch_);
  double total = 0.0;
  for (const Term& t : terms) {
    const int h = pass.evaluate(t.head, t.box);
    const HeadOutput& out = pass.output(h);
    const std::size_t nc = out.probs.size();
    std::vector<double> gp(nc, 0.0);
    for (std::size_t c = 0; c < nc; ++c) {
      total += t.prob_weight[c] * out.probs[c];
      gp[c] += t.prob_weight[c];
    }
    if (t.nll_class >= 0) {
      const double p = std::max(out.probs[t.nll_class], t.nll_floor);
      total -= t.nll_weight * std::log(p);
      gp[t.nll_class] -= t.nll_weight / p;
    }
    std::array<double, kBoxParams> gd{};
    if (t.regress) {
      for (int k = 0; k < kBoxParams; ++k) {
        const double d = out.deltas[k] - t.delta_target[k];
        total += t.nll_weight * smooth_l1(d);
        gd[k] = t.nll_weight * smooth_l1_grad(d);
      }
    }
    if (grad) pass.add_grad_probs(h, gp, gd);
  }
  if (grad) {
    *grad = Tensor();
    pass.backward(nullptr, grad, nullptr);
  }
  return total;
}

double AttackSurface::foreground_mass(const Tensor& image, std::span<const Box3> boxes,
                                      Tensor* grad) const {
  std::vector<Term> terms;
  for (const Box3& b : boxes) {
    Term t;
    t.head = Head::stage2;
    t.box = b;
    t.prob_weight = {0.0, 1.0, 1.0};
    terms.push_back(t);
  }
  return evaluate(image, terms, grad);
}

double AttackSurface::background_nll(const Tensor& image, std::span<const Box3> boxes,
                                     Tensor* grad) const {
  std::vector<Term> terms;
  for (const Box3& b : boxes) {
    Term t;
    t.head = Head::stage2;
    t.box = b;
    t.nll_class = kBackground;
    t.nll_weight = 1.0;
    t.nll_floor = 1e-12;
    terms.push_back(t);
  }
  return evaluate(image, terms, grad);
}

double AttackSurface::objectness_mass(const Tensor& image, std::span<const Box3> boxes,
                                      Tensor* grad) const {
  std::vector<Term> terms;
  for (const Box3& b : boxes) {
    Term t;
    t.head = Head::rpn;
    t.box = nearest_anchor(b).box;
    t.prob_weight = {0.0, 1.0, 0.0};
    terms.push_back(t);
  }
  return evaluate(image, terms, grad);
}

// Stage 2 classifies the regressed proposal, not the anchor, so the class
// term covers the target and four shifted copies of it.
std::vector<AttackSurface::Term> AttackSurface::stage2_spoof_terms(const Box3& target,
                                                                   int target_class,
                                                                   double weight) {
  constexpr double kShift = 0.15;
  constexpr double kOffsets[5][2] = {{0, 0}, {kShift, 0}, {-kShift, 0}, {0, kShift}, {0, -kShift}};
  std::vector<Term> terms;
  for (const auto& off : kOffsets) {
    Term t;
    t.head = Head::stage2;
    t.box = target;
    t.box.u += off[0] * target.width;
    t.box.v += off[1] * target.length;
    t.nll_class = target_class;
    t.nll_weight = weight / 5.0;
    t.regress = true;
    t.delta_target = encode_box(t.box, target);
    terms.push_back(t);
  }
  return terms;
}

double AttackSurface::objectness_nll(const Tensor& image, const Box3& target, Tensor* grad) const {
  return spoof_objective(image, target, kVehicle, 0.0, grad);
}

double AttackSurface::class_nll(const Tensor& image, const Box3& target, int target_class,
                                Tensor* grad) const {
  const auto terms = stage2_spoof_terms(target, target_class, 1.0);
  return evaluate(image, terms, grad);
}

double AttackSurface::spoof_objective(const Tensor& image, const Box3& target, int target_class,
                                      double alpha, Tensor* grad) const {
  if (target_class != kVehicle && target_class != kPedestrianCyclist) {
    throw InputError("spoof target class must be a foreground class");
  }
  std::vector<Term> terms;
  const AnchorBox& anchor = nearest_anchor(target);
  Term rpn;
  rpn.head = Head::rpn;
  rpn.box = anchor.box;
  rpn.nll_class = 1;
  rpn.nll_weight = 1.0;
  rpn.regress = true;
  rpn.delta_target = encode_box(anchor.box, target);
  terms.push_back(rpn);
  if (alpha != 0.0) {
    const auto s2 = stage2_spoof_terms(target, target_class, alpha);
    terms.insert(terms.end(), s2.begin(), s2.end());
  }
  return evaluate(image, terms, grad);
}

// ---------------------------------------------------------------------------
// Shared optimizer

namespace {

struct Objective {
  double loss = 0.0;
  double aux = 0.0;  // attack-specific progress measure
};

using ObjectiveFn = std::function<Objective(const Tensor& x, Tensor* grad)>;

// Normalized-gradient descent with backtracking. Only steps that do not
// increase the loss are accepted, so the accepted sequence is monotone.
Objective normalized_descent(const ObjectiveFn& f, const std::function<void(Tensor&)>& project,
                             Tensor& x, int steps, double& step,
                             const std::function<bool(const Objective&)>& done) {
  Tensor g;
  Objective cur = f(x, &g);
  for (int s = 0; s < steps; ++s) {
    if (done && done(cur)) break;
    const double gn = l2_norm(g.data);
    if (!(gn > 0.0) || !std::isfinite(gn)) break;
    Tensor cand = x;
    for (std::size_t i = 0; i < cand.size(); ++i) cand.data[i] -= step * g.data[i] / gn;
    project(cand);
    Tensor gc;
    const Objective next = f(cand, &gc);
    if (next.loss <= cur.loss) {
      x = std::move(cand);
      g = std::move(gc);
      cur = next;
      step *= 1.5;
    } else {
      step *= 0.5;
    }
  }
  return cur;
}

Tensor add_clipped(const Tensor& image, const Tensor& delta) {
  Tensor out = image;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += delta.data[i];
  clip(out, 0.0, 1.0);
  return out;
}

// Drops gradient components that would push w + delta past [0, 1]; a
// projected step along them would not move.
void drop_blocked(Tensor& grad, const Tensor& image, const Tensor& delta) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double v = image.data[i] + delta.data[i];
    if ((v <= 0.0 && grad.data[i] > 0.0) || (v >= 1.0 && grad.data[i] < 0.0)) grad.data[i] = 0.0;
  }
}

// Keeps w + delta inside [0, 1] and delta inside the mask.
void project_delta(Tensor& delta, const Tensor& image, const std::vector<std::uint8_t>& mask) {
  const std::size_t plane = delta.plane_size();
  for (std::size_t i = 0; i < delta.size(); ++i) {
    if (!mask.empty() && !mask[i % plane]) {
      delta.data[i] = 0.0;
      continue;
    }
    const double v = std::clamp(image.data[i] + delta.data[i], 0.0, 1.0);
    delta.data[i] = v - image.data[i];
  }
}

std::vector<std::uint8_t> target_mask(const Tensor& image, std::span<const GroundTruthObject> targets,
                                      int margin) {
  std::vector<std::uint8_t> mask(image.plane_size(), 0);
  for (const auto& t : targets) {
    const int x0 = std::max(0, static_cast<int>(std::floor(t.image_box.x0)) - margin);
    const int y0 = std::max(0, static_cast<int>(std::floor(t.image_box.y0)) - margin);
    const int x1 = std::min(image.width, static_cast<int>(std::ceil(t.image_box.x1)) + margin);
    const int y1 = std::min(image.height, static_cast<int>(std::ceil(t.image_box.y1)) + margin);
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) mask[static_cast<std::size_t>(y) * image.width + x] = 1;
  }
  return mask;
}

bool overlaps_any(const Detection& d, std::span<const GroundTruthObject> targets, double thr) {
  for (const auto& t : targets)
    if (iou(d.image_box, t.image_box) >= thr) return true;
  return false;
}

}  // namespace

// ---------------------------------------------------------------------------
// Disappearance

void AttackConfig::validate() const {
  if (max_outer_iterations < 0 || inner_steps < 0 || search_iterations < 0 ||
      patch_sweeps < 0 || patch_inner_steps < 0) {
    throw ConfigError("attack iteration counts must be non-negative");
  }
  if (!(eps_lo >= 0.0 && eps_lo <= eps_hi)) throw ConfigError("attack epsilon bounds unordered");
  if (top_k <= 0 || patch_size <= 0) throw ConfigError("top_k and patch_size must be positive");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  if (!(step_size > 0.0) || !(patch_step > 0.0)) throw ConfigError("step sizes must be positive");
  if (!(success_iou > 0.0 && success_iou <= 1.0)) throw ConfigError("success_iou in (0, 1]");
  if (!(patch_epsilon.epsilon0 >= patch_epsilon.floor && patch_epsilon.floor >= 0.0 &&
        patch_epsilon.decay > 0.0 && patch_epsilon.decay <= 1.0)) {
    throw ConfigError("patch epsilon schedule needs epsilon0 >= floor >= 0, decay in (0, 1]");
  }
}

Tensor apply_perturbation(const Tensor& image, const Perturbation& p) {
  if (!image.same_shape(p.delta)) throw InputError("perturbation shape differs from image");
  return add_clipped(image, p.delta);
}

double disappearance_loss(const AttackSurface& surface, const Tensor& delta,
                          std::span<const Box3> boxes, double epsilon, Tensor* grad,
                          AttackStage stage) {
  const Tensor& w = surface.clean_image();
  if (!w.same_shape(delta)) throw InputError("delta shape differs from image");
  const Tensor image = add_clipped(w, delta);
  double loss = stage == AttackStage::stage2 ? surface.foreground_mass(image, boxes, grad)
                                             : surface.objectness_mass(image, boxes, grad);
  const double d = l2_norm(delta.data);
  loss += epsilon * d;
  if (grad) {
    for (std::size_t i = 0; i < grad->size(); ++i) {
      const double v = w.data[i] + delta.data[i];
      if (v < 0.0 || v > 1.0) grad->data[i] = 0.0;
      if (d > 0.0) grad->data[i] += epsilon * delta.data[i] / d;
    }
  }
  return loss;
}

bool targets_hidden(std::span<const Detection> detections,
                    std::span<const GroundTruthObject> targets, double iou_threshold) {
  for (const auto& d : detections)
    if (overlaps_any(d, targets, iou_threshold)) return false;
  return true;
}

namespace {

std::vector<GroundTruthObject> resolve_targets(const Scene& scene, const TargetSet& ids) {
  std::vector<GroundTruthObject> out;
  if (ids.empty()) return scene.objects;
  for (int id : ids) {
    if (id < 0 || id >= static_cast<int>(scene.objects.size())) {
      throw InputError("target object " + std::to_string(id) + " not in scene " + scene.scene_id);
    }
    out.push_back(scene.objects[id]);
  }
  return out;
}

}  // namespace

AttackOutcome greedy_disappearance(const AttackSurface& surface, const TargetSet& target_ids,
                                   const AttackConfig& config, double epsilon) {
  const Tensor& w = surface.clean_image();
  const auto targets = resolve_targets(surface.scene(), target_ids);
  const double thr = surface.detection_threshold();
  AttackOutcome out;
  out.perturbation.epsilon = epsilon;
  out.perturbation.delta = zeros_like(w);
  if (config.masked) out.perturbation.mask = target_mask(w, targets, config.mask_margin);
  Tensor& delta = out.perturbation.delta;
  const auto& mask = out.perturbation.mask;

  double step = config.step_size;
  auto dets = surface.detect(w);
  int outer = 0;
  for (;; ++outer) {
    std::vector<Detection> visible;
    for (const auto& d : dets)
      if (overlaps_any(d, targets, config.success_iou)) visible.push_back(d);
    if (visible.empty() || outer >= config.max_outer_iterations) break;
    const std::size_t k = config.masked ? std::min<std::size_t>(config.top_k, visible.size()) : 1;
    std::vector<Box3> boxes;
    for (std::size_t i = 0; i < k; ++i) boxes.push_back(visible[i].proposal_box);

    const ObjectiveFn f = [&](const Tensor& x, Tensor* g) {
      Objective o;
      o.loss = disappearance_loss(surface, x, boxes, epsilon, g, config.stage);
      o.aux = o.loss - epsilon * l2_norm(x.data);
      if (g) drop_blocked(*g, w, x);
      return o;
    };
    // Stop once every attacked box is well below the threshold.
    const auto done = [&](const Objective& o) { return o.aux < 0.5 * thr; };
    const Objective res = normalized_descent(
        f, [&](Tensor& x) { project_delta(x, w, mask); }, delta, config.inner_steps, step, done);
    out.trace.push_back({outer, res.loss, visible.front().score, visible.front().anchor_id});
    dets = surface.detect(add_clipped(w, delta));
  }
  round_to_float(delta);
  project_delta(delta, w, mask);
  round_to_float(delta);
  const Tensor final_image = apply_perturbation(w, out.perturbation);
  out.success = targets_hidden(surface.detect(final_image), targets, config.success_iou);
  out.iterations = outer;
  out.distortion = per_pixel_l2(final_image, w);
  return out;
}

double binary_search_epsilon(const std::function<bool(double)>& succeeds, double eps_lo,
                             double eps_hi, int iterations) {
  if (!(eps_lo <= eps_hi)) throw ConfigError("binary search bounds unordered");
  if (iterations < 0) throw ConfigError("binary search iterations must be non-negative");
  if (!succeeds(eps_lo)) {
    throw UnattackableError("attack fails at the lower epsilon bound " + std::to_string(eps_lo));
  }
  double lo = eps_lo, hi = eps_hi;
  bool every_probe_succeeded = true;
  for (int i = 0; i < iterations; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (succeeds(mid)) {
      lo = mid;
    } else {
      hi = mid;
      every_probe_succeeded = false;
    }
  }
  if (every_probe_succeeded && succeeds(eps_hi)) return eps_hi;
  return lo;
}

AttackOutcome disappearance_attack(const AttackSurface& surface, const TargetSet& targets,
                                   const AttackConfig& config) {
  config.validate();
  std::vector<std::pair<double, AttackOutcome>> runs;
  auto run = [&](double eps) -> const AttackOutcome& {
    for (const auto& r : runs)
      if (r.first == eps) return r.second;
    runs.emplace_back(eps, greedy_disappearance(surface, targets, config, eps));
    return runs.back().second;
  };
  const double eps = binary_search_epsilon([&](double e) { return run(e).success; },
                                           config.eps_lo, config.eps_hi, config.search_iterations);
  return run(eps);
}

// ---------------------------------------------------------------------------
// Spoofing

void check_spoof_target(const AttackSurface& surface, const Box3& target) {
  const Scene& scene = surface.scene();
  if (occupied_cells(scene.bev, target.bev_box()) == 0) {
    throw SpoofTargetRejected("spoof target has no LIDAR support");
  }
  const Box2 image_box = surface.config().camera.project(target);
  for (const auto& o : scene.objects) {
    if (intersection_area(o.bev_box, target.bev_box()) > 0.0) {
      throw SpoofTargetRejected("spoof target overlaps a ground-truth BEV footprint");
    }
    if (intersection_area(o.image_box, image_box) > 0.0) {
      throw SpoofTargetRejected("spoof target overlaps a ground-truth image box");
    }
  }
}

double spoof_loss(const AttackSurface& surface, const Tensor& delta, const Box3& target,
                  int target_class, double alpha, Tensor* grad) {
  check_spoof_target(surface, target);
  const Tensor& w = surface.clean_image();
  if (!w.same_shape(delta)) throw InputError("delta shape differs from image");
  const Tensor image = add_clipped(w, delta);
  const double loss = surface.spoof_objective(image, target, target_class, alpha, grad);
  if (grad) {
    for (std::size_t i = 0; i < grad->size(); ++i) {
      const double v = w.data[i] + delta.data[i];
      if (v < 0.0 || v > 1.0) grad->data[i] = 0.0;
    }
  }
  return loss;
}

bool spoof_succeeded(std::span<const Detection> detections, const Box2& target_image_box,
                     int target_class, double threshold, double iou_threshold) {
  for (const auto& d : detections) {
    if (d.class_id == target_class && d.score >= threshold && d.iou_gt == 0.0 &&
        iou(d.image_box, target_image_box) >= iou_threshold) {
      return true;
    }
  }
  return false;
}

AttackOutcome spoof_attack(const AttackSurface& surface, const Box3& target, int target_class,
                           const AttackConfig& config) {
  config.validate();
  check_spoof_target(surface, target);
  const Tensor& w = surface.clean_image();
  const double thr = surface.detection_threshold();
  const Box2 target_image = clip_box(surface.config().camera.project(target), w.width, w.height);
  AttackOutcome out;
  out.perturbation.delta = zeros_like(w);
  Tensor& delta = out.perturbation.delta;
  const std::vector<std::uint8_t> no_mask;
  double step = config.step_size;
  int outer = 0;
  for (;; ++outer) {
    const auto dets = surface.detect(add_clipped(w, delta));
    if (spoof_succeeded(dets, target_image, target_class, thr, config.success_iou)) break;
    if (outer >= config.max_outer_iterations) break;
    const ObjectiveFn f = [&](const Tensor& x, Tensor* g) {
      const double loss = spoof_loss(surface, x, target, target_class, config.alpha, g);
      if (g) drop_blocked(*g, w, x);
      return Objective{loss, 0.0};
    };
    step = std::max(step, config.step_size);
    const Objective res = normalized_descent(
        f, [&](Tensor& x) { project_delta(x, w, no_mask); }, delta, config.inner_steps, step, {});
    out.trace.push_back({outer, res.loss, dets.empty() ? 0.0 : dets.front().score, -1});
  }
  round_to_float(delta);
  project_delta(delta, w, no_mask);
  round_to_float(delta);
  const Tensor final_image = apply_perturbation(w, out.perturbation);
  out.success = spoof_succeeded(surface.detect(final_image), target_image, target_class, thr,
                                config.success_iou);
  out.iterations = outer;
  out.distortion = per_pixel_l2(final_image, w);
  return out;
}

std::optional<Box3> choose_spoof_target(const Scene& scene, int target_class,
                                        const DetectorConfig& config, std::uint64_t seed) {
  const AnchorTemplate* tmpl = nullptr;
  if (target_class == kVehicle) tmpl = &config.anchor_templates.front();
  if (target_class == kPedestrianCyclist && config.anchor_templates.size() > 1) {
    tmpl = &config.anchor_templates[1];
  }
  if (!tmpl) throw InputError("no anchor template for spoof class");
  const int s = config.anchor_stride;
  std::vector<Box3> candidates;
  for (int r = 0; r * s < config.grid.rows; ++r) {
    for (int c = 0; c * s < config.grid.cols; ++c) {
      const Box3 box{c * s + 0.5 * s, r * s + 0.5 * s, tmpl->width, tmpl->length, tmpl->height};
      const Box2 bev = box.bev_box();
      const Box2 img = config.camera.project(box);
      if (bev.x0 < 0 || bev.y0 < 0 || bev.x1 > config.grid.cols || bev.y1 > config.grid.rows) {
        continue;
      }
      if (img.x0 < 0 || img.y0 < 0 || img.x1 > config.camera.image_width ||
          img.y1 > config.camera.image_height) {
        continue;
      }
      bool clear = true;
      for (const auto& o : scene.objects) {
        if (intersection_area(o.image_box, img) > 0.0 || intersection_area(o.bev_box, bev) > 0.0) {
          clear = false;
          break;
        }
      }
      if (clear) candidates.push_back(box);
    }
  }
  if (candidates.empty()) return std::nullopt;
  Rng rng(seed);
  return candidates[rng.uniform_int(0, static_cast<int>(candidates.size()) - 1)];
}

// ---------------------------------------------------------------------------
// Patches

std::vector<PatchPlacement> vehicle_placements(const Scene& scene) {
  std::vector<PatchPlacement> out;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    if (o.class_id == kVehicle && o.patchable_region.w > 0 && o.patchable_region.h > 0) {
      out.push_back({static_cast<int>(i), o.patchable_region});
    }
  }
  return out;
}

namespace {

struct Tap {
  int i0, i1;
  double f;
};

// Half-pixel-center source coordinate for output index `i`, clamped to the source.
Tap resize_tap(int i, int out_size, int src_size) {
  double s = (i + 0.5) * static_cast<double>(src_size) / out_size - 0.5;
  s = std::clamp(s, 0.0, static_cast<double>(src_size - 1));
  const int i0 = static_cast<int>(std::floor(s));
  const int i1 = std::min(i0 + 1, src_size - 1);
  return {i0, i1, s - i0};
}

void check_region(const PixelRect& r, const Tensor& image) {
  if (r.w <= 0 || r.h <= 0 || r.x < 0 || r.y < 0 || r.x + r.w > image.width ||
      r.y + r.h > image.height) {
    throw InputError("patch placement lies outside the image");
  }
}

}  // namespace

Tensor apply_patch(const Tensor& image, const Tensor& patch,
                   std::span<const PatchPlacement> placements) {
  if (patch.channels != image.channels) throw InputError("patch channel count differs from image");
  Tensor out = image;
  for (const auto& p : placements) {
    const PixelRect& r = p.region;
    check_region(r, image);
    for (int y = 0; y < r.h; ++y) {
      const Tap ty = resize_tap(y, r.h, patch.height);
      for (int x = 0; x < r.w; ++x) {
        const Tap tx = resize_tap(x, r.w, patch.width);
        for (int c = 0; c < image.channels; ++c) {
          const double top = (1 - tx.f) * patch(c, ty.i0, tx.i0) + tx.f * patch(c, ty.i0, tx.i1);
          const double bot = (1 - tx.f) * patch(c, ty.i1, tx.i0) + tx.f * patch(c, ty.i1, tx.i1);
          out(c, r.y + y, r.x + x) = (1 - ty.f) * top + ty.f * bot;
        }
      }
    }
  }
  return out;
}

void apply_patch_backward(const Tensor& image_grad, const Tensor& patch,
                          std::span<const PatchPlacement> placements, Tensor& patch_grad) {
  if (!patch_grad.same_shape(patch)) patch_grad = zeros_like(patch);
  // Later placements overwrite earlier ones, so each pixel belongs to the last writer.
  std::vector<int> owner(image_grad.plane_size(), -1);
  for (std::size_t k = 0; k < placements.size(); ++k) {
    const PixelRect& r = placements[k].region;
    check_region(r, image_grad);
    for (int y = r.y; y < r.y + r.h; ++y)
      for (int x = r.x; x < r.x + r.w; ++x)
        owner[static_cast<std::size_t>(y) * image_grad.width + x] = static_cast<int>(k);
  }
  for (std::size_t k = 0; k < placements.size(); ++k) {
    const PixelRect& r = placements[k].region;
    for (int y = 0; y < r.h; ++y) {
      const Tap ty = resize_tap(y, r.h, patch.height);
      for (int x = 0; x < r.w; ++x) {
        if (owner[static_cast<std::size_t>(r.y + y) * image_grad.width + r.x + x] !=
            static_cast<int>(k)) {
          continue;
        }
        const Tap tx = resize_tap(x, r.w, patch.width);
        for (int c = 0; c < patch.channels; ++c) {
          const double g = image_grad(c, r.y + y, r.x + x);
          patch_grad(c, ty.i0, tx.i0) += g * (1 - ty.f) * (1 - tx.f);
          patch_grad(c, ty.i0, tx.i1) += g * (1 - ty.f) * tx.f;
          patch_grad(c, ty.i1, tx.i0) += g * ty.f * (1 - tx.f);
          patch_grad(c, ty.i1, tx.i1) += g * ty.f * tx.f;
        }
      }
    }
  }
}

double update_epsilon(int i, const PatchSchedule& schedule) {
  return std::max(schedule.floor, schedule.epsilon0 * std::pow(schedule.decay, i));
}

Tensor random_patch(int size, std::uint64_t seed) {
  if (size <= 0) throw InputError("patch size must be positive");
  Rng rng(seed);
  Tensor p(3, size, size);
  for (double& v : p.data) v = static_cast<double>(static_cast<float>(rng.uniform()));
  return p;
}

namespace {

std::vector<GroundTruthObject> placed_objects(const Scene& scene,
                                              std::span<const PatchPlacement> placements) {
  std::vector<GroundTruthObject> out;
  for (const auto& p : placements) out.push_back(scene.objects.at(p.object_id));
  return out;
}

}  // namespace

Tensor universal_patch(std::span<const AttackSurface> train, const AttackConfig& config,
                       std::optional<int> iterations) {
  if (train.empty()) throw InputError("universal patch needs at least one training scene");
  config.validate();
  Tensor patch = random_patch(config.patch_size, config.seed);
  const int n = iterations.value_or(config.patch_sweeps * static_cast<int>(train.size()));
  for (int i = 0; i < n; ++i) {
    const AttackSurface& s = train[i % train.size()];
    const auto placements = vehicle_placements(s.scene());
    if (placements.empty()) continue;
    const auto targets = placed_objects(s.scene(), placements);
    const double eps = update_epsilon(i, config.patch_epsilon);
    const Tensor& w = s.clean_image();
    for (int step = 0; step < config.patch_inner_steps; ++step) {
      const Tensor image = apply_patch(w, patch, placements);
      std::vector<Box3> boxes;
      for (const auto& d : s.detect(image)) {
        if (static_cast<int>(boxes.size()) >= config.top_k) break;
        if (overlaps_any(d, targets, config.success_iou)) boxes.push_back(d.proposal_box);
      }
      if (boxes.empty()) break;
      // Per-box -log p(background) keeps a usable gradient where the
      // probabilities saturate; its minimizers are those of the mass.
      Tensor gi;
      s.background_nll(image, boxes, &gi);
      double d2 = 0.0;
      for (std::size_t k = 0; k < image.size(); ++k) {
        const double diff = image.data[k] - w.data[k];
        d2 += diff * diff;
      }
      const double d = std::sqrt(d2);
      if (d > 0.0) {
        for (std::size_t k = 0; k < gi.size(); ++k) gi.data[k] += eps * (image.data[k] - w.data[k]) / d;
      }
      Tensor g = zeros_like(patch);
      apply_patch_backward(gi, patch, placements, g);
      const double gn = l2_norm(g.data);
      if (!(gn > 0.0) || !std::isfinite(gn)) break;
      for (std::size_t k = 0; k < g.size(); ++k) patch.data[k] -= config.patch_step * g.data[k] / gn;
      clip(patch, 0.0, 1.0);
    }
  }
  round_to_float(patch);
  return patch;
}

std::vector<PatchResult> evaluate_patch(const AttackSurface& surface, const Tensor& patch,
                                        double iou_threshold) {
  const Scene& scene = surface.scene();
  const auto placements = vehicle_placements(scene);
  std::vector<PatchResult> out;
  if (placements.empty()) return out;
  const auto clean = surface.detect(scene.image);
  const auto attacked = surface.detect(apply_patch(scene.image, patch, placements));
  for (const auto& p : placements) {
    const GroundTruthObject& obj = scene.objects[p.object_id];
    const std::span<const GroundTruthObject> one(&obj, 1);
    if (targets_hidden(clean, one, iou_threshold)) continue;
    out.push_back({p.object_id, targets_hidden(attacked, one, iou_threshold)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

void save_perturbation(const Perturbation& p, const std::filesystem::path& path,
                       const Provenance& provenance) {
  ArrayFile file;
  file.magic = kPerturbationMagic;
  file.arrays.push_back(to_named_array("delta", p.delta));
  if (p.has_mask()) {
    NamedArray m;
    m.name = "mask";
    m.shape = {static_cast<std::uint32_t>(p.delta.height), static_cast<std::uint32_t>(p.delta.width)};
    for (auto v : p.mask) m.values.push_back(static_cast<float>(v));
    file.arrays.push_back(std::move(m));
  }
  nlohmann::json meta{{"kind", "perturbation"},
                      {"epsilon", p.epsilon},
                      {"config_hash", provenance.config_hash},
                      {"seed", provenance.seed}};
  file.metadata = meta.dump();
  write_array_file(path, file);
}

Perturbation load_perturbation(const std::filesystem::path& path) {
  const ArrayFile file = read_array_file(path, kPerturbationMagic);
  Perturbation p;
  p.delta = to_tensor(file.get("delta"));
  for (const auto& a : file.arrays) {
    if (a.name != "mask") continue;
    for (float v : a.values) p.mask.push_back(v != 0.0f ? 1 : 0);
  }
  try {
    p.epsilon = nlohmann::json::parse(file.metadata).value("epsilon", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("perturbation metadata is not valid JSON: ") + e.what(), 0);
  }
  return p;
}

void save_patch(const Tensor& patch, const std::filesystem::path& path,
                const Provenance& provenance) {
  ArrayFile file;
  file.magic = kPerturbationMagic;
  file.arrays.push_back(to_named_array("patch", patch));
  nlohmann::json meta{{"kind", "patch"},
                      {"config_hash", provenance.config_hash},
                      {"seed", provenance.seed}};
  file.metadata = meta.dump();
  write_array_file(path, file);
}

Tensor load_patch(const std::filesystem::path& path) {
  return to_tensor(read_array_file(path, kPerturbationMagic).get("patch"));
}

}  // namespace fusionbench
