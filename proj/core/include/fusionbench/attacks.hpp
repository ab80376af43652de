#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fusionbench/detector.hpp"
#include "fusionbench/scene.hpp"
#include "fusionbench/tensor.hpp"

namespace fusionbench {

/// Everything a white-box attacker may touch for one scene: the post-NMS,
/// thresholded detections and the gradients of the declared losses. There
/// is deliberately no accessor for proposals or pre-NMS boxes.
///
/// The LIDAR input is fixed, so its branch is evaluated once. Loss methods
/// write d(loss)/d(image) into `grad` when it is non-null.
class AttackSurface {
 public:
  AttackSurface(const FusionDetector& detector, const Scene& scene);

  const Scene& scene() const { return scene_; }
  const Tensor& clean_image() const { return scene_.image; }
  double detection_threshold() const;
  const DetectorConfig& config() const;

  /// Visible detections on `image` with iou_gt filled from the scene.
  std::vector<Detection> detect(const Tensor& image) const;

  /// Sum over boxes of the non-background stage-2 probability.
  double foreground_mass(const Tensor& image, std::span<const Box3> boxes, Tensor* grad) const;

  /// Sum over boxes of -log p_background (probabilities floored at 1e-12).
  double background_nll(const Tensor& image, std::span<const Box3> boxes, Tensor* grad) const;

  /// Sum over boxes of the RPN objectness at the anchor nearest each box.
  double objectness_mass(const Tensor& image, std::span<const Box3> boxes, Tensor* grad) const;

  /// RPN term of the spoofing loss: -log objectness of the anchor nearest
  /// `target` plus a smooth-L1 pull of its regression toward `target`.
  double objectness_nll(const Tensor& image, const Box3& target, Tensor* grad) const;

  /// Stage-2 term of the spoofing loss: mean -log p(target_class) over
  /// `target` and four copies shifted by 15% of its extent, plus a
  /// smooth-L1 pull of each refinement back onto `target`.
  double class_nll(const Tensor& image, const Box3& target, int target_class,
                   Tensor* grad) const;

  /// objectness_nll + alpha * class_nll from a single forward pass.
  double spoof_objective(const Tensor& image, const Box3& target, int target_class, double alpha,
                         Tensor* grad) const;

  /// Anchor with the highest BEV IOU against `box` (lowest id on ties).
  const AnchorBox& nearest_anchor(const Box3& box) const;

 private:
  struct Term;
  static std::vector<Term> stage2_spoof_terms(const Box3& target, int target_class, double weight);
  double evaluate(const Tensor& image, std::span<const Term> terms, Tensor* grad) const;

  const FusionDetector& detector_;
  const Scene& scene_;
  std::shared_ptr<const ConvStack::Cache> bev_branch_;
};

/// Additive image perturbation. When a mask is present delta is zero outside it.
struct Perturbation {
  Tensor delta;                    // 3 x H x W
  std::vector<std::uint8_t> mask;  // H x W, empty for none
  double epsilon = 0.0;

  bool has_mask() const { return !mask.empty(); }
};

/// clip(image + delta, 0, 1).
Tensor apply_perturbation(const Tensor& image, const Perturbation& p);

enum class AttackStage { stage2, rpn };

struct PatchSchedule {
  double epsilon0 = 0.05;
  double floor = 0.005;
  double decay = 0.9;
};

struct AttackConfig {
  int max_outer_iterations = 20;
  int inner_steps = 12;
  double step_size = 0.5;  // initial L2 length of a descent step
  double eps_lo = 0.0;
  double eps_hi = 0.01;
  int search_iterations = 4;
  int top_k = 5;
  double alpha = 0.1;
  double success_iou = 0.5;
  bool masked = false;
  int mask_margin = 2;  // pixels added around target boxes
  AttackStage stage = AttackStage::stage2;

  int patch_size = 16;
  int patch_sweeps = 25;
  int patch_inner_steps = 1;
  double patch_step = 0.25;  // L2 length of each normalized patch step
  PatchSchedule patch_epsilon;

  std::uint64_t seed = 17;

  /// Throws ConfigError on unordered bounds, non-positive counts or alpha < 0.
  void validate() const;
};

struct TraceEntry {
  int outer = 0;
  double loss = 0.0;
  double top_score = 0.0;
  int attacked_anchor = -1;  // top attacked box of this iteration
};

struct AttackOutcome {
  bool success = false;
  int iterations = 0;
  Perturbation perturbation;
  double distortion = 0.0;  // per-pixel L2 of the applied change
  std::vector<TraceEntry> trace;
};

/// Disappearance objective: sum_b (1 - p_background(b)) + epsilon * ||delta||_2
/// evaluated on clip(w + delta). `grad` receives d/d(delta).
double disappearance_loss(const AttackSurface& surface, const Tensor& delta,
                          std::span<const Box3> boxes, double epsilon, Tensor* grad,
                          AttackStage stage = AttackStage::stage2);

/// Object indices whose detection the attack must remove. Empty means all objects.
using TargetSet = std::vector<int>;

/// True when no visible detection overlaps any target with image IOU >= iou.
bool targets_hidden(std::span<const Detection> detections, std::span<const GroundTruthObject> targets,
                    double iou);

/// Greedy disappearance at a fixed epsilon: repeatedly take the top visible
/// box (top-k when masked) overlapping a target and descend the disappearance
/// objective on it.
AttackOutcome greedy_disappearance(const AttackSurface& surface, const TargetSet& targets,
                                   const AttackConfig& config, double epsilon);

/// Largest epsilon in [eps_lo, eps_hi] for which `succeeds` holds, assuming
/// success is monotone (harder as epsilon grows). eps_lo is checked first
/// and UnattackableError is thrown when it fails.
double binary_search_epsilon(const std::function<bool(double)>& succeeds, double eps_lo,
                             double eps_hi, int iterations);

/// Disappearance with epsilon chosen by binary search; the outcome is the
/// run at the selected epsilon. Throws UnattackableError when even eps_lo fails.
AttackOutcome disappearance_attack(const AttackSurface& surface, const TargetSet& targets,
                                   const AttackConfig& config);

/// Spoofing objective on clip(w + delta): L_RPN + alpha * L_Stage2. `grad`
/// receives d/d(delta).
/// Throws SpoofTargetRejected when the target footprint has no LIDAR return.
double spoof_loss(const AttackSurface& surface, const Tensor& delta, const Box3& target,
                  int target_class, double alpha, Tensor* grad);

/// True when a visible detection of `target_class` with score at least the
/// detection threshold matches `target` (image IOU >= iou) and no ground truth.
bool spoof_succeeded(std::span<const Detection> detections, const Box2& target_image_box,
                     int target_class, double threshold, double iou);

/// Throws SpoofTargetRejected for targets without BEV support or overlapping
/// ground truth in either view.
void check_spoof_target(const AttackSurface& surface, const Box3& target);

AttackOutcome spoof_attack(const AttackSurface& surface, const Box3& target, int target_class,
                           const AttackConfig& config);

/// Picks an empty-road spoof target in `scene` (no ground-truth overlap in
/// either view, inside the image) for `target_class`, or nullopt.
std::optional<Box3> choose_spoof_target(const Scene& scene, int target_class,
                                        const DetectorConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Patches

struct PatchPlacement {
  int object_id = 0;
  PixelRect region;
};

/// Replacement patch shared across scenes; placements are per scene.
struct Patch {
  Tensor delta;  // 3 x p x p, values in [0, 1]
  std::vector<PatchPlacement> placements;
};

/// Placements on every vehicle's patchable region.
std::vector<PatchPlacement> vehicle_placements(const Scene& scene);

/// Operator P: bilinearly resizes the patch (half-pixel centers, edge clamp)
/// to each region and replaces those pixels. Throws InputError when a region
/// leaves the image.
Tensor apply_patch(const Tensor& image, const Tensor& patch,
                   std::span<const PatchPlacement> placements);

/// Adjoint of apply_patch with respect to the patch: accumulates the image
/// gradient inside each region back onto `patch_grad`.
void apply_patch_backward(const Tensor& image_grad, const Tensor& patch,
                          std::span<const PatchPlacement> placements, Tensor& patch_grad);

/// max(floor, epsilon0 * decay^i).
double update_epsilon(int i, const PatchSchedule& schedule);

/// Uniform [0, 1] patch, deterministic per seed.
Tensor random_patch(int size, std::uint64_t seed);

/// Modified EOT: one scene at a time in cyclic order for
/// patch_sweeps * |T| iterations, attacking the top-k visible boxes that
/// overlap patched vehicles. `iterations` overrides the count when set.
Tensor universal_patch(std::span<const AttackSurface> train, const AttackConfig& config,
                       std::optional<int> iterations = {});

/// Per-vehicle outcome of pasting `patch` on every vehicle of a scene:
/// entry i is true when vehicle i (detected on the clean image) vanished.
/// Vehicles not detected on the clean image are omitted.
struct PatchResult {
  int object_id = 0;
  bool success = false;
};
std::vector<PatchResult> evaluate_patch(const AttackSurface& surface, const Tensor& patch,
                                        double iou);

// ---------------------------------------------------------------------------
// Persistence (same container as checkpoints)

void save_perturbation(const Perturbation& p, const std::filesystem::path& path,
                       const Provenance& provenance = {});
Perturbation load_perturbation(const std::filesystem::path& path);
void save_patch(const Tensor& patch, const std::filesystem::path& path,
                const Provenance& provenance = {});
Tensor load_patch(const std::filesystem::path& path);

}  // namespace fusionbench
