#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "fusionbench/detector.hpp"
#include "fusionbench/rng.hpp"
#include "fusionbench/scene.hpp"

namespace fusionbench {

enum class LossMode { standard, maxssn };

LossMode parse_loss_mode(std::string_view name);
std::string_view to_string(LossMode mode);

struct RpnSample {
  int anchor = 0;  // index into the anchor list
  bool positive = false;
  std::array<double, kBoxParams> target{};  // regression target (positives only)
};

struct Stage2Sample {
  Box3 box;
  int label = kBackground;
  std::array<double, kBoxParams> target{};  // regression target (foreground only)
};

/// Per-scene supervision. Boxes do not depend on the parameters, so the same
/// targets can be reused across the clean and noisy passes of one step.
struct TrainingTargets {
  std::vector<RpnSample> rpn;
  std::vector<Stage2Sample> stage2;
};

/// RPN labels use BEV IOU against ground truth: positive at >= 0.45 or the
/// best anchor of an object, negative below 0.25. Stage-2 boxes are jittered
/// ground truth, positive anchors and negative anchors (half of them with
/// LIDAR support), labeled by image IOU (>= 0.5 foreground, < 0.4 background).
TrainingTargets sample_training_targets(const Scene& scene, std::span<const AnchorBox> anchors,
                                        const DetectorConfig& config, Rng& rng);

struct LossBreakdown {
  double total = 0.0;
  double rpn_class = 0.0;
  double rpn_box = 0.0;
  double stage2_class = 0.0;
  double stage2_box = 0.0;
};

/// Detection loss of one scene. Accumulates parameter gradients into
/// `param_grads` and the image gradient into `image_grad` when non-null.
/// With `lel_rng` set, every head evaluation draws one fusion member
/// uniformly (LEL training); otherwise inference semantics apply.
LossBreakdown detection_loss(const DetectorParams& params, const DetectorConfig& config,
                             const Tensor& image, const Tensor& bev,
                             const TrainingTargets& targets, DetectorParams* param_grads,
                             Tensor* image_grad, Rng* lel_rng = nullptr, double scale = 1.0);

/// Modifies a training image in place (augmentation).
using ImageTransform = std::function<void(Tensor& image, Rng& rng)>;

/// Replaces a training image by an adversarial version before the update.
using AdversaryFn = std::function<void(const DetectorParams& params, Tensor& image,
                                       const Tensor& bev, const TrainingTargets& targets,
                                       Rng& rng)>;

struct TrainOptions {
  LossMode loss_mode = LossMode::standard;
  double maxssn_noise = 0.1;         // Gaussian sigma of single-source noise
  double maxssn_clean_weight = 0.2;  // weight of the clean term
  ImageTransform augment;
  AdversaryFn adversary;
  std::function<void(int epoch, double mean_loss)> on_epoch;
};

struct TrainResult {
  DetectorParams params;
  std::vector<double> epoch_loss;  // mean total loss per epoch, before each update
};

/// MaxSSN objective of one scene:
/// (1 - w) * max(L(image + n, bev), L(image, bev + n)) + w * L(image, bev).
/// Gradients flow through the selected noisy term and the clean term.
double maxssn_loss(const DetectorParams& params, const DetectorConfig& config,
                   const Tensor& image, const Tensor& bev, const TrainingTargets& targets,
                   double noise, double clean_weight, Rng& noise_rng, DetectorParams* param_grads,
                   Rng* lel_rng = nullptr);

/// Adam over single-scene steps with global-norm clipping. The parameters
/// are rounded to float32 at the end. Throws TrainingDivergedError on a
/// non-finite loss and InputError on an empty dataset.
TrainResult train_detector(std::span<const Scene> dataset, const DetectorConfig& config,
                           FusionMode fusion_mode, const TrainOptions& options = {});

}  // namespace fusionbench
