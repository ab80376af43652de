#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fusionbench/dataset.hpp"
#include "fusionbench/geometry.hpp"
#include "fusionbench/nn.hpp"
#include "fusionbench/scene.hpp"
#include "fusionbench/tensor.hpp"

namespace fusionbench {

enum class FusionMode { mean, lel };

/// One member of the fusion ensemble.
enum class FusionVariant { image_only, bev_only, mean };

FusionMode parse_fusion_mode(std::string_view name);  // ConfigError on unknown names
std::string_view to_string(FusionMode mode);

// Fixed architecture.
inline constexpr int kFeatureChannels = 16;
inline constexpr int kFeatureStride = 4;  // both branches downsample by 4
inline constexpr int kRpnCrop = 3;
inline constexpr int kRpnHidden = 32;
inline constexpr int kStage2Crop = 5;
inline constexpr int kStage2Hidden = 64;
inline constexpr int kBoxParams = 5;

/// All learnable weights plus the fusion switch.
struct DetectorParams {
  FusionMode fusion_mode = FusionMode::mean;
  std::string version = "fusionbench-detector/1";
  ConvStack image_branch;
  ConvStack bev_branch;
  Mlp rpn_head;
  Mlp stage2_head;

  /// Randomly initialized parameters (float-representable).
  static DetectorParams create(FusionMode mode, std::uint64_t seed);

  DetectorParams zeros_like() const;
  std::vector<ParamArray*> arrays();
  std::vector<const ParamArray*> arrays() const;
  std::size_t parameter_count() const;
  bool all_finite() const;

  bool operator==(const DetectorParams& other) const;
};

void save_checkpoint(const DetectorParams& params, const std::filesystem::path& path,
                     const Provenance& provenance = {});
DetectorParams load_checkpoint(const std::filesystem::path& path,
                               Provenance* provenance = nullptr);

struct AnchorTemplate {
  double width = 1.0;   // cells
  double length = 1.0;  // cells
  double height = 1.0;  // meters

  bool operator==(const AnchorTemplate&) const = default;
};

struct TrainConfig {
  double learning_rate = 2e-3;
  int epochs = 16;
  std::uint64_t seed = 7;
  int rpn_batch = 64;
  int rpn_max_positives = 16;
  int stage2_batch = 32;
  double regression_weight = 1.0;
  double grad_clip = 10.0;

  bool operator==(const TrainConfig&) const = default;
};

struct DetectorConfig {
  double detection_threshold = 0.5;
  double nms_iou_threshold = 0.45;
  double rpn_nms_iou_threshold = 0.7;
  int top_n_proposals = 64;
  int anchor_stride = 4;  // cells
  std::vector<AnchorTemplate> anchor_templates{{11.5, 17.0, 1.55}, {4.6, 4.6, 1.7}};
  Camera camera;
  GridSpec grid;
  TrainConfig train;

  /// Throws ConfigError on thresholds outside (0, 1) or non-positive counts.
  void validate() const;

  bool operator==(const DetectorConfig&) const = default;
};

/// Joint camera/BEV anchor linked by the fixed projection.
struct AnchorBox {
  Box2 image_box;  // pixels, clipped to the image
  Box2 bev_box;    // cells, clipped to the grid
  Box3 box;
  int anchor_id = -1;
};

std::vector<AnchorBox> make_anchors(const DetectorConfig& config);
AnchorBox make_anchor_box(const Box3& box, int anchor_id, const DetectorConfig& config);

struct Detection {
  Box2 image_box;
  Box2 bev_box;
  Box3 box;
  Box3 proposal_box;  // region stage 2 classified
  std::array<double, kNumClasses> softmax{};
  double score = 0.0;  // max non-background probability
  int class_id = kBackground;
  double iou_gt = 0.0;
  int anchor_id = -1;
};

struct Proposal {
  AnchorBox box;  // regressed anchor; keeps the source anchor id
  double objectness = 0.0;
};

enum class Head { rpn, stage2 };

struct HeadOutput {
  std::vector<double> probs;  // softmax (ensemble-averaged under LEL inference)
  std::array<double, kBoxParams> deltas{};
};

/// Elementwise fusion of two equally shaped feature tensors.
/// mean: (a + b) / 2. lel: at inference the mean of the three ensemble
/// members (image-only, BEV-only, mean); with `training_rng` set, one member
/// drawn uniformly.
Tensor fuse_features(const Tensor& image_feat, const Tensor& bev_feat, FusionMode mode,
                     Rng* training_rng = nullptr);

/// Ensemble members evaluated by the heads at inference for a fusion mode.
std::vector<FusionVariant> inference_variants(FusionMode mode);

/// One evaluation of the network on an (image, BEV) pair.
///
/// Heads are evaluated on demand per box; `evaluate` records what backward
/// needs, `peek` does not. Gradients are injected per head then pulled back
/// through both branches by `backward`. The two branches never share state,
/// so image gradients cannot reach BEV features and vice versa.
class ForwardPass {
 public:
  ForwardPass(const DetectorParams& params, const DetectorConfig& config, const Tensor& image,
              const Tensor& bev);
  /// Reuses a precomputed BEV branch (the LIDAR input is fixed during image attacks).
  ForwardPass(const DetectorParams& params, const DetectorConfig& config, const Tensor& image,
              std::shared_ptr<const ConvStack::Cache> bev_branch);

  const Tensor& image_features() const { return image_cache_.output(); }
  const Tensor& bev_features() const { return bev_cache_->output(); }

  /// Forward only.
  HeadOutput peek(Head head, const Box3& box) const;

  /// Forward with backward bookkeeping. Returns a handle.
  int evaluate(Head head, const Box3& box, std::optional<FusionVariant> forced = {});
  const HeadOutput& output(int handle) const { return records_[handle].out; }
  const std::vector<double>& member_logits(int handle, std::size_t member) const {
    return records_[handle].logits[member];
  }

  /// Gradient with respect to the (averaged) probabilities and deltas.
  void add_grad_probs(int handle, std::span<const double> grad_probs,
                      std::span<const double> grad_deltas = {});
  /// Gradient with respect to the logits of a single-member head.
  void add_grad_logits(int handle, std::span<const double> grad_logits,
                       std::span<const double> grad_deltas = {});

  /// Backpropagates everything injected so far. Any output may be null.
  void backward(DetectorParams* param_grads, Tensor* image_grad, Tensor* bev_grad);

  static std::shared_ptr<const ConvStack::Cache> run_bev_branch(const DetectorParams& params,
                                                                const Tensor& bev);

 private:
  struct Record {
    Head head;
    std::vector<FusionVariant> variants;
    CropPlan image_plan;
    CropPlan bev_plan;
    std::vector<double> image_crop;
    std::vector<double> bev_crop;
    std::vector<Mlp::Cache> caches;
    std::vector<std::vector<double>> logits;
    std::vector<std::vector<double>> member_probs;
    std::vector<std::vector<double>> grad_logits;
    std::vector<std::array<double, kBoxParams>> grad_deltas;
    HeadOutput out;
  };

  const Mlp& head_net(Head head) const;
  int crop_size(Head head) const;
  int class_count(Head head) const;
  void prepare_crops(Head head, const Box3& box, CropPlan& ip, CropPlan& bp,
                     std::vector<double>& ic, std::vector<double>& bc) const;

  const DetectorParams& params_;
  Camera camera_;
  ConvStack::Cache image_cache_;
  std::shared_ptr<const ConvStack::Cache> bev_cache_;
  std::vector<Record> records_;
};

struct FeatureMaps {
  Tensor image;
  Tensor bev;
};

FeatureMaps extract_features(const Tensor& image, const Tensor& bev, const DetectorParams& params);

/// Interface every detector used by the reliance analysis implements.
class SceneDetector {
 public:
  virtual ~SceneDetector() = default;
  virtual std::vector<Detection> detect(const Tensor& image, const Tensor& bev) const = 0;
};

/// Two-stage fusion detector: features -> RPN -> LIDAR filter -> stage 2 -> NMS -> threshold.
/// Holds a reference to `params`; the caller keeps them alive.
class FusionDetector : public SceneDetector {
 public:
  FusionDetector(const DetectorParams& params, DetectorConfig config);

  const DetectorParams& params() const { return params_; }
  const DetectorConfig& config() const { return config_; }
  const std::vector<AnchorBox>& anchors() const { return anchors_; }

  /// At most top_n_proposals entries sorted by objectness (ties by anchor id).
  std::vector<Proposal> rpn_propose(const Tensor& image, const Tensor& bev) const;
  std::vector<Proposal> rpn_propose(const ForwardPass& pass) const;

  /// One Detection per proposal, in input order.
  std::vector<Detection> stage2_classify(const Tensor& image, const Tensor& bev,
                                         std::span<const Proposal> proposals) const;
  std::vector<Detection> stage2_classify(const ForwardPass& pass,
                                         std::span<const Proposal> proposals) const;

  std::vector<Detection> detect(const Tensor& image, const Tensor& bev) const override;
  /// Same pipeline; fills iou_gt from the scene's ground truth.
  std::vector<Detection> detect(const Scene& scene) const;
  /// Pipeline on an existing pass; `threshold` overrides detection_threshold when set.
  std::vector<Detection> detect(const ForwardPass& pass, const Tensor& bev,
                                std::optional<double> threshold = {}) const;

 private:
  const DetectorParams& params_;
  DetectorConfig config_;
  std::vector<AnchorBox> anchors_;
};

/// Keeps, in order, the proposals whose BEV box touches at least one occupied cell.
std::vector<Proposal> filter_anchors_without_lidar(std::span<const Proposal> proposals,
                                                   const Tensor& bev);

/// Greedy NMS on image boxes: descending score, ties broken by ascending anchor id.
std::vector<Detection> nms(std::span<const Detection> detections, double iou_threshold);

/// Sets iou_gt to the best image-box IOU against `objects` (0 when none).
void annotate_iou_gt(std::vector<Detection>& detections,
                     std::span<const GroundTruthObject> objects);

struct BenignMetrics {
  double recall = 0.0;           // class-aware, at the detection threshold
  double average_precision = 0.0;  // 11-point interpolated, IOU 0.5, mean over classes
  int ground_truth = 0;
  int detections = 0;
};

BenignMetrics evaluate_benign(const FusionDetector& detector, std::span<const Scene> scenes);

}  // namespace fusionbench
