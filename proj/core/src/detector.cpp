#include "fusionbench/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "fusionbench/array_io.hpp"
#include "fusionbench/errors.hpp"

namespace fusionbench {

FusionMode parse_fusion_mode(std::string_view name) {
  if (name == "mean") return FusionMode::mean;
  if (name == "lel") return FusionMode::lel;
  throw ConfigError("unknown fusion mode: " + std::string(name));
}

std::string_view to_string(FusionMode mode) {
  return mode == FusionMode::mean ? "mean" : "lel";
}

// ---------------------------------------------------------------------------
// Parameters

DetectorParams DetectorParams::create(FusionMode mode, std::uint64_t seed) {
  DetectorParams p;
  p.fusion_mode = mode;
  p.image_branch.layers = {Conv2d("image.conv0", 3, 8, 2), Conv2d("image.conv1", 8, 16, 2),
                           Conv2d("image.conv2", 16, kFeatureChannels, 1)};
  p.bev_branch.layers = {Conv2d("bev.conv0", 2, 8, 2), Conv2d("bev.conv1", 8, 16, 2),
                         Conv2d("bev.conv2", 16, kFeatureChannels, 1)};
  p.rpn_head = Mlp("rpn", kFeatureChannels * kRpnCrop * kRpnCrop, kRpnHidden, 2 + kBoxParams);
  p.stage2_head = Mlp("stage2", kFeatureChannels * kStage2Crop * kStage2Crop, kStage2Hidden,
                      kNumClasses + kBoxParams);
  Rng rng(seed);
  for (auto& l : p.image_branch.layers) l.init(rng);
  for (auto& l : p.bev_branch.layers) l.init(rng);
  p.rpn_head.init(rng);
  p.stage2_head.init(rng);
  for (ParamArray* a : p.arrays()) {
    for (double& v : a->values) v = static_cast<double>(static_cast<float>(v));
  }
  return p;
}

DetectorParams DetectorParams::zeros_like() const {
  DetectorParams z = *this;
  for (ParamArray* a : z.arrays()) std::fill(a->values.begin(), a->values.end(), 0.0);
  return z;
}

std::vector<ParamArray*> DetectorParams::arrays() {
  std::vector<ParamArray*> out;
  for (auto* stack : {&image_branch, &bev_branch}) {
    for (auto& l : stack->layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
  }
  for (auto* head : {&rpn_head, &stage2_head}) {
    out.push_back(&head->hidden.weight);
    out.push_back(&head->hidden.bias);
    out.push_back(&head->output.weight);
    out.push_back(&head->output.bias);
  }
  return out;
}

std::vector<const ParamArray*> DetectorParams::arrays() const {
  auto mut = const_cast<DetectorParams*>(this)->arrays();
  return {mut.begin(), mut.end()};
}

std::size_t DetectorParams::parameter_count() const {
  std::size_t n = 0;
  for (const ParamArray* a : arrays()) n += a->values.size();
  return n;
}

bool DetectorParams::all_finite() const {
  for (const ParamArray* a : arrays())
    for (double v : a->values)
      if (!std::isfinite(v)) return false;
  return true;
}

bool DetectorParams::operator==(const DetectorParams& other) const {
  if (fusion_mode != other.fusion_mode || version != other.version) return false;
  const auto a = arrays();
  const auto b = other.arrays();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(*a[i] == *b[i])) return false;
  return true;
}

void save_checkpoint(const DetectorParams& params, const std::filesystem::path& path,
                     const Provenance& provenance) {
  ArrayFile file;
  file.magic = kCheckpointMagic;
  for (const ParamArray* a : params.arrays()) {
    NamedArray na;
    na.name = a->name;
    for (int d : a->shape) na.shape.push_back(static_cast<std::uint32_t>(d));
    na.values.reserve(a->values.size());
    for (double v : a->values) na.values.push_back(static_cast<float>(v));
    file.arrays.push_back(std::move(na));
  }
  nlohmann::json meta{{"format", "fusionbench-checkpoint"},
                      {"version", params.version},
                      {"fusion_mode", std::string(to_string(params.fusion_mode))},
                      {"parameter_count", params.parameter_count()},
                      {"config_hash", provenance.config_hash},
                      {"seed", provenance.seed}};
  file.metadata = meta.dump();
  write_array_file(path, file);
}

DetectorParams load_checkpoint(const std::filesystem::path& path, Provenance* provenance) {
  const ArrayFile file = read_array_file(path, kCheckpointMagic);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(file.metadata);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what(), 0);
  }
  DetectorParams params =
      DetectorParams::create(parse_fusion_mode(meta.value("fusion_mode", "mean")), 0);
  params.version = meta.value("version", params.version);
  auto arrays = params.arrays();
  if (arrays.size() != file.arrays.size()) {
    throw FormatError("checkpoint holds " + std::to_string(file.arrays.size()) +
                          " arrays, expected " + std::to_string(arrays.size()),
                      8);
  }
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    const NamedArray& na = file.arrays[i];
    ParamArray& pa = *arrays[i];
    std::vector<int> shape(na.shape.begin(), na.shape.end());
    if (na.name != pa.name || shape != pa.shape) {
      throw FormatError("checkpoint array '" + na.name + "' does not match '" + pa.name + "'", 0);
    }
    for (std::size_t k = 0; k < na.values.size(); ++k) pa.values[k] = na.values[k];
  }
  if (provenance) {
    provenance->config_hash = meta.value("config_hash", std::string{});
    provenance->seed = meta.value("seed", std::uint64_t{0});
  }
  return params;
}

// ---------------------------------------------------------------------------
// Configuration and anchors

void DetectorConfig::validate() const {
  auto unit = [](double v, const char* what) {
    if (!(v > 0.0 && v < 1.0)) throw ConfigError(std::string(what) + " must lie in (0, 1)");
  };
  unit(detection_threshold, "detection_threshold");
  unit(nms_iou_threshold, "nms_iou_threshold");
  unit(rpn_nms_iou_threshold, "rpn_nms_iou_threshold");
  if (top_n_proposals <= 0) throw ConfigError("top_n_proposals must be positive");
  if (anchor_stride <= 0) throw ConfigError("anchor_stride must be positive");
  if (anchor_templates.empty()) throw ConfigError("at least one anchor template required");
  for (const auto& t : anchor_templates) {
    if (t.width <= 0 || t.length <= 0 || t.height <= 0) throw ConfigError("anchor template size");
  }
  if (train.epochs < 0 || train.rpn_batch <= 0 || train.stage2_batch <= 0 ||
      !(train.learning_rate > 0.0)) {
    throw ConfigError("training hyperparameters must be positive");
  }
  if (camera.bev_rows != grid.rows) throw ConfigError("camera/grid row count mismatch");
}

AnchorBox make_anchor_box(const Box3& box, int anchor_id, const DetectorConfig& config) {
  AnchorBox a;
  a.box = box;
  a.anchor_id = anchor_id;
  a.bev_box = clip_box(box.bev_box(), config.grid.cols, config.grid.rows);
  a.image_box = clip_box(config.camera.project(box), config.camera.image_width,
                         config.camera.image_height);
  return a;
}

std::vector<AnchorBox> make_anchors(const DetectorConfig& config) {
  std::vector<AnchorBox> anchors;
  const int s = config.anchor_stride;
  int id = 0;
  for (int r = 0; r * s < config.grid.rows; ++r) {
    for (int c = 0; c * s < config.grid.cols; ++c) {
      for (const auto& t : config.anchor_templates) {
        const Box3 box{c * s + 0.5 * s, r * s + 0.5 * s, t.width, t.length, t.height};
        anchors.push_back(make_anchor_box(box, id++, config));
      }
    }
  }
  return anchors;
}

// ---------------------------------------------------------------------------
// Fusion

Tensor fuse_features(const Tensor& a, const Tensor& b, FusionMode mode, Rng* training_rng) {
  if (!a.same_shape(b)) throw InputError("fusion inputs differ in shape");
  Tensor out = zeros_like(a);
  if (mode == FusionMode::mean) {
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = 0.5 * (a.data[i] + b.data[i]);
    return out;
  }
  if (training_rng) {
    const int pick = training_rng->uniform_int(0, 2);
    for (std::size_t i = 0; i < a.size(); ++i) {
      out.data[i] = pick == 0 ? a.data[i] : (pick == 1 ? b.data[i] : 0.5 * (a.data[i] + b.data[i]));
    }
    return out;
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.data[i] = (a.data[i] + b.data[i] + 0.5 * (a.data[i] + b.data[i])) / 3.0;
  }
  return out;
}

std::vector<FusionVariant> inference_variants(FusionMode mode) {
  if (mode == FusionMode::mean) return {FusionVariant::mean};
  return {FusionVariant::image_only, FusionVariant::bev_only, FusionVariant::mean};
}

namespace {

void fuse_member(FusionVariant v, std::span<const double> img, std::span<const double> bev,
                 std::vector<double>& out) {
  out.resize(img.size());
  switch (v) {
    case FusionVariant::image_only:
      std::copy(img.begin(), img.end(), out.begin());
      break;
    case FusionVariant::bev_only:
      std::copy(bev.begin(), bev.end(), out.begin());
      break;
    case FusionVariant::mean:
      for (std::size_t i = 0; i < img.size(); ++i) out[i] = 0.5 * (img[i] + bev[i]);
      break;
  }
}

Box2 to_feature_units(const Box2& b) {
  constexpr double s = kFeatureStride;
  return {b.x0 / s, b.y0 / s, b.x1 / s, b.y1 / s};
}

}  // namespace

// ---------------------------------------------------------------------------
// ForwardPass

std::shared_ptr<const ConvStack::Cache> ForwardPass::run_bev_branch(const DetectorParams& params,
                                                                    const Tensor& bev) {
  auto cache = std::make_shared<ConvStack::Cache>();
  params.bev_branch.forward(bev, *cache);
  return cache;
}

ForwardPass::ForwardPass(const DetectorParams& params, const DetectorConfig& config,
                         const Tensor& image, const Tensor& bev)
    : ForwardPass(params, config, image, run_bev_branch(params, bev)) {}

ForwardPass::ForwardPass(const DetectorParams& params, const DetectorConfig& config,
                         const Tensor& image, std::shared_ptr<const ConvStack::Cache> bev_branch)
    : params_(params), camera_(config.camera), bev_cache_(std::move(bev_branch)) {
  params_.image_branch.forward(image, image_cache_);
  const Tensor& fi = image_cache_.output();
  const Tensor& fb = bev_cache_->output();
  if (fi.channels != fb.channels) {
    throw InputError("image and BEV feature channel counts differ");
  }
}

const Mlp& ForwardPass::head_net(Head head) const {
  return head == Head::rpn ? params_.rpn_head : params_.stage2_head;
}

int ForwardPass::crop_size(Head head) const { return head == Head::rpn ? kRpnCrop : kStage2Crop; }

int ForwardPass::class_count(Head head) const { return head == Head::rpn ? 2 : kNumClasses; }

void ForwardPass::prepare_crops(Head head, const Box3& box, CropPlan& ip, CropPlan& bp,
                                std::vector<double>& ic, std::vector<double>& bc) const {
  const int size = crop_size(head);
  const Tensor& fi = image_features();
  const Tensor& fb = bev_features();
  ip = make_crop_plan(to_feature_units(camera_.project(box)), fi.height, fi.width, size);
  bp = make_crop_plan(to_feature_units(box.bev_box()), fb.height, fb.width, size);
  ic.assign(static_cast<std::size_t>(fi.channels) * size * size, 0.0);
  bc.assign(static_cast<std::size_t>(fb.channels) * size * size, 0.0);
  crop_features(fi, ip, ic);
  crop_features(fb, bp, bc);
}

HeadOutput ForwardPass::peek(Head head, const Box3& box) const {
  CropPlan ip, bp;
  std::vector<double> ic, bc, fused;
  prepare_crops(head, box, ip, bp, ic, bc);
  const auto variants = inference_variants(params_.fusion_mode);
  const int nc = class_count(head);
  HeadOutput out;
  out.probs.assign(nc, 0.0);
  const double inv = 1.0 / static_cast<double>(variants.size());
  for (FusionVariant v : variants) {
    fuse_member(v, ic, bc, fused);
    const auto y = head_net(head).forward(fused, nullptr);
    const auto p = softmax(std::span<const double>(y.data(), nc));
    for (int k = 0; k < nc; ++k) out.probs[k] += inv * p[k];
    for (int k = 0; k < kBoxParams; ++k) out.deltas[k] += inv * y[nc + k];
  }
  return out;
}

int ForwardPass::evaluate(Head head, const Box3& box, std::optional<FusionVariant> forced) {
  Record rec;
  rec.head = head;
  rec.variants = forced ? std::vector<FusionVariant>{*forced}
                        : inference_variants(params_.fusion_mode);
  prepare_crops(head, box, rec.image_plan, rec.bev_plan, rec.image_crop, rec.bev_crop);
  const int nc = class_count(head);
  const std::size_t m = rec.variants.size();
  const double inv = 1.0 / static_cast<double>(m);
  rec.out.probs.assign(nc, 0.0);
  rec.caches.resize(m);
  std::vector<double> fused;
  for (std::size_t k = 0; k < m; ++k) {
    fuse_member(rec.variants[k], rec.image_crop, rec.bev_crop, fused);
    const auto y = head_net(head).forward(fused, &rec.caches[k]);
    std::vector<double> logits(y.begin(), y.begin() + nc);
    auto p = softmax(logits);
    for (int c = 0; c < nc; ++c) rec.out.probs[c] += inv * p[c];
    for (int c = 0; c < kBoxParams; ++c) rec.out.deltas[c] += inv * y[nc + c];
    rec.logits.push_back(std::move(logits));
    rec.member_probs.push_back(std::move(p));
  }
  rec.grad_logits.assign(m, std::vector<double>(nc, 0.0));
  rec.grad_deltas.assign(m, std::array<double, kBoxParams>{});
  records_.push_back(std::move(rec));
  return static_cast<int>(records_.size()) - 1;
}

void ForwardPass::add_grad_probs(int handle, std::span<const double> grad_probs,
                                 std::span<const double> grad_deltas) {
  Record& rec = records_.at(handle);
  const double inv = 1.0 / static_cast<double>(rec.variants.size());
  std::vector<double> scaled(grad_probs.begin(), grad_probs.end());
  for (double& g : scaled) g *= inv;
  for (std::size_t k = 0; k < rec.variants.size(); ++k) {
    const auto gl = softmax_backward(rec.member_probs[k], scaled);
    for (std::size_t c = 0; c < gl.size(); ++c) rec.grad_logits[k][c] += gl[c];
    for (std::size_t c = 0; c < grad_deltas.size(); ++c) rec.grad_deltas[k][c] += inv * grad_deltas[c];
  }
}

void ForwardPass::add_grad_logits(int handle, std::span<const double> grad_logits,
                                  std::span<const double> grad_deltas) {
  Record& rec = records_.at(handle);
  if (rec.variants.size() != 1) {
    throw InputError("logit gradients need a single-member head evaluation");
  }
  for (std::size_t c = 0; c < grad_logits.size(); ++c) rec.grad_logits[0][c] += grad_logits[c];
  for (std::size_t c = 0; c < grad_deltas.size(); ++c) rec.grad_deltas[0][c] += grad_deltas[c];
}

void ForwardPass::backward(DetectorParams* param_grads, Tensor* image_grad, Tensor* bev_grad) {
  Tensor g_img = zeros_like(image_features());
  Tensor g_bev = zeros_like(bev_features());
  std::vector<double> gin, gout;
  for (Record& rec : records_) {
    const Mlp& net = head_net(rec.head);
    Mlp* net_grad = param_grads
                        ? (rec.head == Head::rpn ? &param_grads->rpn_head : &param_grads->stage2_head)
                        : nullptr;
    std::vector<double> g_icrop(rec.image_crop.size(), 0.0);
    std::vector<double> g_bcrop(rec.bev_crop.size(), 0.0);
    bool any = false;
    for (std::size_t k = 0; k < rec.variants.size(); ++k) {
      gout = rec.grad_logits[k];
      gout.insert(gout.end(), rec.grad_deltas[k].begin(), rec.grad_deltas[k].end());
      if (std::all_of(gout.begin(), gout.end(), [](double g) { return g == 0.0; })) continue;
      any = true;
      gin.assign(rec.image_crop.size(), 0.0);
      net.backward(rec.caches[k], gout, net_grad, gin);
      switch (rec.variants[k]) {
        case FusionVariant::image_only:
          for (std::size_t i = 0; i < gin.size(); ++i) g_icrop[i] += gin[i];
          break;
        case FusionVariant::bev_only:
          for (std::size_t i = 0; i < gin.size(); ++i) g_bcrop[i] += gin[i];
          break;
        case FusionVariant::mean:
          for (std::size_t i = 0; i < gin.size(); ++i) {
            g_icrop[i] += 0.5 * gin[i];
            g_bcrop[i] += 0.5 * gin[i];
          }
          break;
      }
    }
    if (!any) continue;
    crop_features_backward(rec.image_plan, g_icrop, g_img);
    crop_features_backward(rec.bev_plan, g_bcrop, g_bev);
  }
  if (param_grads || image_grad) {
    params_.image_branch.backward(image_cache_, std::move(g_img),
                                  param_grads ? &param_grads->image_branch : nullptr, image_grad);
  }
  if (param_grads || bev_grad) {
    params_.bev_branch.backward(*bev_cache_, std::move(g_bev),
                                param_grads ? &param_grads->bev_branch : nullptr, bev_grad);
  }
}

FeatureMaps extract_features(const Tensor& image, const Tensor& bev, const DetectorParams& params) {
  ConvStack::Cache ic, bc;
  params.image_branch.forward(image, ic);
  params.bev_branch.forward(bev, bc);
  FeatureMaps maps{ic.output(), bc.output()};
  if (maps.image.channels != maps.bev.channels) {
    throw InputError("image and BEV feature channel counts differ");
  }
  return maps;
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

// Higher score first, then lower id.
template <typename T, typename Score, typename Id>
void sort_by_priority(std::vector<T>& items, Score score, Id id) {
  std::stable_sort(items.begin(), items.end(), [&](const T& a, const T& b) {
    if (score(a) != score(b)) return score(a) > score(b);
    return id(a) < id(b);
  });
}

}  // namespace

FusionDetector::FusionDetector(const DetectorParams& params, DetectorConfig config)
    : params_(params), config_(std::move(config)), anchors_(make_anchors(config_)) {
  config_.validate();
}

std::vector<Proposal> FusionDetector::rpn_propose(const Tensor& image, const Tensor& bev) const {
  ForwardPass pass(params_, config_, image, bev);
  return rpn_propose(pass);
}

std::vector<Proposal> FusionDetector::rpn_propose(const ForwardPass& pass) const {
  std::vector<Proposal> all;
  all.reserve(anchors_.size());
  for (const AnchorBox& a : anchors_) {
    const HeadOutput out = pass.peek(Head::rpn, a.box);
    Proposal p;
    p.box = make_anchor_box(decode_box(a.box, out.deltas), a.anchor_id, config_);
    p.objectness = out.probs[1];
    all.push_back(p);
  }
  sort_by_priority(all, [](const Proposal& p) { return p.objectness; },
                   [](const Proposal& p) { return p.box.anchor_id; });
  std::vector<Proposal> kept;
  for (const Proposal& p : all) {
    if (static_cast<int>(kept.size()) >= config_.top_n_proposals) break;
    bool suppressed = false;
    for (const Proposal& k : kept) {
      if (iou(k.box.bev_box, p.box.bev_box) >= config_.rpn_nms_iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(p);
  }
  return kept;
}

std::vector<Detection> FusionDetector::stage2_classify(const Tensor& image, const Tensor& bev,
                                                       std::span<const Proposal> proposals) const {
  if (proposals.empty()) return {};
  ForwardPass pass(params_, config_, image, bev);
  return stage2_classify(pass, proposals);
}

std::vector<Detection> FusionDetector::stage2_classify(const ForwardPass& pass,
                                                       std::span<const Proposal> proposals) const {
  std::vector<Detection> dets;
  dets.reserve(proposals.size());
  for (const Proposal& p : proposals) {
    const HeadOutput out = pass.peek(Head::stage2, p.box.box);
    const AnchorBox refined = make_anchor_box(decode_box(p.box.box, out.deltas), p.box.anchor_id,
                                              config_);
    Detection d;
    d.box = refined.box;
    d.proposal_box = p.box.box;
    d.image_box = refined.image_box;
    d.bev_box = refined.bev_box;
    d.anchor_id = p.box.anchor_id;
    for (int c = 0; c < kNumClasses; ++c) d.softmax[c] = out.probs[c];
    d.class_id = d.softmax[kVehicle] >= d.softmax[kPedestrianCyclist] ? kVehicle
                                                                       : kPedestrianCyclist;
    d.score = d.softmax[d.class_id];
    dets.push_back(d);
  }
  return dets;
}

std::vector<Detection> FusionDetector::detect(const ForwardPass& pass, const Tensor& bev,
                                              std::optional<double> threshold) const {
  const auto proposals = rpn_propose(pass);
  const auto supported = filter_anchors_without_lidar(proposals, bev);
  const auto classified = stage2_classify(pass, supported);
  auto kept = nms(classified, config_.nms_iou_threshold);
  const double t = threshold.value_or(config_.detection_threshold);
  std::erase_if(kept, [t](const Detection& d) { return d.score < t; });
  return kept;
}

std::vector<Detection> FusionDetector::detect(const Tensor& image, const Tensor& bev) const {
  ForwardPass pass(params_, config_, image, bev);
  return detect(pass, bev);
}

std::vector<Detection> FusionDetector::detect(const Scene& scene) const {
  auto dets = detect(scene.image, scene.bev);
  annotate_iou_gt(dets, scene.objects);
  return dets;
}

std::vector<Proposal> filter_anchors_without_lidar(std::span<const Proposal> proposals,
                                                   const Tensor& bev) {
  std::vector<Proposal> kept;
  for (const Proposal& p : proposals) {
    if (occupied_cells(bev, p.box.bev_box) > 0) kept.push_back(p);
  }
  return kept;
}

std::vector<Detection> nms(std::span<const Detection> detections, double iou_threshold) {
  std::vector<Detection> order(detections.begin(), detections.end());
  sort_by_priority(order, [](const Detection& d) { return d.score; },
                   [](const Detection& d) { return d.anchor_id; });
  std::vector<Detection> kept;
  for (const Detection& d : order) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (iou(k.image_box, d.image_box) >= iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

void annotate_iou_gt(std::vector<Detection>& detections,
                     std::span<const GroundTruthObject> objects) {
  for (Detection& d : detections) {
    d.iou_gt = 0.0;
    for (const auto& o : objects) d.iou_gt = std::max(d.iou_gt, iou(d.image_box, o.image_box));
  }
}

// ---------------------------------------------------------------------------
// Benign evaluation

namespace {

constexpr double kMatchIou = 0.5;
constexpr double kApScoreFloor = 0.05;

// Greedy class-aware matching of score-sorted detections; returns per-detection TP flags.
std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                   std::span<const GroundTruthObject> objects) {
  std::vector<bool> used(objects.size(), false);
  std::vector<bool> tp(dets.size(), false);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    double best = kMatchIou;
    int best_j = -1;
    for (std::size_t j = 0; j < objects.size(); ++j) {
      if (used[j] || objects[j].class_id != dets[i].class_id) continue;
      const double v = iou(dets[i].image_box, objects[j].image_box);
      if (v >= best) {
        best = v;
        best_j = static_cast<int>(j);
      }
    }
    if (best_j >= 0) {
      used[best_j] = true;
      tp[i] = true;
    }
  }
  return tp;
}

}  // namespace

BenignMetrics evaluate_benign(const FusionDetector& detector, std::span<const Scene> scenes) {
  BenignMetrics m;
  struct Scored { double score; bool tp; };
  std::vector<Scored> per_class[kNumClasses];
  int gt_per_class[kNumClasses] = {0, 0, 0};
  int recalled = 0;
  for (const Scene& scene : scenes) {
    ForwardPass pass(detector.params(), detector.config(), scene.image, scene.bev);
    const auto dets = detector.detect(pass, scene.bev, kApScoreFloor);
    const auto tp = match_detections(dets, scene.objects);
    for (std::size_t i = 0; i < dets.size(); ++i) {
      per_class[dets[i].class_id].push_back({dets[i].score, tp[i]});
    }
    std::vector<Detection> confident;
    for (const auto& d : dets)
      if (d.score >= detector.config().detection_threshold) confident.push_back(d);
    const auto ctp = match_detections(confident, scene.objects);
    recalled += static_cast<int>(std::count(ctp.begin(), ctp.end(), true));
    m.detections += static_cast<int>(confident.size());
    for (const auto& o : scene.objects) ++gt_per_class[o.class_id];
    m.ground_truth += static_cast<int>(scene.objects.size());
  }
  m.recall = m.ground_truth > 0 ? static_cast<double>(recalled) / m.ground_truth : 0.0;
  double ap_sum = 0.0;
  int classes = 0;
  for (int c = 1; c < kNumClasses; ++c) {
    if (gt_per_class[c] == 0) continue;
    auto& list = per_class[c];
    std::stable_sort(list.begin(), list.end(),
                     [](const Scored& a, const Scored& b) { return a.score > b.score; });
    std::vector<double> precision, recall;
    int tp = 0;
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (list[i].tp) ++tp;
      precision.push_back(static_cast<double>(tp) / (i + 1));
      recall.push_back(static_cast<double>(tp) / gt_per_class[c]);
    }
    double ap = 0.0;
    for (int t = 0; t <= 10; ++t) {
      const double r = t / 10.0;
      double best = 0.0;
      for (std::size_t i = 0; i < precision.size(); ++i)
        if (recall[i] >= r - 1e-12) best = std::max(best, precision[i]);
      ap += best;
    }
    ap_sum += ap / 11.0;
    ++classes;
  }
  m.average_precision = classes > 0 ? ap_sum / classes : 0.0;
  return m;
}

}  // namespace fusionbench
