#include "fusionbench/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fusionbench/errors.hpp"

namespace fusionbench {

LossMode parse_loss_mode(std::string_view name) {
  if (name == "standard") return LossMode::standard;
  if (name == "maxssn") return LossMode::maxssn;
  throw ConfigError("unknown loss mode: " + std::string(name));
}

std::string_view to_string(LossMode mode) {
  return mode == LossMode::standard ? "standard" : "maxssn";
}

namespace {

constexpr double kRpnPositiveIou = 0.45;
constexpr double kRpnNegativeIou = 0.25;
constexpr double kStage2ForegroundIou = 0.5;
constexpr double kStage2BackgroundIou = 0.4;
constexpr int kJittersPerObject = 3;
constexpr int kAnchorPositivesPerStep = 4;

// Moves k uniformly chosen elements to the front (partial Fisher-Yates).
template <typename T>
void choose_front(std::vector<T>& items, std::size_t k, Rng& rng) {
  k = std::min(k, items.size());
  for (std::size_t i = 0; i < k; ++i) {
    const int j = rng.uniform_int(static_cast<int>(i), static_cast<int>(items.size()) - 1);
    std::swap(items[i], items[j]);
  }
  items.resize(k);
}

double smooth_l1(double x) { return std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5; }
double smooth_l1_grad(double x) { return std::abs(x) < 1.0 ? x : (x > 0 ? 1.0 : -1.0); }

// Labels a stage-2 box by image IOU. Returns false for the ignore band.
bool label_stage2(const Box3& box, const Scene& scene, const DetectorConfig& config,
                  Stage2Sample& out) {
  const Box2 img = clip_box(config.camera.project(box), config.camera.image_width,
                            config.camera.image_height);
  double best = 0.0;
  int best_j = -1;
  for (std::size_t j = 0; j < scene.objects.size(); ++j) {
    const double v = iou(img, scene.objects[j].image_box);
    if (v > best) {
      best = v;
      best_j = static_cast<int>(j);
    }
  }
  out.box = box;
  if (best >= kStage2ForegroundIou) {
    out.label = scene.objects[best_j].class_id;
    out.target = encode_box(box, scene.objects[best_j].box3());
    return true;
  }
  if (best < kStage2BackgroundIou) {
    out.label = kBackground;
    return true;
  }
  return false;
}

}  // namespace

TrainingTargets sample_training_targets(const Scene& scene, std::span<const AnchorBox> anchors,
                                        const DetectorConfig& config, Rng& rng) {
  TrainingTargets t;
  const auto& objects = scene.objects;
  const std::size_t n = anchors.size();
  std::vector<double> best_iou(n, 0.0);
  std::vector<int> best_obj(n, -1);
  std::vector<int> forced(objects.size(), -1);
  std::vector<double> forced_iou(objects.size(), 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t j = 0; j < objects.size(); ++j) {
      const double v = iou(anchors[a].bev_box, objects[j].bev_box);
      if (v > best_iou[a]) {
        best_iou[a] = v;
        best_obj[a] = static_cast<int>(j);
      }
      if (v > forced_iou[j]) {
        forced_iou[j] = v;
        forced[j] = static_cast<int>(a);
      }
    }
  }
  std::vector<bool> is_positive(n, false);
  for (std::size_t a = 0; a < n; ++a) is_positive[a] = best_iou[a] >= kRpnPositiveIou;
  for (std::size_t j = 0; j < objects.size(); ++j) {
    if (forced[j] >= 0) {
      is_positive[forced[j]] = true;
      // A forced anchor regresses toward the object that selected it.
      best_obj[forced[j]] = static_cast<int>(j);
    }
  }

  std::vector<int> positives, lidar_negatives, plain_negatives;
  for (std::size_t a = 0; a < n; ++a) {
    if (is_positive[a]) {
      positives.push_back(static_cast<int>(a));
    } else if (best_iou[a] < kRpnNegativeIou) {
      if (occupied_cells(scene.bev, anchors[a].bev_box) > 0) {
        lidar_negatives.push_back(static_cast<int>(a));
      } else {
        plain_negatives.push_back(static_cast<int>(a));
      }
    }
  }
  std::vector<int> all_positives = positives;
  choose_front(positives, config.train.rpn_max_positives, rng);
  const std::size_t n_neg = config.train.rpn_batch - positives.size();
  std::vector<int> lidar_pick = lidar_negatives;
  choose_front(lidar_pick, n_neg / 2, rng);
  std::vector<int> rest = plain_negatives;
  rest.insert(rest.end(), lidar_negatives.begin(), lidar_negatives.end());
  std::erase_if(rest, [&](int a) {
    return std::find(lidar_pick.begin(), lidar_pick.end(), a) != lidar_pick.end();
  });
  choose_front(rest, n_neg - lidar_pick.size(), rng);

  for (int a : positives) {
    RpnSample s{a, true, encode_box(anchors[a].box, objects[best_obj[a]].box3())};
    t.rpn.push_back(s);
  }
  for (int a : lidar_pick) t.rpn.push_back({a, false, {}});
  for (int a : rest) t.rpn.push_back({a, false, {}});

  // Stage 2: foreground candidates.
  std::vector<Stage2Sample> fg, bg;
  Stage2Sample s;
  auto consider = [&](const Box3& box) {
    if (!label_stage2(box, scene, config, s)) return;
    (s.label == kBackground ? bg : fg).push_back(s);
  };
  for (const auto& obj : objects) {
    const Box3 g = obj.box3();
    consider(g);
    for (int k = 0; k < kJittersPerObject; ++k) {
      Box3 j = g;
      j.u += rng.uniform(-0.2, 0.2) * g.width;
      j.v += rng.uniform(-0.2, 0.2) * g.length;
      j.width *= std::exp(rng.uniform(-0.2, 0.2));
      j.length *= std::exp(rng.uniform(-0.2, 0.2));
      j.height *= std::exp(rng.uniform(-0.1, 0.1));
      consider(j);
    }
  }
  choose_front(all_positives, kAnchorPositivesPerStep, rng);
  for (int a : all_positives) consider(anchors[a].box);
  choose_front(fg, config.train.stage2_batch / 2, rng);

  const std::size_t n_bg = config.train.stage2_batch - fg.size();
  std::vector<int> lidar_bg = lidar_negatives;
  choose_front(lidar_bg, n_bg, rng);
  for (int a : lidar_bg) {
    if (bg.size() >= n_bg / 2) break;
    consider(anchors[a].box);
  }
  int attempts = 0;
  while (bg.size() < n_bg && attempts++ < 4 * static_cast<int>(n_bg)) {
    consider(anchors[rng.uniform_int(0, static_cast<int>(n) - 1)].box);
  }
  // consider() may have added foreground while filling background.
  choose_front(fg, config.train.stage2_batch / 2, rng);
  bg.resize(std::min(bg.size(), n_bg));
  t.stage2 = std::move(fg);
  t.stage2.insert(t.stage2.end(), bg.begin(), bg.end());
  return t;
}

LossBreakdown detection_loss(const DetectorParams& params, const DetectorConfig& config,
                             const Tensor& image, const Tensor& bev,
                             const TrainingTargets& targets, DetectorParams* param_grads,
                             Tensor* image_grad, Rng* lel_rng, double scale) {
  const bool need_grad = param_grads || image_grad;
  ForwardPass pass(params, config, image, bev);
  const auto anchors = make_anchors(config);
  LossBreakdown loss;

  auto member = [&]() -> std::optional<FusionVariant> {
    if (lel_rng && params.fusion_mode == FusionMode::lel) {
      return static_cast<FusionVariant>(lel_rng->uniform_int(0, 2));
    }
    return std::nullopt;
  };

  // Adds cross-entropy and optional regression terms for one head evaluation.
  auto add_terms = [&](int h, int label, const std::array<double, kBoxParams>* target,
                       double cls_weight, double box_weight, double& cls_acc, double& box_acc) {
    const HeadOutput& out = pass.output(h);
    const double p = std::max(out.probs[label], 1e-300);
    cls_acc += -std::log(p) * cls_weight;
    std::array<double, kBoxParams> gd{};
    if (target) {
      for (int k = 0; k < kBoxParams; ++k) {
        const double d = out.deltas[k] - (*target)[k];
        box_acc += smooth_l1(d) * box_weight;
        gd[k] = smooth_l1_grad(d) * box_weight * scale;
      }
    }
    if (!need_grad) return;
    const std::size_t nc = out.probs.size();
    std::vector<double> g(nc, 0.0);
    // Single-member evaluations use the exact logit gradient.
    const bool single = lel_rng != nullptr || params.fusion_mode == FusionMode::mean;
    if (single) {
      for (std::size_t c = 0; c < nc; ++c) {
        g[c] = (out.probs[c] - (static_cast<int>(c) == label ? 1.0 : 0.0)) * cls_weight * scale;
      }
      pass.add_grad_logits(h, g, gd);
    } else {
      g[label] = -cls_weight * scale / p;
      pass.add_grad_probs(h, g, gd);
    }
  };

  const double rpn_n = std::max<std::size_t>(1, targets.rpn.size());
  int rpn_pos = 0;
  for (const auto& s : targets.rpn) rpn_pos += s.positive;
  const double rpn_box_w = config.train.regression_weight / std::max(1, rpn_pos);
  for (const auto& s : targets.rpn) {
    const int h = pass.evaluate(Head::rpn, anchors[s.anchor].box, member());
    add_terms(h, s.positive ? 1 : 0, s.positive ? &s.target : nullptr, 1.0 / rpn_n, rpn_box_w,
              loss.rpn_class, loss.rpn_box);
  }

  const double s2_n = std::max<std::size_t>(1, targets.stage2.size());
  int s2_fg = 0;
  for (const auto& s : targets.stage2) s2_fg += s.label != kBackground;
  const double s2_box_w = config.train.regression_weight / std::max(1, s2_fg);
  for (const auto& s : targets.stage2) {
    const int h = pass.evaluate(Head::stage2, s.box, member());
    const bool fg = s.label != kBackground;
    add_terms(h, s.label, fg ? &s.target : nullptr, 1.0 / s2_n, s2_box_w, loss.stage2_class,
              loss.stage2_box);
  }
  loss.total = loss.rpn_class + loss.rpn_box + loss.stage2_class + loss.stage2_box;
  if (need_grad) pass.backward(param_grads, image_grad, nullptr);
  return loss;
}

namespace {

void add_scaled(DetectorParams& into, const DetectorParams& from, double w) {
  auto a = into.arrays();
  auto b = from.arrays();
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < a[i]->values.size(); ++k) a[i]->values[k] += w * b[i]->values[k];
  }
}

void zero(DetectorParams& p) {
  for (ParamArray* a : p.arrays()) std::fill(a->values.begin(), a->values.end(), 0.0);
}

Tensor add_noise(const Tensor& t, double sigma, Rng& rng) {
  Tensor out = t;
  if (sigma == 0.0) return out;
  for (double& v : out.data) v += sigma * rng.normal();
  clip(out, 0.0, 1.0);
  return out;
}

}  // namespace

double maxssn_loss(const DetectorParams& params, const DetectorConfig& config,
                   const Tensor& image, const Tensor& bev, const TrainingTargets& targets,
                   double noise, double clean_weight, Rng& noise_rng, DetectorParams* param_grads,
                   Rng* lel_rng) {
  const Tensor noisy_image = add_noise(image, noise, noise_rng);
  const Tensor noisy_bev = add_noise(bev, noise, noise_rng);
  std::optional<DetectorParams> g_img, g_bev;
  if (param_grads) {
    g_img = params.zeros_like();
    g_bev = params.zeros_like();
  }
  const double l_img = detection_loss(params, config, noisy_image, bev, targets,
                                      g_img ? &*g_img : nullptr, nullptr, lel_rng)
                           .total;
  const double l_bev = detection_loss(params, config, image, noisy_bev, targets,
                                      g_bev ? &*g_bev : nullptr, nullptr, lel_rng)
                           .total;
  const double l_clean = detection_loss(params, config, image, bev, targets, param_grads,
                                        nullptr, lel_rng, clean_weight)
                             .total;
  const bool image_worse = l_img >= l_bev;
  if (param_grads) add_scaled(*param_grads, image_worse ? *g_img : *g_bev, 1.0 - clean_weight);
  return (1.0 - clean_weight) * std::max(l_img, l_bev) + clean_weight * l_clean;
}

TrainResult train_detector(std::span<const Scene> dataset, const DetectorConfig& config,
                           FusionMode fusion_mode, const TrainOptions& options) {
  if (dataset.empty()) throw InputError("training dataset is empty");
  config.validate();
  const TrainConfig& tc = config.train;
  Rng root(tc.seed);
  TrainResult result{DetectorParams::create(fusion_mode, Rng::mix(tc.seed, 0)), {}};
  DetectorParams& params = result.params;
  Rng order_rng = root.fork(1);
  Rng target_rng = root.fork(2);
  Rng lel_rng = root.fork(3);
  Rng augment_rng = root.fork(4);
  Rng adversary_rng = root.fork(5);
  Rng noise_rng = root.fork(6);
  Rng* lel = fusion_mode == FusionMode::lel ? &lel_rng : nullptr;

  const auto anchors = make_anchors(config);
  DetectorParams grads = params.zeros_like();
  DetectorParams m = params.zeros_like();
  DetectorParams v = params.zeros_like();
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  double beta1_t = 1.0, beta2_t = 1.0;

  std::vector<std::size_t> order(dataset.size());
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[order_rng.uniform_int(0, static_cast<int>(i) - 1)]);
    }
    double epoch_sum = 0.0;
    for (std::size_t step = 0; step < order.size(); ++step) {
      const Scene& scene = dataset[order[step]];
      Tensor image = scene.image;
      if (options.augment) options.augment(image, augment_rng);
      const TrainingTargets targets = sample_training_targets(scene, anchors, config, target_rng);
      if (options.adversary) options.adversary(params, image, scene.bev, targets, adversary_rng);
      zero(grads);
      double loss = 0.0;
      if (options.loss_mode == LossMode::standard) {
        loss = detection_loss(params, config, image, scene.bev, targets, &grads, nullptr, lel)
                   .total;
      } else {
        loss = maxssn_loss(params, config, image, scene.bev, targets, options.maxssn_noise,
                           options.maxssn_clean_weight, noise_rng, &grads, lel);
      }
      if (!std::isfinite(loss)) {
        throw TrainingDivergedError("non-finite loss at epoch " + std::to_string(epoch) +
                                    ", step " + std::to_string(step) + " (" + scene.scene_id +
                                    ")");
      }
      epoch_sum += loss;

      double norm2 = 0.0;
      for (const ParamArray* a : grads.arrays())
        for (double g : a->values) norm2 += g * g;
      const double norm = std::sqrt(norm2);
      const double clip_scale = norm > tc.grad_clip ? tc.grad_clip / norm : 1.0;

      beta1_t *= kBeta1;
      beta2_t *= kBeta2;
      auto pa = params.arrays();
      auto ga = grads.arrays();
      auto ma = m.arrays();
      auto va = v.arrays();
      for (std::size_t i = 0; i < pa.size(); ++i) {
        auto& p = pa[i]->values;
        const auto& g = ga[i]->values;
        auto& mv = ma[i]->values;
        auto& vv = va[i]->values;
        for (std::size_t k = 0; k < p.size(); ++k) {
          const double gk = g[k] * clip_scale;
          mv[k] = kBeta1 * mv[k] + (1.0 - kBeta1) * gk;
          vv[k] = kBeta2 * vv[k] + (1.0 - kBeta2) * gk * gk;
          const double mh = mv[k] / (1.0 - beta1_t);
          const double vh = vv[k] / (1.0 - beta2_t);
          p[k] -= tc.learning_rate * mh / (std::sqrt(vh) + kEps);
        }
      }
    }
    const double mean = epoch_sum / static_cast<double>(order.size());
    result.epoch_loss.push_back(mean);
    if (options.on_epoch) options.on_epoch(epoch, mean);
  }
  for (ParamArray* a : params.arrays()) {
    for (double& x : a->values) x = static_cast<double>(static_cast<float>(x));
  }
  if (!params.all_finite()) throw TrainingDivergedError("parameters became non-finite");
  return result;
}

}  // namespace fusionbench
