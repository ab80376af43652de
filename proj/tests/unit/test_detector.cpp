#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "fusionbench/detector.hpp"
#include "fusionbench/errors.hpp"
#include "fusionbench/training.hpp"
#include "oracles.hpp"
#include "tiny_model.hpp"

using namespace fusionbench;

namespace {

class DetectorTest : public ::testing::Test {
 protected:
  DetectorConfig config;
  DetectorParams params = DetectorParams::create(FusionMode::mean, 4);
  Scene scene = generate_scene(12, [] {
    SceneSpec s;
    s.n_objects = 2;
    return s;
  }());
};

TEST_F(DetectorTest, FeaturesFiniteOnZeroInputs) {
  const Tensor image(3, 128, 192);
  const Tensor bev(2, 96, 96);
  const FeatureMaps f = extract_features(image, bev, params);
  for (double v : f.image.data) ASSERT_TRUE(std::isfinite(v));
  for (double v : f.bev.data) ASSERT_TRUE(std::isfinite(v));
  const FeatureMaps g = extract_features(scene.image, scene.bev, params);
  EXPECT_EQ(g.image, extract_features(scene.image, scene.bev, params).image);
}

TEST_F(DetectorTest, FusionExamples) {
  Tensor a(2, 3, 3);
  Rng rng(1);
  for (double& v : a.data) v = rng.normal();
  EXPECT_EQ(fuse_features(a, a, FusionMode::mean), a);
  const Tensor half = fuse_features(a, zeros_like(a), FusionMode::mean);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_DOUBLE_EQ(half.data[i], a.data[i] / 2);
  Tensor b = a;
  for (double& v : b.data) v = rng.normal();
  EXPECT_EQ(fuse_features(a, b, FusionMode::lel), fuse_features(a, b, FusionMode::lel));
}

TEST_F(DetectorTest, RpnReturnsTopNSorted) {
  const FusionDetector det(params, config);
  const auto props = det.rpn_propose(scene.image, scene.bev);
  ASSERT_EQ(static_cast<int>(props.size()), config.top_n_proposals);
  for (std::size_t i = 1; i < props.size(); ++i) {
    ASSERT_TRUE(props[i - 1].objectness > props[i].objectness ||
                (props[i - 1].objectness == props[i].objectness &&
                 props[i - 1].box.anchor_id < props[i].box.anchor_id));
  }
  const auto again = det.rpn_propose(scene.image, scene.bev);
  for (std::size_t i = 0; i < props.size(); ++i) {
    EXPECT_EQ(props[i].box.box, again[i].box.box);
    EXPECT_EQ(props[i].objectness, again[i].objectness);
  }
}

TEST_F(DetectorTest, Stage2SoftmaxAndDuplicates) {
  const FusionDetector det(params, config);
  auto props = det.rpn_propose(scene.image, scene.bev);
  props.resize(5);
  props.push_back(props[2]);
  const auto dets = det.stage2_classify(scene.image, scene.bev, props);
  ASSERT_EQ(dets.size(), props.size());
  for (const auto& d : dets) {
    double sum = 0;
    for (double p : d.softmax) {
      EXPECT_GE(p, 0.0);
      sum += p;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
    EXPECT_GE(d.score, 0.0);
    EXPECT_LE(d.score, 1.0);
  }
  EXPECT_EQ(dets[2].softmax, dets.back().softmax);
  EXPECT_EQ(dets[2].box, dets.back().box);
  EXPECT_TRUE(det.stage2_classify(scene.image, scene.bev, {}).empty());
}

TEST_F(DetectorTest, LelStage2SoftmaxSumsToOne) {
  const DetectorParams lel = DetectorParams::create(FusionMode::lel, 4);
  const FusionDetector det(lel, config);
  auto props = det.rpn_propose(scene.image, scene.bev);
  for (const auto& d : det.stage2_classify(scene.image, scene.bev, props)) {
    EXPECT_NEAR(std::accumulate(d.softmax.begin(), d.softmax.end(), 0.0), 1.0, 1e-6);
  }
}

TEST_F(DetectorTest, DetectRespectsThresholdAndOrder) {
  DetectorConfig low = config;
  low.detection_threshold = 0.05;
  const FusionDetector det(params, low);
  const auto dets = det.detect(scene);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    EXPECT_GE(dets[i].score, low.detection_threshold);
    EXPECT_GE(dets[i].iou_gt, 0.0);
    EXPECT_LE(dets[i].iou_gt, 1.0);
    if (i) EXPECT_GE(dets[i - 1].score, dets[i].score);
  }
}

TEST_F(DetectorTest, CheckpointRoundTrip) {
  const auto p = std::filesystem::temp_directory_path() / "fusionbench_unit" / "m.fbck";
  std::filesystem::create_directories(p.parent_path());
  DetectorParams q = params;
  for (auto* a : q.arrays())
    for (double& v : a->values) v = static_cast<float>(v);
  save_checkpoint(q, p, {"h", 3});
  Provenance prov;
  EXPECT_EQ(load_checkpoint(p, &prov), q);
  EXPECT_EQ(prov.seed, 3u);
}

TEST_F(DetectorTest, InvalidConfigRejected) {
  DetectorConfig bad = config;
  bad.detection_threshold = 1.5;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = config;
  bad.top_n_proposals = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Training, MaxssnWithZeroNoiseEqualsStandardLoss) {
  const DetectorConfig config;
  const DetectorParams params = DetectorParams::create(FusionMode::mean, 9);
  const Scene scene = generate_scene(2, SceneSpec{});
  Rng rng(3);
  const auto targets = sample_training_targets(scene, make_anchors(config), config, rng);
  const double standard =
      detection_loss(params, config, scene.image, scene.bev, targets, nullptr, nullptr).total;
  Rng noise(4);
  const double maxssn =
      maxssn_loss(params, config, scene.image, scene.bev, targets, 0.0, 0.2, noise, nullptr);
  EXPECT_NEAR(maxssn, standard, 1e-6);
}

TEST(Training, IdenticalSeedsGiveIdenticalParams) {
  DatasetSpec spec;
  spec.count = 3;
  const auto data = generate_dataset(spec);
  DetectorConfig config;
  config.train.epochs = 1;
  const auto a = train_detector(data, config, FusionMode::mean);
  const auto b = train_detector(data, config, FusionMode::mean);
  EXPECT_EQ(a.params, b.params);
  EXPECT_TRUE(a.params.all_finite());
  EXPECT_THROW(train_detector({}, config, FusionMode::mean), InputError);
}

// 11-point interpolated AP recomputed from scratch: greedy matching per
// scene, then precision and recall recounted for every prefix.
double oracle_ap(const FusionDetector& det, std::span<const Scene> scenes) {
  std::vector<std::pair<double, bool>> per_class[kNumClasses];
  int gt[kNumClasses] = {0, 0, 0};
  for (const auto& scene : scenes) {
    auto dets = det.detect(scene);
    std::vector<bool> used(scene.objects.size(), false);
    for (const auto& d : dets) {
      int pick = -1;
      double best = 0.0;
      for (std::size_t j = 0; j < scene.objects.size(); ++j) {
        const auto& o = scene.objects[j];
        const double v = fusionbench::testing::oracle_iou(d.image_box, o.image_box);
        if (!used[j] && o.class_id == d.class_id && v >= 0.5 && v > best) {
          best = v;
          pick = static_cast<int>(j);
        }
      }
      if (pick >= 0) used[pick] = true;
      per_class[d.class_id].push_back({d.score, pick >= 0});
    }
    for (const auto& o : scene.objects) ++gt[o.class_id];
  }
  double sum = 0.0;
  int classes = 0;
  for (int c = 1; c < kNumClasses; ++c) {
    if (!gt[c]) continue;
    auto& list = per_class[c];
    std::stable_sort(list.begin(), list.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    double ap = 0.0;
    for (int t = 0; t <= 10; ++t) {
      double best = 0.0;
      for (std::size_t k = 1; k <= list.size(); ++k) {
        const auto hits = std::count_if(list.begin(), list.begin() + k,
                                        [](const auto& e) { return e.second; });
        if (static_cast<double>(hits) / gt[c] >= t / 10.0 - 1e-12) {
          best = std::max(best, static_cast<double>(hits) / k);
        }
      }
      ap += best;
    }
    sum += ap / 11.0;
    ++classes;
  }
  return classes ? sum / classes : 0.0;
}

TEST(Metrics, AveragePrecisionMatchesOracleAndStaysInUnitRange) {
  DatasetSpec spec;
  spec.count = 12;
  spec.seed = 99;
  const auto scenes = generate_dataset(spec);
  DetectorConfig config;
  const FusionDetector det(fusionbench::testing::tiny_model(), config);
  const auto m = evaluate_benign(det, scenes);
  DetectorConfig floor = config;
  floor.detection_threshold = 0.05;
  const FusionDetector all(fusionbench::testing::tiny_model(), floor);
  EXPECT_NEAR(m.average_precision, oracle_ap(all, scenes), 1e-12);
  EXPECT_GT(m.average_precision, 0.0);
  EXPECT_LE(m.average_precision, 1.0);
  EXPECT_GE(m.recall, 0.0);
  EXPECT_LE(m.recall, 1.0);
  EXPECT_EQ(evaluate_benign(det, {}).average_precision, 0.0);
}

}  // namespace
