#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "fusionbench/attacks.hpp"
#include "fusionbench/errors.hpp"
#include "fusionbench/metrics.hpp"
#include "tiny_model.hpp"

using namespace fusionbench;

namespace {

// The attacker-facing surface must not expose proposals or pre-NMS boxes.
template <class S>
concept ExposesPreNms = requires(const S& s, const Tensor& t) { s.rpn_propose(t); } ||
                        requires(const S& s) { s.proposals(); } ||
                        requires(const S& s, const Tensor& t) { s.raw_detections(t); } ||
                        requires(const S& s, const Tensor& t) { s.stage2_classify(t); } ||
                        requires(const S& s) { s.detector(); };
static_assert(!ExposesPreNms<AttackSurface>);
static_assert(ExposesPreNms<FusionDetector> == false ||
              requires(const FusionDetector& d, const Tensor& t) { d.rpn_propose(t, t); });

TEST(BinarySearch, SyntheticMonotonePredicate) {
  const double e = binary_search_epsilon([](double x) { return x <= 3.7; }, 0.0, 8.0, 20);
  EXPECT_NEAR(e, 3.7, 8.0 / (1 << 20));
  EXPECT_LE(e, 3.7);
}

TEST(BinarySearch, AlwaysAndNever) {
  EXPECT_EQ(binary_search_epsilon([](double) { return true; }, 0.0, 8.0, 10), 8.0);
  EXPECT_THROW(binary_search_epsilon([](double) { return false; }, 0.0, 8.0, 10),
               UnattackableError);
  EXPECT_THROW(binary_search_epsilon([](double) { return true; }, 2.0, 1.0, 10), ConfigError);
}

TEST(EpsilonSchedule, StartAndFloor) {
  const PatchSchedule s{0.05, 0.005, 0.9};
  EXPECT_EQ(update_epsilon(0, s), 0.05);
  EXPECT_NEAR(update_epsilon(3, s), 0.05 * 0.9 * 0.9 * 0.9, 1e-15);
  EXPECT_EQ(update_epsilon(10000, s), 0.005);
  for (int i = 1; i < 100; ++i) EXPECT_LE(update_epsilon(i, s), update_epsilon(i - 1, s));
}

TEST(RandomPatch, DeterministicAndBounded) {
  const Tensor a = random_patch(16, 3);
  EXPECT_EQ(a, random_patch(16, 3));
  EXPECT_NE(a, random_patch(16, 4));
  EXPECT_EQ(a.channels, 3);
  for (double v : a.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(AttackConfig, Validation) {
  AttackConfig c;
  c.validate();
  c.eps_lo = 1.0;
  c.eps_hi = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.alpha = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.top_k = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

class AttackTest : public ::testing::Test {
 protected:
  DetectorConfig config = [] {
    DetectorConfig c;
    c.detection_threshold = 0.3;  // an untrained head sits near 1/3 per class
    return c;
  }();
  DetectorParams params = DetectorParams::create(FusionMode::mean, 8);
  Scene scene = generate_scene(31, [] {
    SceneSpec s;
    s.n_objects = 2;
    return s;
  }());
  AttackConfig attack = [] {
    AttackConfig a;
    a.max_outer_iterations = 4;
    a.inner_steps = 6;
    a.search_iterations = 2;
    return a;
  }();

  std::vector<Box3> boxes() const {
    std::vector<Box3> out;
    for (const auto& o : scene.objects) out.push_back(o.box3());
    return out;
  }
};

TEST_F(AttackTest, DisappearanceLossDegeneracies) {
  const FusionDetector det(params, config);
  const AttackSurface s(det, scene);
  const auto b = boxes();
  const Tensor zero = zeros_like(scene.image);
  EXPECT_EQ(disappearance_loss(s, zero, b, 0.7, nullptr), s.foreground_mass(scene.image, b, nullptr));

  Tensor delta = zero;
  Rng rng(2);
  for (double& v : delta.data) v = rng.normal(0, 0.05);
  Tensor moved = scene.image;
  for (std::size_t i = 0; i < moved.size(); ++i) moved.data[i] += delta.data[i];
  clip(moved, 0, 1);
  EXPECT_NEAR(disappearance_loss(s, delta, b, 0.0, nullptr), s.foreground_mass(moved, b, nullptr),
              1e-12);
  EXPECT_GT(disappearance_loss(s, delta, b, 1.0, nullptr),
            disappearance_loss(s, delta, b, 0.0, nullptr));
}

TEST_F(AttackTest, SpoofLossDegeneraciesAndRejections) {
  const FusionDetector det(params, config);
  const auto target = choose_spoof_target(scene, kVehicle, config, 1);
  ASSERT_TRUE(target.has_value());
  {
    // No LIDAR support under the target: refused before any optimization.
    Scene cleared = scene;
    const Box2 b = target->bev_box();
    for (int r = std::max(0, static_cast<int>(b.y0)); r < std::min(96, static_cast<int>(std::ceil(b.y1))); ++r)
      for (int c = std::max(0, static_cast<int>(b.x0)); c < std::min(96, static_cast<int>(std::ceil(b.x1))); ++c)
        cleared.bev(0, r, c) = cleared.bev(1, r, c) = 0.0;
    const AttackSurface s(det, cleared);
    EXPECT_THROW(spoof_loss(s, zeros_like(scene.image), *target, kVehicle, 0.1, nullptr),
                 SpoofTargetRejected);
    EXPECT_THROW(spoof_attack(s, *target, kVehicle, attack), SpoofTargetRejected);
  }
  Scene planted = scene;
  plant_lidar_clutter(planted, *target, config.grid, 5);
  const AttackSurface s(det, planted);
  const Tensor zero = zeros_like(scene.image);
  const double l0 = spoof_loss(s, zero, *target, kVehicle, 0.0, nullptr);
  EXPECT_EQ(l0, s.objectness_nll(scene.image, *target, nullptr));
  const double l = spoof_loss(s, zero, *target, kVehicle, 0.1, nullptr);
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_GT(l, 0.0);
  EXPECT_NEAR(l, l0 + 0.1 * s.class_nll(scene.image, *target, kVehicle, nullptr), 1e-9);

  // A target sitting on a real object is not a spoof.
  const AttackSurface real(det, scene);
  EXPECT_THROW(spoof_attack(real, scene.objects[0].box3(), kVehicle, attack), SpoofTargetRejected);
}

TEST_F(AttackTest, UndetectedTargetNeedsNoPerturbation) {
  DetectorConfig strict = config;
  strict.detection_threshold = 0.999;
  const FusionDetector det(params, strict);
  const AttackSurface s(det, scene);
  ASSERT_TRUE(s.detect(scene.image).empty());
  const AttackOutcome o = greedy_disappearance(s, {0}, attack, 0.0);
  EXPECT_TRUE(o.success);
  EXPECT_EQ(o.iterations, 0);
  EXPECT_EQ(o.distortion, 0.0);
  EXPECT_THROW(greedy_disappearance(s, {7}, attack, 0.0), InputError);
}

TEST_F(AttackTest, FirstInnerDescentDoesNotIncreaseLoss) {
  const FusionDetector det(fusionbench::testing::tiny_model(), DetectorConfig{});
  int checked = 0;
  for (std::uint64_t seed = 100; seed < 120 && checked < 3; ++seed) {
    const Scene sc = generate_scene(seed, SceneSpec{});
    const AttackSurface s(det, sc);
    for (std::size_t k = 0; k < sc.objects.size(); ++k) {
      const Detection* top = nullptr;
      for (const auto& d : s.detect(sc.image))
        if (!top && iou(d.image_box, sc.objects[k].image_box) >= attack.success_iou) top = &d;
      if (!top) continue;
      const Box3 box = top->proposal_box;
      const double start =
          disappearance_loss(s, zeros_like(sc.image), std::span(&box, 1), 0.01, nullptr);
      const AttackOutcome o = greedy_disappearance(s, {static_cast<int>(k)}, attack, 0.01);
      ASSERT_FALSE(o.trace.empty());
      EXPECT_LE(o.trace.front().loss, start);
      ++checked;
      break;
    }
  }
  EXPECT_EQ(checked, 3);
}

TEST_F(AttackTest, SuccessfulOutcomeSurvivesPersistence) {
  const FusionDetector det(params, config);
  const auto dir = std::filesystem::temp_directory_path() / "fusionbench_unit";
  std::filesystem::create_directories(dir);
  int checked = 0;
  for (std::uint64_t seed = 40; seed < 46; ++seed) {
    SceneSpec spec;
    spec.n_objects = 1;
    const Scene sc = generate_scene(seed, spec);
    const AttackSurface s(det, sc);
    const AttackOutcome o = greedy_disappearance(s, {}, attack, 0.0);
    if (!o.success || o.iterations == 0) continue;
    save_perturbation(o.perturbation, dir / "p.fbpt");
    const Perturbation back = load_perturbation(dir / "p.fbpt");
    EXPECT_EQ(back.delta, o.perturbation.delta);
    EXPECT_TRUE(targets_hidden(s.detect(apply_perturbation(sc.image, back)), sc.objects,
                               attack.success_iou));
    EXPECT_NEAR(per_pixel_l2(apply_perturbation(sc.image, back), sc.image), o.distortion, 1e-15);
    ++checked;
  }
  EXPECT_GT(checked, 0);
}

TEST_F(AttackTest, AttacksAreDeterministic) {
  const FusionDetector det(params, config);
  const AttackSurface s(det, scene);
  const AttackOutcome a = greedy_disappearance(s, {}, attack, 0.001);
  const AttackOutcome b = greedy_disappearance(s, {}, attack, 0.001);
  EXPECT_EQ(a.perturbation.delta, b.perturbation.delta);
  EXPECT_EQ(a.success, b.success);
}

TEST_F(AttackTest, UniversalPatchDegeneracies) {
  const FusionDetector det(params, config);
  EXPECT_THROW(universal_patch({}, attack), InputError);
  const std::vector<AttackSurface> train{AttackSurface(det, scene)};
  EXPECT_EQ(universal_patch(train, attack, 0), random_patch(attack.patch_size, attack.seed));
  const Tensor p = universal_patch(train, attack, 3);
  for (double v : p.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST_F(AttackTest, PatchPlacementsCoverVehiclesOnly) {
  for (const auto& pl : vehicle_placements(scene)) {
    const auto& o = scene.objects[pl.object_id];
    EXPECT_EQ(o.class_id, kVehicle);
    EXPECT_EQ(pl.region, o.patchable_region);
  }
}

}  // namespace
