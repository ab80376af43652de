#include <benchmark/benchmark.h>

#include "fusionbench/attacks.hpp"
#include "fusionbench/detector.hpp"
#include "fusionbench/rng.hpp"
#include "fusionbench/scene.hpp"
#include "fusionbench/training.hpp"

using namespace fusionbench;

namespace {

struct Fixture {
  DetectorConfig config;
  DetectorParams params = DetectorParams::create(FusionMode::mean, 3);
  Scene scene;

  Fixture() {
    SceneSpec spec;
    spec.n_objects = 3;
    scene = generate_scene(11, spec);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

void BM_Detect(benchmark::State& state) {
  const auto& f = fixture();
  const FusionDetector detector(f.params, f.config);
  for (auto _ : state) benchmark::DoNotOptimize(detector.detect(f.scene.image, f.scene.bev));
}
BENCHMARK(BM_Detect)->Unit(benchmark::kMillisecond);

void BM_DetectionLossForwardBackward(benchmark::State& state) {
  const auto& f = fixture();
  Rng rng(5);
  const auto targets = sample_training_targets(f.scene, make_anchors(f.config), f.config, rng);
  DetectorParams grads = f.params.zeros_like();
  Tensor image_grad = zeros_like(f.scene.image);
  for (auto _ : state) {
    benchmark::DoNotOptimize(detection_loss(f.params, f.config, f.scene.image, f.scene.bev,
                                            targets, &grads, &image_grad));
  }
}
BENCHMARK(BM_DetectionLossForwardBackward)->Unit(benchmark::kMillisecond);

void BM_DisappearanceGradient(benchmark::State& state) {
  const auto& f = fixture();
  const FusionDetector detector(f.params, f.config);
  const AttackSurface surface(detector, f.scene);
  std::vector<Box3> boxes;
  for (const auto& o : f.scene.objects) boxes.push_back(o.box3());
  Tensor delta = zeros_like(f.scene.image);
  Tensor grad;
  for (auto _ : state) {
    benchmark::DoNotOptimize(disappearance_loss(surface, delta, boxes, 0.01, &grad));
  }
}
BENCHMARK(BM_DisappearanceGradient)->Unit(benchmark::kMillisecond);

void BM_Nms(benchmark::State& state) {
  Rng rng(9);
  std::vector<Detection> dets(static_cast<std::size_t>(state.range(0)));
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const double x = rng.uniform(0, 150), y = rng.uniform(0, 100);
    dets[i].image_box = {x, y, x + rng.uniform(5, 40), y + rng.uniform(5, 30)};
    dets[i].score = rng.uniform();
    dets[i].anchor_id = static_cast<int>(i);
  }
  for (auto _ : state) benchmark::DoNotOptimize(nms(dets, 0.45));
}
BENCHMARK(BM_Nms)->Arg(16)->Arg(64)->Arg(256);

void BM_RasterizeBev(benchmark::State& state) {
  const GridSpec grid;
  Rng rng(4);
  std::vector<Point3> points(static_cast<std::size_t>(state.range(0)));
  for (auto& p : points) p = {rng.uniform(-13, 13), rng.uniform(-1, 25), rng.uniform(0, 2)};
  for (auto _ : state) benchmark::DoNotOptimize(rasterize_bev(points, grid));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_RasterizeBev)->Arg(1000)->Arg(20000);

void BM_ApplyPatch(benchmark::State& state) {
  const auto& f = fixture();
  const Tensor patch = random_patch(16, 2);
  auto placements = vehicle_placements(f.scene);
  if (placements.empty()) placements.push_back({0, {40, 40, 48, 30}});
  for (auto _ : state) benchmark::DoNotOptimize(apply_patch(f.scene.image, patch, placements));
}
BENCHMARK(BM_ApplyPatch);

}  // namespace

BENCHMARK_MAIN();
