#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fusionbench/analysis.hpp"
#include "fusionbench/errors.hpp"
#include "stubs.hpp"

using namespace fusionbench;

namespace {

using fusionbench::testing::OneSidedStub;

std::vector<Scene> scenes(int n) {
  DatasetSpec spec;
  spec.count = n;
  spec.seed = 5;
  return generate_dataset(spec);
}

TEST(Swap, LidarOnlyStubIsFullyConsistent) {
  const auto s = scenes(6);
  const OneSidedStub stub(s, true);
  const SwapStats st = swap_experiment(stub, s);
  EXPECT_EQ(st.n_combinations, 36);
  EXPECT_DOUBLE_EQ(st.frac_lidar_consistent, 1.0);
  EXPECT_EQ(st.spurious, 0);
}

TEST(Swap, ImageOnlyStubMatchesChanceRate) {
  const auto s = scenes(7);
  const OneSidedStub stub(s, false);
  // Brute force: every image-side object against every LIDAR-side scene.
  std::int64_t total = 0, hits = 0;
  for (const auto& a : s)
    for (const auto& b : s)
      for (const auto& o : a.objects) {
        ++total;
        bool m = false;
        for (const auto& g : b.objects) m = m || iou(o.image_box, g.image_box) >= 0.5;
        hits += m;
      }
  const SwapStats st = swap_experiment(stub, s);
  EXPECT_EQ(st.detections, total);
  EXPECT_NEAR(st.frac_lidar_consistent, static_cast<double>(hits) / total, 1e-6);
  EXPECT_EQ(st.spurious, 0);  // every box matches its own image's truth
  SwapOptions image_side;
  image_side.image_side_truth = true;
  EXPECT_DOUBLE_EQ(swap_experiment(stub, s, image_side).frac_lidar_consistent, 1.0);
}

TEST(Swap, PairingCountAndErrors) {
  const auto s = scenes(5);
  const OneSidedStub stub(s, true);
  EXPECT_EQ(swap_experiment(stub, s).n_combinations, 25);
  SwapOptions off;
  off.include_diagonal = false;
  EXPECT_EQ(swap_experiment(stub, s, off).n_combinations, 20);
  SwapOptions threads;
  threads.workers = 3;
  const auto a = swap_experiment(stub, s);
  const auto b = swap_experiment(stub, s, threads);
  EXPECT_EQ(a.consistent, b.consistent);
  EXPECT_EQ(a.detections, b.detections);
  EXPECT_THROW(swap_experiment(stub, std::span(s).first(1)), InputError);
}

TEST(Distortion, SummaryStatistics) {
  const auto odd = summarize_distortion({3, 1, 2});
  EXPECT_EQ(odd.median, 2);
  EXPECT_EQ(odd.max, 3);
  EXPECT_EQ(odd.mean, 2);
  EXPECT_EQ(odd.values, (std::vector<double>{3, 1, 2}));
  EXPECT_EQ(summarize_distortion({4, 1, 2, 3}).median, 2.5);
  const auto none = summarize_distortion({});
  EXPECT_EQ(none.median, 0);
  EXPECT_EQ(none.max, 0);
}

TEST(Records, RoundTripAndRecount) {
  std::vector<AttackRecord> rs;
  Rng rng(3);
  for (int i = 0; i < 25; ++i) {
    AttackRecord r;
    r.scene_id = "scene-" + std::to_string(i);
    r.attack = i % 2 ? "spoof" : "disappearance";
    r.target = i % 3;
    r.target_class = 1 + i % 2;
    r.status = i == 4 ? "unattackable" : "ok";
    r.success = rng.bernoulli(0.7);
    r.iterations = i;
    r.distortion = rng.uniform(0, 1e-3);
    r.epsilon = rng.uniform(0, 0.01);
    r.config_hash = "0123456789abcdef";
    r.seed = 7;
    rs.push_back(r);
  }
  const auto p = std::filesystem::temp_directory_path() / "fusionbench_unit" / "r.jsonl";
  std::filesystem::create_directories(p.parent_path());
  write_records(p, rs);
  const auto back = read_records(p);
  EXPECT_EQ(back, rs);
  const auto a = summarize_records(rs);
  const auto b = summarize_records(back);
  EXPECT_EQ(a.success_rate, b.success_rate);
  EXPECT_EQ(a.distortion.median, b.distortion.median);
  EXPECT_EQ(a.distortion.mean, b.distortion.mean);
  int successes = 0;
  for (const auto& r : rs) successes += r.success;
  EXPECT_EQ(a.successes, successes);
  EXPECT_EQ(a.success_rate, static_cast<double>(successes) / rs.size());
}

TEST(Records, BadLineReportsOffset) {
  const auto p = std::filesystem::temp_directory_path() / "fusionbench_unit" / "bad.jsonl";
  {
    std::ofstream out(p);
    AttackRecord r;
    out << to_json_line(r) << "\n{\"scene_id\": 3}\n";
  }
  try {
    read_records(p);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    AttackRecord r;
    EXPECT_EQ(e.offset(), to_json_line(r).size() + 1);
  }
}

TEST(Suite, ZeroBudgetNeverSucceeds) {
  const auto s = scenes(4);
  DetectorConfig config;
  config.detection_threshold = 0.3;
  const auto params = DetectorParams::create(FusionMode::mean, 3);
  const FusionDetector det(params, config);
  SuiteConfig suite;
  suite.attack.max_outer_iterations = 0;
  suite.attack.search_iterations = 0;
  const auto res = evaluate_attack_suite(det, AttackKind::spoof, s, suite);
  EXPECT_GT(res.summary.runs, 0);
  EXPECT_EQ(res.summary.success_rate, 0.0);
}

TEST(Suite, WorkersDoNotChangeRecords) {
  const auto s = scenes(4);
  DetectorConfig config;
  config.detection_threshold = 0.3;
  const auto params = DetectorParams::create(FusionMode::mean, 3);
  const FusionDetector det(params, config);
  SuiteConfig suite;
  suite.attack.max_outer_iterations = 2;
  suite.attack.inner_steps = 2;
  suite.attack.search_iterations = 1;
  const auto one = evaluate_attack_suite(det, AttackKind::disappearance, s, suite);
  suite.workers = 3;
  EXPECT_EQ(evaluate_attack_suite(det, AttackKind::disappearance, s, suite).records, one.records);
  EXPECT_THROW(evaluate_attack_suite(det, AttackKind::patch, s, suite), InputError);
}

TEST(AttackKinds, NamesRoundTrip) {
  for (AttackKind k : {AttackKind::disappearance, AttackKind::spoof, AttackKind::patch,
                       AttackKind::random_patch}) {
    EXPECT_EQ(parse_attack_kind(to_string(k)), k);
  }
  EXPECT_THROW(parse_attack_kind("evasion"), ConfigError);
}

}  // namespace
