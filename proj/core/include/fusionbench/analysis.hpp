#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fusionbench/attacks.hpp"
#include "fusionbench/dataset.hpp"
#include "fusionbench/detector.hpp"
#include "fusionbench/scene.hpp"

namespace fusionbench {

// ---------------------------------------------------------------------------
// Sensor swap

struct SwapOptions {
  bool include_diagonal = true;   // evaluate (image_i, lidar_i) pairs too
  bool image_side_truth = false;  // count matches against scene i instead of scene j
  double iou = 0.5;
  int workers = 1;
};

struct SwapStats {
  int n_scenes = 0;
  std::int64_t n_combinations = 0;  // pairings evaluated
  std::int64_t detections = 0;
  std::int64_t consistent = 0;      // matches the chosen side's ground truth
  std::int64_t spurious = 0;        // matches neither side
  double frac_lidar_consistent = 0.0;  // consistent / detections (0 when none)
  double frac_spurious = 0.0;
};

/// Runs `detector` on (image of scene i, LIDAR of scene j) for every ordered
/// pair. A detection is consistent when its image box reaches `iou` with a
/// ground truth of scene j (scene i with image_side_truth) and spurious when
/// it reaches it with neither. Throws InputError for fewer than two scenes.
SwapStats swap_experiment(const SceneDetector& detector, std::span<const Scene> scenes,
                          const SwapOptions& options = {});

// ---------------------------------------------------------------------------
// Distortion and attack suites

struct DistortionStats {
  std::vector<double> values;
  double median = 0.0;  // mean of the two middle values for even counts
  double mean = 0.0;
  double max = 0.0;
};

DistortionStats summarize_distortion(std::vector<double> values);

enum class AttackKind { disappearance, spoof, patch, random_patch };

AttackKind parse_attack_kind(std::string_view name);  // ConfigError on unknown names
std::string_view to_string(AttackKind kind);

/// One attack run, persisted as a JSON line.
struct AttackRecord {
  std::string scene_id;
  std::string attack;
  int target = -1;        // object index, or spoof candidate index
  int target_class = kBackground;
  std::string status;     // "ok", "unattackable"
  bool success = false;
  int iterations = 0;
  double distortion = 0.0;
  double epsilon = 0.0;
  std::string config_hash;
  std::uint64_t seed = 0;

  bool operator==(const AttackRecord&) const = default;
};

struct SuiteConfig {
  AttackConfig attack;
  int targets_per_scene = 1;  // disappearance: first N objects detected on the clean image
  double clutter_density = 0.6;  // returns planted under spoof targets
  double clutter_max_height_m = 1.0;
  int spoof_candidates = 8;   // target draws per scene before giving up
  int workers = 1;
};

struct SuiteSummary {
  int runs = 0;
  int successes = 0;
  double success_rate = 0.0;
  DistortionStats distortion;  // successful runs only
};

/// Aggregates records; the result depends only on the records.
SuiteSummary summarize_records(std::span<const AttackRecord> records);

struct SuiteResult {
  std::vector<AttackRecord> records;  // scene order, then target order
  SuiteSummary summary;
};

/// Runs one attack family over `scenes`.
///
/// disappearance: one record per target, targets being objects detected on
///   the clean image.
/// spoof: per scene one target of alternating class (vehicle on even scene
///   index), on empty road, with sparse LIDAR clutter planted under it and
///   not already detected before the attack.
/// patch / random_patch: one record per vehicle detected on the clean image;
///   `patch` must be set for AttackKind::patch.
SuiteResult evaluate_attack_suite(const FusionDetector& detector, AttackKind kind,
                                  std::span<const Scene> scenes, const SuiteConfig& config,
                                  const Provenance& provenance = {},
                                  const Tensor* patch = nullptr);

/// JSON lines with sorted keys, one record per line.
void write_records(const std::filesystem::path& path, std::span<const AttackRecord> records);
std::vector<AttackRecord> read_records(const std::filesystem::path& path);
std::string to_json_line(const AttackRecord& record);

}  // namespace fusionbench
