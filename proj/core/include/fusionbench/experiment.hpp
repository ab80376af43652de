#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "fusionbench/analysis.hpp"
#include "fusionbench/defense.hpp"
#include "fusionbench/detector.hpp"
#include "fusionbench/scene.hpp"

namespace fusionbench {

/// Everything a run needs. Dataset, training and attack seeds are derived
/// from `seed`, so one number pins the whole pipeline.
struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::string out_dir = "runs/default";

  DatasetSpec train_data{300, 0, 1, 3, {}};
  DatasetSpec test_data{110, 0, 1, 3, {}};
  DatasetSpec patch_data{100, 0, 1, 3, {}};  // training set of the universal patch
  DetectorConfig detector;
  SuiteConfig suite;
  std::vector<DefenseSpec> defenses = default_defenses();
  int defense_scenes = 40;  // leading test scenes used for every table cell
  int swap_scenes = 40;

  static std::vector<DefenseSpec> default_defenses();

  /// Copy with derived seeds filled in (dataset, training and attack seeds).
  ExperimentConfig resolved() const;
};

/// Canonical JSON (sorted keys, no whitespace) of every field.
std::string to_canonical_json(const ExperimentConfig& config);

/// Parses JSON text. Missing keys keep their defaults; unknown keys, wrong
/// types and invalid values throw ConfigError naming the key path.
ExperimentConfig parse_experiment_config(std::string_view json_text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// 64-bit FNV-1a as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view bytes);

/// Hash of the canonical serialization.
std::string config_hash(const ExperimentConfig& config);

}  // namespace fusionbench
