#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fusionbench/analysis.hpp"
#include "fusionbench/detector.hpp"
#include "fusionbench/training.hpp"

namespace fusionbench {

// ---------------------------------------------------------------------------
// Corruptions

enum class Corruption { identity, gaussian_noise, shot_noise, gaussian_blur, brightness, contrast, fog };

Corruption parse_corruption(std::string_view name);  // ConfigError on unknown names
std::string_view to_string(Corruption kind);

/// Per-severity parameters, index 0 = severity 1.
///   gaussian_noise: additive N(0, sigma^2), sigma = 0.04 0.06 0.08 0.09 0.10
///   shot_noise:     Poisson(x * lambda) / lambda, lambda = 60 25 12 5 3 (variance x / lambda)
///   gaussian_blur:  separable Gaussian, sigma = 0.6 0.9 1.2 1.6 2.0 px, edge clamp
///   brightness:     x + b, b = 0.1 0.2 0.3 0.4 0.5
///   contrast:       per-channel mean + c * (x - mean), c = 0.75 0.6 0.45 0.3 0.2
///   fog:            blend toward 0.8 gray with weight a * (1 - 0.5 * row / H),
///                   a = 0.15 0.25 0.35 0.45 0.55
/// The additive noise variances are those of (out - in) before clipping.
double gaussian_noise_sigma(int severity);
double shot_noise_lambda(int severity);

/// Applies `kind` at `severity` in 0..5 (0 is the identity for every kind)
/// and clips to [0, 1]. Deterministic in (image, kind, severity, seed).
/// Throws InputError for severities outside 0..5.
Tensor corrupt(const Tensor& image, Corruption kind, int severity, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Robust training

struct DistortedTrainingConfig {
  std::vector<Corruption> corruptions{Corruption::gaussian_noise, Corruption::shot_noise,
                                      Corruption::gaussian_blur,  Corruption::brightness,
                                      Corruption::contrast,       Corruption::fog};
  std::vector<int> severities{1, 2, 3, 4, 5};
};

/// Standard training where every image draw is replaced by a uniformly
/// chosen (corruption, severity) pair.
TrainResult train_distorted(std::span<const Scene> dataset, const DetectorConfig& config,
                            const DistortedTrainingConfig& distortion);

/// Inner attack of adversarial training: `steps` normalized-gradient ascent
/// steps of L2 length step_size * H * W on the detection loss, projected
/// into the L2 ball of radius radius * H * W around the clean image and
/// into [0, 1]. Lengths use the per-pixel L2 units of reported distortions.
struct AdversarialBudget {
  int steps = 3;
  double step_size = 0.0003;
  double radius = 0.0006;

  bool operator==(const AdversarialBudget&) const = default;
};

/// Replaces `image` by the inner-attack image for the current parameters.
void adversarial_example(const DetectorParams& params, const DetectorConfig& config,
                         Tensor& image, const Tensor& bev, const TrainingTargets& targets,
                         const AdversarialBudget& budget);

/// Preliminary adversarial training: each step trains on the inner-attack
/// image (LIDAR untouched). Zero steps reduce to standard training.
TrainResult adversarial_training(std::span<const Scene> dataset, const DetectorConfig& config,
                                 const AdversarialBudget& budget);

// ---------------------------------------------------------------------------
// Defense table

enum class DefenseKind { baseline, distorted_inputs, maxssn, maxssn_lel, adv_training };

DefenseKind parse_defense_kind(std::string_view name);  // ConfigError on unknown names
std::string_view to_string(DefenseKind kind);
/// Row label used in the rendered table ("MaxSSN + LEL", ...).
std::string_view display_name(DefenseKind kind);

struct DefenseSpec {
  DefenseKind kind = DefenseKind::baseline;
  DistortedTrainingConfig distortion;  // distorted_inputs
  AdversarialBudget adversarial;       // adv_training
  double maxssn_noise = 0.1;           // maxssn, maxssn_lel
  double maxssn_clean_weight = 0.2;
};

/// Trains the model of one table row. Fusion is mean except for maxssn_lel.
TrainResult train_defense(const DefenseSpec& spec, std::span<const Scene> dataset,
                          const DetectorConfig& config);

struct DefenseCell {
  AttackKind attack = AttackKind::disappearance;
  SuiteSummary summary;
  std::string config_hash;
};

struct DefenseRow {
  DefenseKind kind = DefenseKind::baseline;
  double benign_ap = 0.0;
  double benign_recall = 0.0;
  std::vector<DefenseCell> cells;  // in attack order

  const DefenseCell& cell(AttackKind attack) const;  // InputError when absent
};

struct DefenseTable {
  std::vector<AttackKind> attacks;
  std::vector<DefenseRow> rows;  // config order
};

/// Evaluates every attack suite against every row's model on the same
/// scenes and attack config. `records`, when set, receives all run records
/// (row order, then attack order). Throws ConfigError naming the first row
/// whose model is missing.
DefenseTable build_defense_table(std::span<const DefenseSpec> specs,
                                 const std::map<DefenseKind, DetectorParams>& models,
                                 std::span<const AttackKind> attacks,
                                 std::span<const Scene> scenes, const DetectorConfig& config,
                                 const SuiteConfig& suite, const Provenance& provenance = {},
                                 std::vector<AttackRecord>* records = nullptr);

/// Aligned text: one row per defense, one success-rate column per attack,
/// then benign AP.
std::string render_defense_table(const DefenseTable& table);

}  // namespace fusionbench
