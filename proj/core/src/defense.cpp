#include "fusionbench/defense.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "fusionbench/errors.hpp"
#include "fusionbench/rng.hpp"

namespace fusionbench {

namespace {

constexpr std::array<double, 5> kNoiseSigma{0.04, 0.06, 0.08, 0.09, 0.10};
constexpr std::array<double, 5> kShotLambda{60.0, 25.0, 12.0, 5.0, 3.0};
constexpr std::array<double, 5> kBlurSigma{0.6, 0.9, 1.2, 1.6, 2.0};
constexpr std::array<double, 5> kBrightness{0.1, 0.2, 0.3, 0.4, 0.5};
constexpr std::array<double, 5> kContrast{0.75, 0.6, 0.45, 0.3, 0.2};
constexpr std::array<double, 5> kFog{0.15, 0.25, 0.35, 0.45, 0.55};

void check_severity(int severity) {
  if (severity < 0 || severity > 5) {
    throw InputError("corruption severity must be in 0..5, got " + std::to_string(severity));
  }
}

void blur(Tensor& t, double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;
  Tensor tmp = t;
  for (int c = 0; c < t.channels; ++c) {
    for (int y = 0; y < t.height; ++y)
      for (int x = 0; x < t.width; ++x) {
        double s = 0.0;
        for (int i = -r; i <= r; ++i) s += k[i + r] * t(c, y, std::clamp(x + i, 0, t.width - 1));
        tmp(c, y, x) = s;
      }
    for (int y = 0; y < t.height; ++y)
      for (int x = 0; x < t.width; ++x) {
        double s = 0.0;
        for (int i = -r; i <= r; ++i) s += k[i + r] * tmp(c, std::clamp(y + i, 0, t.height - 1), x);
        t(c, y, x) = s;
      }
  }
}

}  // namespace

Corruption parse_corruption(std::string_view name) {
  for (Corruption c : {Corruption::identity, Corruption::gaussian_noise, Corruption::shot_noise,
                       Corruption::gaussian_blur, Corruption::brightness, Corruption::contrast,
                       Corruption::fog}) {
    if (to_string(c) == name) return c;
  }
  throw ConfigError("unknown corruption: " + std::string(name));
}

std::string_view to_string(Corruption kind) {
  switch (kind) {
    case Corruption::identity: return "identity";
    case Corruption::gaussian_noise: return "gaussian_noise";
    case Corruption::shot_noise: return "shot_noise";
    case Corruption::gaussian_blur: return "gaussian_blur";
    case Corruption::brightness: return "brightness";
    case Corruption::contrast: return "contrast";
    case Corruption::fog: return "fog";
  }
  return "?";
}

double gaussian_noise_sigma(int severity) {
  check_severity(severity);
  return severity == 0 ? 0.0 : kNoiseSigma[severity - 1];
}

double shot_noise_lambda(int severity) {
  check_severity(severity);
  if (severity == 0) throw InputError("shot noise has no rate at severity 0");
  return kShotLambda[severity - 1];
}

Tensor corrupt(const Tensor& image, Corruption kind, int severity, std::uint64_t seed) {
  check_severity(severity);
  Tensor out = image;
  if (severity == 0 || kind == Corruption::identity) return out;
  const int s = severity - 1;
  Rng rng(seed);
  switch (kind) {
    case Corruption::identity:
      break;
    case Corruption::gaussian_noise:
      for (double& x : out.data) x += kNoiseSigma[s] * rng.normal();
      break;
    case Corruption::shot_noise:
      for (double& x : out.data) x = rng.poisson(std::max(x, 0.0) * kShotLambda[s]) / kShotLambda[s];
      break;
    case Corruption::gaussian_blur:
      blur(out, kBlurSigma[s]);
      break;
    case Corruption::brightness:
      for (double& x : out.data) x += kBrightness[s];
      break;
    case Corruption::contrast:
      for (int c = 0; c < out.channels; ++c) {
        auto p = out.plane(c);
        double mean = 0.0;
        for (double x : p) mean += x;
        mean /= static_cast<double>(p.size());
        for (double& x : p) x = mean + kContrast[s] * (x - mean);
      }
      break;
    case Corruption::fog:
      for (int c = 0; c < out.channels; ++c)
        for (int y = 0; y < out.height; ++y) {
          const double a = kFog[s] * (1.0 - 0.5 * y / out.height);
          for (int x = 0; x < out.width; ++x) out(c, y, x) = (1.0 - a) * out(c, y, x) + a * 0.8;
        }
      break;
  }
  clip(out, 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Robust training

TrainResult train_distorted(std::span<const Scene> dataset, const DetectorConfig& config,
                            const DistortedTrainingConfig& distortion) {
  if (distortion.corruptions.empty() || distortion.severities.empty()) {
    throw ConfigError("distorted training needs at least one corruption and severity");
  }
  for (int s : distortion.severities) check_severity(s);
  TrainOptions options;
  options.augment = [&](Tensor& image, Rng& rng) {
    const int n_kinds = static_cast<int>(distortion.corruptions.size());
    const int n_sev = static_cast<int>(distortion.severities.size());
    const Corruption kind = distortion.corruptions[rng.uniform_int(0, n_kinds - 1)];
    const int severity = distortion.severities[rng.uniform_int(0, n_sev - 1)];
    image = corrupt(image, kind, severity, rng.next_u64());
  };
  return train_detector(dataset, config, FusionMode::mean, options);
}

void adversarial_example(const DetectorParams& params, const DetectorConfig& config,
                         Tensor& image, const Tensor& bev, const TrainingTargets& targets,
                         const AdversarialBudget& budget) {
  if (budget.steps <= 0) return;
  const double pixels = static_cast<double>(image.height) * image.width;
  const double radius = budget.radius * pixels;
  const double step = budget.step_size * pixels;
  const Tensor clean = image;
  for (int k = 0; k < budget.steps; ++k) {
    Tensor g;
    detection_loss(params, config, image, bev, targets, nullptr, &g);
    const double gn = l2_norm(g.data);
    if (!(gn > 0.0) || !std::isfinite(gn)) break;
    for (std::size_t i = 0; i < image.size(); ++i) image.data[i] += step * g.data[i] / gn;
    // Project: L2 ball around the clean image, then the valid pixel range.
    double d2 = 0.0;
    for (std::size_t i = 0; i < image.size(); ++i) {
      const double d = image.data[i] - clean.data[i];
      d2 += d * d;
    }
    const double d = std::sqrt(d2);
    if (d > radius) {
      const double f = radius / d;
      for (std::size_t i = 0; i < image.size(); ++i)
        image.data[i] = clean.data[i] + f * (image.data[i] - clean.data[i]);
    }
    clip(image, 0.0, 1.0);
  }
}

TrainResult adversarial_training(std::span<const Scene> dataset, const DetectorConfig& config,
                                 const AdversarialBudget& budget) {
  if (budget.steps < 0 || budget.step_size < 0.0 || budget.radius < 0.0) {
    throw ConfigError("adversarial budget must be non-negative");
  }
  TrainOptions options;
  if (budget.steps > 0) {
    options.adversary = [&](const DetectorParams& params, Tensor& image, const Tensor& bev,
                            const TrainingTargets& targets, Rng&) {
      adversarial_example(params, config, image, bev, targets, budget);
    };
  }
  return train_detector(dataset, config, FusionMode::mean, options);
}

// ---------------------------------------------------------------------------
// Defense table

DefenseKind parse_defense_kind(std::string_view name) {
  for (DefenseKind k : {DefenseKind::baseline, DefenseKind::distorted_inputs, DefenseKind::maxssn,
                        DefenseKind::maxssn_lel, DefenseKind::adv_training}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown defense kind: " + std::string(name));
}

std::string_view to_string(DefenseKind kind) {
  switch (kind) {
    case DefenseKind::baseline: return "baseline";
    case DefenseKind::distorted_inputs: return "distorted_inputs";
    case DefenseKind::maxssn: return "maxssn";
    case DefenseKind::maxssn_lel: return "maxssn_lel";
    case DefenseKind::adv_training: return "adv_training";
  }
  return "?";
}

std::string_view display_name(DefenseKind kind) {
  switch (kind) {
    case DefenseKind::baseline: return "Baseline";
    case DefenseKind::distorted_inputs: return "Distorted Inputs";
    case DefenseKind::maxssn: return "MaxSSN";
    case DefenseKind::maxssn_lel: return "MaxSSN + LEL";
    case DefenseKind::adv_training: return "Adversarial Training";
  }
  return "?";
}

TrainResult train_defense(const DefenseSpec& spec, std::span<const Scene> dataset,
                          const DetectorConfig& config) {
  switch (spec.kind) {
    case DefenseKind::baseline:
      return train_detector(dataset, config, FusionMode::mean);
    case DefenseKind::distorted_inputs:
      return train_distorted(dataset, config, spec.distortion);
    case DefenseKind::maxssn:
    case DefenseKind::maxssn_lel: {
      TrainOptions options;
      options.loss_mode = LossMode::maxssn;
      options.maxssn_noise = spec.maxssn_noise;
      options.maxssn_clean_weight = spec.maxssn_clean_weight;
      const FusionMode mode = spec.kind == DefenseKind::maxssn ? FusionMode::mean : FusionMode::lel;
      return train_detector(dataset, config, mode, options);
    }
    case DefenseKind::adv_training:
      return adversarial_training(dataset, config, spec.adversarial);
  }
  throw ConfigError("unknown defense kind");
}

const DefenseCell& DefenseRow::cell(AttackKind attack) const {
  for (const auto& c : cells)
    if (c.attack == attack) return c;
  throw InputError("defense row has no cell for attack " + std::string(to_string(attack)));
}

DefenseTable build_defense_table(std::span<const DefenseSpec> specs,
                                 const std::map<DefenseKind, DetectorParams>& models,
                                 std::span<const AttackKind> attacks,
                                 std::span<const Scene> scenes, const DetectorConfig& config,
                                 const SuiteConfig& suite, const Provenance& provenance,
                                 std::vector<AttackRecord>* records) {
  for (const auto& spec : specs) {
    if (!models.contains(spec.kind)) {
      throw ConfigError("missing trained model for defense row '" +
                        std::string(to_string(spec.kind)) + "'");
    }
  }
  DefenseTable table;
  table.attacks.assign(attacks.begin(), attacks.end());
  for (const auto& spec : specs) {
    const FusionDetector detector(models.at(spec.kind), config);
    DefenseRow row;
    row.kind = spec.kind;
    const BenignMetrics benign = evaluate_benign(detector, scenes);
    row.benign_ap = benign.average_precision;
    row.benign_recall = benign.recall;
    for (AttackKind attack : attacks) {
      SuiteResult r = evaluate_attack_suite(detector, attack, scenes, suite, provenance);
      row.cells.push_back({attack, r.summary, provenance.config_hash});
      if (records) records->insert(records->end(), r.records.begin(), r.records.end());
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string render_defense_table(const DefenseTable& table) {
  auto header = [](AttackKind a) -> std::string {
    switch (a) {
      case AttackKind::disappearance: return "Disappearance";
      case AttackKind::spoof: return "Spoofing";
      case AttackKind::patch: return "Patch";
      case AttackKind::random_patch: return "Random Patch";
    }
    return "?";
  };
  std::ostringstream out;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%-22s", "Defense");
  out << buf;
  for (AttackKind a : table.attacks) {
    std::snprintf(buf, sizeof(buf), " %14s", header(a).c_str());
    out << buf;
  }
  out << "      Benign AP\n";
  for (const auto& row : table.rows) {
    std::snprintf(buf, sizeof(buf), "%-22s", std::string(display_name(row.kind)).c_str());
    out << buf;
    for (const auto& c : row.cells) {
      std::snprintf(buf, sizeof(buf), " %14.2f", c.summary.success_rate);
      out << buf;
    }
    std::snprintf(buf, sizeof(buf), " %14.3f\n", row.benign_ap);
    out << buf;
  }
  return out.str();
}

}  // namespace fusionbench
