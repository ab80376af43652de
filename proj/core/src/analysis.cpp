#include "fusionbench/analysis.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "fusionbench/errors.hpp"
#include "fusionbench/metrics.hpp"
#include "fusionbench/rng.hpp"
#include "parallel.hpp"

namespace fusionbench {

namespace {

bool matches_any(const Box2& box, std::span<const GroundTruthObject> objects, double thr) {
  for (const auto& o : objects)
    if (iou(box, o.image_box) >= thr) return true;
  return false;
}

}  // namespace

SwapStats swap_experiment(const SceneDetector& detector, std::span<const Scene> scenes,
                          const SwapOptions& options) {
  const int n = static_cast<int>(scenes.size());
  if (n < 2) throw InputError("swap experiment needs at least two scenes");
  struct Counts {
    std::int64_t pairs = 0, detections = 0, consistent = 0, spurious = 0;
  };
  // One slot per image index; the reduction runs in index order.
  std::vector<Counts> rows(n);
  detail::parallel_for(n, options.workers, [&](int i) {
    Counts& c = rows[i];
    for (int j = 0; j < n; ++j) {
      if (i == j && !options.include_diagonal) continue;
      ++c.pairs;
      const Scene& img = scenes[i];
      const Scene& lidar = scenes[j];
      const auto& truth = options.image_side_truth ? img.objects : lidar.objects;
      for (const auto& d : detector.detect(img.image, lidar.bev)) {
        ++c.detections;
        if (matches_any(d.image_box, truth, options.iou)) ++c.consistent;
        if (!matches_any(d.image_box, img.objects, options.iou) &&
            !matches_any(d.image_box, lidar.objects, options.iou)) {
          ++c.spurious;
        }
      }
    }
  });
  SwapStats s;
  s.n_scenes = n;
  for (const auto& c : rows) {
    s.n_combinations += c.pairs;
    s.detections += c.detections;
    s.consistent += c.consistent;
    s.spurious += c.spurious;
  }
  if (s.detections > 0) {
    s.frac_lidar_consistent = static_cast<double>(s.consistent) / s.detections;
    s.frac_spurious = static_cast<double>(s.spurious) / s.detections;
  }
  return s;
}

DistortionStats summarize_distortion(std::vector<double> values) {
  DistortionStats s;
  s.values = std::move(values);
  if (s.values.empty()) return s;
  std::vector<double> sorted = s.values;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size() / 2;
  s.median = sorted.size() % 2 ? sorted[m] : 0.5 * (sorted[m - 1] + sorted[m]);
  s.mean = std::accumulate(s.values.begin(), s.values.end(), 0.0) / s.values.size();
  s.max = sorted.back();
  return s;
}

AttackKind parse_attack_kind(std::string_view name) {
  if (name == "disappearance") return AttackKind::disappearance;
  if (name == "spoof") return AttackKind::spoof;
  if (name == "patch") return AttackKind::patch;
  if (name == "random_patch") return AttackKind::random_patch;
  throw ConfigError("unknown attack kind: " + std::string(name));
}

std::string_view to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::disappearance: return "disappearance";
    case AttackKind::spoof: return "spoof";
    case AttackKind::patch: return "patch";
    case AttackKind::random_patch: return "random_patch";
  }
  return "?";
}

SuiteSummary summarize_records(std::span<const AttackRecord> records) {
  SuiteSummary s;
  std::vector<double> dist;
  for (const auto& r : records) {
    ++s.runs;
    if (r.success) {
      ++s.successes;
      dist.push_back(r.distortion);
    }
  }
  if (s.runs > 0) s.success_rate = static_cast<double>(s.successes) / s.runs;
  s.distortion = summarize_distortion(std::move(dist));
  return s;
}

namespace {

AttackRecord base_record(const Scene& scene, AttackKind kind, const Provenance& p) {
  AttackRecord r;
  r.scene_id = scene.scene_id;
  r.attack = std::string(to_string(kind));
  r.config_hash = p.config_hash;
  r.seed = p.seed;
  r.status = "ok";
  return r;
}

std::vector<AttackRecord> disappearance_runs(const FusionDetector& detector, const Scene& scene,
                                             const SuiteConfig& config, const Provenance& p) {
  std::vector<AttackRecord> out;
  const AttackSurface surface(detector, scene);
  const auto clean = surface.detect(scene.image);
  for (std::size_t k = 0; k < scene.objects.size(); ++k) {
    if (static_cast<int>(out.size()) >= config.targets_per_scene) break;
    const std::span<const GroundTruthObject> one(&scene.objects[k], 1);
    if (targets_hidden(clean, one, config.attack.success_iou)) continue;
    AttackRecord r = base_record(scene, AttackKind::disappearance, p);
    r.target = static_cast<int>(k);
    r.target_class = scene.objects[k].class_id;
    try {
      const AttackOutcome o = disappearance_attack(surface, {static_cast<int>(k)}, config.attack);
      r.success = o.success;
      r.iterations = o.iterations;
      r.distortion = o.distortion;
      r.epsilon = o.perturbation.epsilon;
    } catch (const UnattackableError&) {
      r.status = "unattackable";
      r.epsilon = config.attack.eps_lo;
    }
    out.push_back(r);
  }
  return out;
}

std::vector<AttackRecord> spoof_runs(const FusionDetector& detector, const Scene& scene,
                                     int scene_index, const SuiteConfig& config,
                                     const Provenance& p) {
  const int cls = scene_index % 2 == 0 ? kVehicle : kPedestrianCyclist;
  const std::uint64_t scene_seed = Rng::mix(config.attack.seed, static_cast<std::uint64_t>(scene_index));
  for (int c = 0; c < config.spoof_candidates; ++c) {
    const std::uint64_t seed = Rng::mix(scene_seed, static_cast<std::uint64_t>(c));
    const auto target = choose_spoof_target(scene, cls, detector.config(), seed);
    if (!target) return {};
    Scene planted = scene;
    plant_lidar_clutter(planted, *target, detector.config().grid, seed, config.clutter_density,
                        config.clutter_max_height_m);
    const AttackSurface surface(detector, planted);
    const Box2 target_image = clip_box(detector.config().camera.project(*target),
                                       scene.image.width, scene.image.height);
    if (spoof_succeeded(surface.detect(scene.image), target_image, cls,
                        surface.detection_threshold(), config.attack.success_iou)) {
      continue;  // already a false positive without any perturbation
    }
    AttackRecord r = base_record(scene, AttackKind::spoof, p);
    r.target = c;
    r.target_class = cls;
    const AttackOutcome o = spoof_attack(surface, *target, cls, config.attack);
    r.success = o.success;
    r.iterations = o.iterations;
    r.distortion = o.distortion;
    return {r};
  }
  return {};
}

std::vector<AttackRecord> patch_runs(const FusionDetector& detector, const Scene& scene,
                                     AttackKind kind, const Tensor& patch,
                                     const SuiteConfig& config, const Provenance& p) {
  std::vector<AttackRecord> out;
  const AttackSurface surface(detector, scene);
  const auto placements = vehicle_placements(scene);
  const double dist =
      placements.empty() ? 0.0 : per_pixel_l2(apply_patch(scene.image, patch, placements), scene.image);
  for (const auto& res : evaluate_patch(surface, patch, config.attack.success_iou)) {
    AttackRecord r = base_record(scene, kind, p);
    r.target = res.object_id;
    r.target_class = kVehicle;
    r.success = res.success;
    r.distortion = dist;
    out.push_back(r);
  }
  return out;
}

}  // namespace

SuiteResult evaluate_attack_suite(const FusionDetector& detector, AttackKind kind,
                                  std::span<const Scene> scenes, const SuiteConfig& config,
                                  const Provenance& provenance, const Tensor* patch) {
  if (scenes.empty()) throw InputError("attack suite needs at least one scene");
  config.attack.validate();
  Tensor random;
  if (kind == AttackKind::patch && !patch) throw InputError("patch suite needs a patch");
  if (kind == AttackKind::random_patch) {
    random = random_patch(config.attack.patch_size, Rng::mix(config.attack.seed, 1));
    patch = &random;
  }
  const int n = static_cast<int>(scenes.size());
  std::vector<std::vector<AttackRecord>> slots(n);
  detail::parallel_for(n, config.workers, [&](int i) {
    switch (kind) {
      case AttackKind::disappearance:
        slots[i] = disappearance_runs(detector, scenes[i], config, provenance);
        break;
      case AttackKind::spoof:
        slots[i] = spoof_runs(detector, scenes[i], i, config, provenance);
        break;
      case AttackKind::patch:
      case AttackKind::random_patch:
        slots[i] = patch_runs(detector, scenes[i], kind, *patch, config, provenance);
        break;
    }
  });
  SuiteResult result;
  for (auto& s : slots)
    for (auto& r : s) result.records.push_back(std::move(r));
  result.summary = summarize_records(result.records);
  return result;
}

// ---------------------------------------------------------------------------
// Records

namespace {

nlohmann::json to_json(const AttackRecord& r) {
  // nlohmann::json objects keep keys sorted, so the line layout is canonical.
  return {{"scene_id", r.scene_id},   {"attack", r.attack},         {"target", r.target},
          {"target_class", r.target_class}, {"status", r.status},   {"success", r.success},
          {"iterations", r.iterations}, {"distortion", r.distortion}, {"epsilon", r.epsilon},
          {"config_hash", r.config_hash}, {"seed", r.seed}};
}

}  // namespace

std::string to_json_line(const AttackRecord& record) { return to_json(record).dump(); }

void write_records(const std::filesystem::path& path, std::span<const AttackRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open record file for writing: " + path.string());
  for (const auto& r : records) out << to_json_line(r) << '\n';
  if (!out) throw InputError("failed writing record file: " + path.string());
}

std::vector<AttackRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open record file: " + path.string());
  std::vector<AttackRecord> out;
  std::string line;
  std::uint64_t offset = 0;
  while (std::getline(in, line)) {
    const std::uint64_t line_start = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      AttackRecord r;
      r.scene_id = j.at("scene_id").get<std::string>();
      r.attack = j.at("attack").get<std::string>();
      r.target = j.at("target").get<int>();
      r.target_class = j.at("target_class").get<int>();
      r.status = j.at("status").get<std::string>();
      r.success = j.at("success").get<bool>();
      r.iterations = j.at("iterations").get<int>();
      r.distortion = j.at("distortion").get<double>();
      r.epsilon = j.at("epsilon").get<double>();
      r.config_hash = j.at("config_hash").get<std::string>();
      r.seed = j.at("seed").get<std::uint64_t>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad attack record: ") + e.what(), line_start);
    }
  }
  return out;
}

}  // namespace fusionbench
