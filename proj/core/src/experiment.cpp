#include "fusionbench/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fusionbench/errors.hpp"
#include "fusionbench/rng.hpp"

namespace fusionbench {

using nlohmann::json;

std::vector<DefenseSpec> ExperimentConfig::default_defenses() {
  std::vector<DefenseSpec> out;
  for (DefenseKind k : {DefenseKind::baseline, DefenseKind::distorted_inputs, DefenseKind::maxssn,
                        DefenseKind::maxssn_lel, DefenseKind::adv_training}) {
    DefenseSpec s;
    s.kind = k;
    out.push_back(s);
  }
  return out;
}

ExperimentConfig ExperimentConfig::resolved() const {
  ExperimentConfig c = *this;
  c.train_data.seed = Rng::mix(seed, 1);
  c.test_data.seed = Rng::mix(seed, 2);
  c.patch_data.seed = Rng::mix(seed, 3);
  c.detector.train.seed = Rng::mix(seed, 4);
  c.suite.attack.seed = Rng::mix(seed, 5);
  for (DatasetSpec* d : {&c.train_data, &c.test_data, &c.patch_data}) {
    d->scene.camera = c.detector.camera;
    d->scene.grid = c.detector.grid;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Writing

namespace {

json range_json(const Range& r) { return json::array({r.lo, r.hi}); }

json geometry_json(const ClassGeometry& g) {
  return {{"width_m", range_json(g.width_m)},
          {"length_m", range_json(g.length_m)},
          {"height_m", range_json(g.height_m)}};
}

json camera_json(const Camera& c) {
  return {{"image_height", c.image_height}, {"image_width", c.image_width},
          {"bev_rows", c.bev_rows},         {"px_per_cell", c.px_per_cell},
          {"horizon_row", c.horizon_row},   {"px_per_depth_row", c.px_per_depth_row},
          {"px_per_meter", c.px_per_meter}, {"far_scale", c.far_scale},
          {"near_scale", c.near_scale}};
}

json grid_json(const GridSpec& g) {
  return {{"channels", g.channels}, {"rows", g.rows},   {"cols", g.cols},
          {"x_min", g.x_min},       {"x_max", g.x_max}, {"y_min", g.y_min},
          {"y_max", g.y_max},       {"z_max", g.z_max}};
}

json scene_json(const SceneSpec& s) {
  return {{"vehicle_fraction", s.vehicle_fraction},
          {"vehicle", geometry_json(s.vehicle)},
          {"pedestrian", geometry_json(s.pedestrian)},
          {"depth_rows", range_json(s.depth_rows)},
          {"lateral_margin_cells", s.lateral_margin_cells},
          {"max_image_overlap", s.max_image_overlap},
          {"placement_attempts", s.placement_attempts},
          {"image_noise", s.image_noise},
          {"object_color_jitter", s.object_color_jitter},
          {"ground_clutter_points", s.ground_clutter_points},
          {"ground_clutter_max_z", s.ground_clutter_max_z},
          {"lidar_distractors", range_json(s.lidar_distractors)},
          {"distractor", geometry_json(s.distractor)},
          {"distractor_density", s.distractor_density},
          {"lidar_mimics", range_json(s.lidar_mimics)},
          {"image_distractors", range_json(s.image_distractors)}};
}

json dataset_json(const DatasetSpec& d) {
  return {{"count", d.count},
          {"min_objects", d.min_objects},
          {"max_objects", d.max_objects},
          {"scene", scene_json(d.scene)}};
}

json detector_json(const DetectorConfig& c) {
  json anchors = json::array();
  for (const auto& t : c.anchor_templates)
    anchors.push_back({{"width", t.width}, {"length", t.length}, {"height", t.height}});
  const TrainConfig& t = c.train;
  return {{"detection_threshold", c.detection_threshold},
          {"nms_iou_threshold", c.nms_iou_threshold},
          {"rpn_nms_iou_threshold", c.rpn_nms_iou_threshold},
          {"top_n_proposals", c.top_n_proposals},
          {"anchor_stride", c.anchor_stride},
          {"anchor_templates", anchors},
          {"train",
           {{"learning_rate", t.learning_rate},
            {"epochs", t.epochs},
            {"rpn_batch", t.rpn_batch},
            {"rpn_max_positives", t.rpn_max_positives},
            {"stage2_batch", t.stage2_batch},
            {"regression_weight", t.regression_weight},
            {"grad_clip", t.grad_clip}}}};
}

json attack_json(const AttackConfig& a) {
  return {{"max_outer_iterations", a.max_outer_iterations},
          {"inner_steps", a.inner_steps},
          {"step_size", a.step_size},
          {"eps_lo", a.eps_lo},
          {"eps_hi", a.eps_hi},
          {"search_iterations", a.search_iterations},
          {"top_k", a.top_k},
          {"alpha", a.alpha},
          {"success_iou", a.success_iou},
          {"masked", a.masked},
          {"mask_margin", a.mask_margin},
          {"stage", a.stage == AttackStage::stage2 ? "stage2" : "rpn"},
          {"patch_size", a.patch_size},
          {"patch_sweeps", a.patch_sweeps},
          {"patch_inner_steps", a.patch_inner_steps},
          {"patch_step", a.patch_step},
          {"patch_epsilon",
           {{"epsilon0", a.patch_epsilon.epsilon0},
            {"floor", a.patch_epsilon.floor},
            {"decay", a.patch_epsilon.decay}}}};
}

json defense_json(const DefenseSpec& d) {
  json corruptions = json::array();
  for (Corruption c : d.distortion.corruptions) corruptions.push_back(std::string(to_string(c)));
  return {{"kind", std::string(to_string(d.kind))},
          {"corruptions", corruptions},
          {"severities", d.distortion.severities},
          {"adversarial",
           {{"steps", d.adversarial.steps},
            {"step_size", d.adversarial.step_size},
            {"radius", d.adversarial.radius}}},
          {"maxssn_noise", d.maxssn_noise},
          {"maxssn_clean_weight", d.maxssn_clean_weight}};
}

json config_json(const ExperimentConfig& c) {
  json defenses = json::array();
  for (const auto& d : c.defenses) defenses.push_back(defense_json(d));
  const SuiteConfig& s = c.suite;
  return {{"seed", c.seed},
          {"out_dir", c.out_dir},
          {"camera", camera_json(c.detector.camera)},
          {"grid", grid_json(c.detector.grid)},
          {"train_data", dataset_json(c.train_data)},
          {"test_data", dataset_json(c.test_data)},
          {"patch_data", dataset_json(c.patch_data)},
          {"detector", detector_json(c.detector)},
          {"attack", attack_json(s.attack)},
          {"suite",
           {{"targets_per_scene", s.targets_per_scene},
            {"clutter_density", s.clutter_density},
            {"clutter_max_height_m", s.clutter_max_height_m},
            {"spoof_candidates", s.spoof_candidates}}},
          {"defenses", defenses},
          {"defense_scenes", c.defense_scenes},
          {"swap_scenes", c.swap_scenes}};
}

// ---------------------------------------------------------------------------
// Strict reading

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!it->is_number()) throw ConfigError(where(key) + " must be a number");
      } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!it->is_number_integer()) throw ConfigError(where(key) + " must be an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (it->is_number_integer() && !it->is_number_unsigned()) {
            throw ConfigError(where(key) + " must be non-negative");
          }
        }
      }
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  void read(const char* key, Range& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_array() || it->size() != 2 || !(*it)[0].is_number() || !(*it)[1].is_number()) {
      throw ConfigError(where(key) + " must be a [lo, hi] pair of numbers");
    }
    out = {(*it)[0].get<double>(), (*it)[1].get<double>()};
    if (!out.valid()) throw ConfigError(where(key) + " has lo > hi");
  }

  /// Nested object, or nullptr when absent.
  const json* child(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.contains(it.key())) throw ConfigError("unknown config key: " + path(it.key().c_str()));
    }
  }

 private:
  std::string where(const char* key = nullptr) const {
    return "config key '" + (key ? path(key) : (path_.empty() ? std::string("<root>") : path_)) + "'";
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_geometry(const json& j, const std::string& path, ClassGeometry& g) {
  Reader r(j, path);
  r.read("width_m", g.width_m);
  r.read("length_m", g.length_m);
  r.read("height_m", g.height_m);
  r.finish();
}

void read_camera(const json& j, Camera& c) {
  Reader r(j, "camera");
  r.read("image_height", c.image_height);
  r.read("image_width", c.image_width);
  r.read("bev_rows", c.bev_rows);
  r.read("px_per_cell", c.px_per_cell);
  r.read("horizon_row", c.horizon_row);
  r.read("px_per_depth_row", c.px_per_depth_row);
  r.read("px_per_meter", c.px_per_meter);
  r.read("far_scale", c.far_scale);
  r.read("near_scale", c.near_scale);
  r.finish();
}

void read_grid(const json& j, GridSpec& g) {
  Reader r(j, "grid");
  r.read("channels", g.channels);
  r.read("rows", g.rows);
  r.read("cols", g.cols);
  r.read("x_min", g.x_min);
  r.read("x_max", g.x_max);
  r.read("y_min", g.y_min);
  r.read("y_max", g.y_max);
  r.read("z_max", g.z_max);
  r.finish();
}

void read_scene(const json& j, const std::string& path, SceneSpec& s) {
  Reader r(j, path);
  r.read("vehicle_fraction", s.vehicle_fraction);
  if (const json* g = r.child("vehicle")) read_geometry(*g, r.path("vehicle"), s.vehicle);
  if (const json* g = r.child("pedestrian")) read_geometry(*g, r.path("pedestrian"), s.pedestrian);
  r.read("depth_rows", s.depth_rows);
  r.read("lateral_margin_cells", s.lateral_margin_cells);
  r.read("max_image_overlap", s.max_image_overlap);
  r.read("placement_attempts", s.placement_attempts);
  r.read("image_noise", s.image_noise);
  r.read("object_color_jitter", s.object_color_jitter);
  r.read("ground_clutter_points", s.ground_clutter_points);
  r.read("ground_clutter_max_z", s.ground_clutter_max_z);
  r.read("lidar_distractors", s.lidar_distractors);
  if (const json* g = r.child("distractor")) read_geometry(*g, r.path("distractor"), s.distractor);
  r.read("distractor_density", s.distractor_density);
  r.read("lidar_mimics", s.lidar_mimics);
  r.read("image_distractors", s.image_distractors);
  r.finish();
}

void read_dataset(const json& j, const std::string& path, DatasetSpec& d) {
  Reader r(j, path);
  r.read("count", d.count);
  r.read("min_objects", d.min_objects);
  r.read("max_objects", d.max_objects);
  if (const json* s = r.child("scene")) read_scene(*s, r.path("scene"), d.scene);
  r.finish();
  if (d.count < 0 || d.min_objects < 0 || d.max_objects < d.min_objects) {
    throw ConfigError("config key '" + path + "' has invalid counts");
  }
}

void read_detector(const json& j, DetectorConfig& c) {
  Reader r(j, "detector");
  r.read("detection_threshold", c.detection_threshold);
  r.read("nms_iou_threshold", c.nms_iou_threshold);
  r.read("rpn_nms_iou_threshold", c.rpn_nms_iou_threshold);
  r.read("top_n_proposals", c.top_n_proposals);
  r.read("anchor_stride", c.anchor_stride);
  if (const json* a = r.child("anchor_templates")) {
    if (!a->is_array()) throw ConfigError("config key 'detector.anchor_templates' must be an array");
    c.anchor_templates.clear();
    for (std::size_t i = 0; i < a->size(); ++i) {
      Reader t((*a)[i], "detector.anchor_templates[" + std::to_string(i) + "]");
      AnchorTemplate at;
      t.read("width", at.width);
      t.read("length", at.length);
      t.read("height", at.height);
      t.finish();
      c.anchor_templates.push_back(at);
    }
  }
  if (const json* t = r.child("train")) {
    Reader tr(*t, "detector.train");
    tr.read("learning_rate", c.train.learning_rate);
    tr.read("epochs", c.train.epochs);
    tr.read("rpn_batch", c.train.rpn_batch);
    tr.read("rpn_max_positives", c.train.rpn_max_positives);
    tr.read("stage2_batch", c.train.stage2_batch);
    tr.read("regression_weight", c.train.regression_weight);
    tr.read("grad_clip", c.train.grad_clip);
    tr.finish();
  }
  r.finish();
}

void read_attack(const json& j, AttackConfig& a) {
  Reader r(j, "attack");
  r.read("max_outer_iterations", a.max_outer_iterations);
  r.read("inner_steps", a.inner_steps);
  r.read("step_size", a.step_size);
  r.read("eps_lo", a.eps_lo);
  r.read("eps_hi", a.eps_hi);
  r.read("search_iterations", a.search_iterations);
  r.read("top_k", a.top_k);
  r.read("alpha", a.alpha);
  r.read("success_iou", a.success_iou);
  r.read("masked", a.masked);
  r.read("mask_margin", a.mask_margin);
  std::string stage = a.stage == AttackStage::stage2 ? "stage2" : "rpn";
  r.read("stage", stage);
  if (stage == "stage2") {
    a.stage = AttackStage::stage2;
  } else if (stage == "rpn") {
    a.stage = AttackStage::rpn;
  } else {
    throw ConfigError("config key 'attack.stage' must be \"stage2\" or \"rpn\"");
  }
  r.read("patch_size", a.patch_size);
  r.read("patch_sweeps", a.patch_sweeps);
  r.read("patch_inner_steps", a.patch_inner_steps);
  r.read("patch_step", a.patch_step);
  if (const json* e = r.child("patch_epsilon")) {
    Reader er(*e, "attack.patch_epsilon");
    er.read("epsilon0", a.patch_epsilon.epsilon0);
    er.read("floor", a.patch_epsilon.floor);
    er.read("decay", a.patch_epsilon.decay);
    er.finish();
  }
  r.finish();
}

DefenseSpec read_defense(const json& j, const std::string& path) {
  Reader r(j, path);
  DefenseSpec d;
  std::string kind = std::string(to_string(d.kind));
  r.read("kind", kind);
  d.kind = parse_defense_kind(kind);
  if (const json* c = r.child("corruptions")) {
    if (!c->is_array()) throw ConfigError("config key '" + path + ".corruptions' must be an array");
    d.distortion.corruptions.clear();
    for (const auto& name : *c) {
      if (!name.is_string()) throw ConfigError("config key '" + path + ".corruptions' must hold names");
      d.distortion.corruptions.push_back(parse_corruption(name.get<std::string>()));
    }
  }
  r.read("severities", d.distortion.severities);
  for (int s : d.distortion.severities) {
    if (s < 0 || s > 5) throw ConfigError("config key '" + path + ".severities' must be in 0..5");
  }
  if (const json* a = r.child("adversarial")) {
    Reader ar(*a, path + ".adversarial");
    ar.read("steps", d.adversarial.steps);
    ar.read("step_size", d.adversarial.step_size);
    ar.read("radius", d.adversarial.radius);
    ar.finish();
  }
  r.read("maxssn_noise", d.maxssn_noise);
  r.read("maxssn_clean_weight", d.maxssn_clean_weight);
  r.finish();
  return d;
}

}  // namespace

std::string to_canonical_json(const ExperimentConfig& config) { return config_json(config).dump(); }

ExperimentConfig parse_experiment_config(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Reader r(j, "");
  r.read("seed", c.seed);
  r.read("out_dir", c.out_dir);
  if (const json* x = r.child("camera")) read_camera(*x, c.detector.camera);
  if (const json* x = r.child("grid")) read_grid(*x, c.detector.grid);
  if (const json* x = r.child("train_data")) read_dataset(*x, "train_data", c.train_data);
  if (const json* x = r.child("test_data")) read_dataset(*x, "test_data", c.test_data);
  if (const json* x = r.child("patch_data")) read_dataset(*x, "patch_data", c.patch_data);
  if (const json* x = r.child("detector")) read_detector(*x, c.detector);
  if (const json* x = r.child("attack")) read_attack(*x, c.suite.attack);
  if (const json* x = r.child("suite")) {
    Reader sr(*x, "suite");
    sr.read("targets_per_scene", c.suite.targets_per_scene);
    sr.read("clutter_density", c.suite.clutter_density);
    sr.read("clutter_max_height_m", c.suite.clutter_max_height_m);
    sr.read("spoof_candidates", c.suite.spoof_candidates);
    sr.finish();
  }
  if (const json* x = r.child("defenses")) {
    if (!x->is_array()) throw ConfigError("config key 'defenses' must be an array");
    c.defenses.clear();
    for (std::size_t i = 0; i < x->size(); ++i)
      c.defenses.push_back(read_defense((*x)[i], "defenses[" + std::to_string(i) + "]"));
  }
  r.read("defense_scenes", c.defense_scenes);
  r.read("swap_scenes", c.swap_scenes);
  r.finish();

  try {
    c.detector.validate();
    c.suite.attack.validate();
    for (const DatasetSpec* d : {&c.train_data, &c.test_data, &c.patch_data}) {
      SceneSpec s = d->scene;
      s.camera = c.detector.camera;
      s.grid = c.detector.grid;
      s.validate();
    }
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  if (c.defense_scenes < 1 || c.swap_scenes < 2) {
    throw ConfigError("defense_scenes must be >= 1 and swap_scenes >= 2");
  }
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const ExperimentConfig& config) {
  // The output location does not change results, so it stays out of the hash.
  json j = config_json(config);
  j.erase("out_dir");
  return fnv1a_hex(j.dump());
}

}  // namespace fusionbench
