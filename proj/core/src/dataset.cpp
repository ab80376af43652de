#include "fusionbench/dataset.hpp"

#include <nlohmann/json.hpp>

#include "fusionbench/array_io.hpp"
#include "fusionbench/errors.hpp"

namespace fusionbench {

namespace {

using nlohmann::json;

json box_json(const Box2& b) { return json::array({b.x0, b.y0, b.x1, b.y1}); }

Box2 box_from(const json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(),
          j.at(3).get<double>()};
}

}  // namespace

void save_dataset(const std::vector<Scene>& scenes, const std::filesystem::path& path,
                  const Provenance& provenance) {
  ArrayFile file;
  file.magic = kDatasetMagic;
  json meta;
  meta["format"] = "fusionbench-dataset";
  meta["scene_count"] = scenes.size();
  meta["config_hash"] = provenance.config_hash;
  meta["seed"] = provenance.seed;
  json list = json::array();
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    const Scene& s = scenes[k];
    file.arrays.push_back(to_named_array("scene/" + std::to_string(k) + "/image", s.image));
    file.arrays.push_back(to_named_array("scene/" + std::to_string(k) + "/bev", s.bev));
    json objs = json::array();
    for (const auto& o : s.objects) {
      objs.push_back({{"class_id", o.class_id},
                      {"image_box", box_json(o.image_box)},
                      {"bev_box", box_json(o.bev_box)},
                      {"height_m", o.height_m},
                      {"patchable_region",
                       {o.patchable_region.x, o.patchable_region.y, o.patchable_region.w,
                        o.patchable_region.h}}});
    }
    list.push_back({{"scene_id", s.scene_id}, {"seed", s.seed}, {"objects", objs}});
  }
  meta["scenes"] = list;
  file.metadata = meta.dump();
  write_array_file(path, file);
}

std::vector<Scene> load_dataset(const std::filesystem::path& path, Provenance* provenance) {
  const ArrayFile file = read_array_file(path, kDatasetMagic);
  json meta;
  try {
    meta = json::parse(file.metadata);
  } catch (const json::exception& e) {
    throw FormatError(std::string("dataset metadata is not valid JSON: ") + e.what(), 0);
  }
  std::vector<Scene> scenes;
  try {
    const auto& list = meta.at("scenes");
    if (file.arrays.size() != 2 * list.size()) {
      throw FormatError("dataset array count does not match scene count", 8);
    }
    for (std::size_t k = 0; k < list.size(); ++k) {
      const auto& js = list[k];
      Scene s;
      s.scene_id = js.at("scene_id").get<std::string>();
      s.seed = js.at("seed").get<std::uint64_t>();
      s.image = to_tensor(file.arrays[2 * k]);
      s.bev = to_tensor(file.arrays[2 * k + 1]);
      for (const auto& jo : js.at("objects")) {
        GroundTruthObject o;
        o.class_id = jo.at("class_id").get<int>();
        o.image_box = box_from(jo.at("image_box"));
        o.bev_box = box_from(jo.at("bev_box"));
        o.height_m = jo.at("height_m").get<double>();
        const auto& pr = jo.at("patchable_region");
        o.patchable_region = {pr.at(0).get<int>(), pr.at(1).get<int>(), pr.at(2).get<int>(),
                              pr.at(3).get<int>()};
        s.objects.push_back(o);
      }
      scenes.push_back(std::move(s));
    }
    if (provenance) {
      provenance->config_hash = meta.value("config_hash", std::string{});
      provenance->seed = meta.value("seed", std::uint64_t{0});
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("dataset metadata malformed: ") + e.what(), 0);
  }
  return scenes;
}

}  // namespace fusionbench
