#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fusionbench/scene.hpp"

namespace fusionbench {

/// Provenance fields embedded in every persisted artifact.
struct Provenance {
  std::string config_hash;
  std::uint64_t seed = 0;

  bool operator==(const Provenance&) const = default;
};

/// Writes scenes to the "FBDS" array container: arrays "scene/<k>/image"
/// (3 x H x W) and "scene/<k>/bev" (C_b x H_b x W_b), then a JSON metadata
/// block with scene ids, seeds, ground truth and provenance.
void save_dataset(const std::vector<Scene>& scenes, const std::filesystem::path& path,
                  const Provenance& provenance = {});

/// Inverse of save_dataset; bit-exact. Throws FormatError on corrupt files.
std::vector<Scene> load_dataset(const std::filesystem::path& path,
                                Provenance* provenance = nullptr);

}  // namespace fusionbench
