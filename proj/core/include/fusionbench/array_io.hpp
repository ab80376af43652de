#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fusionbench/tensor.hpp"

namespace fusionbench {

/// Named float32 array with its shape.
struct NamedArray {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> values;

  bool operator==(const NamedArray&) const = default;
};

/// Little-endian container used for datasets, checkpoints, perturbations and patches.
///
///   offset 0   char[4]  magic ("FBDS" dataset, "FBCK" checkpoint, "FBPT" perturbation/patch)
///   offset 4   u32      format version (1)
///   offset 8   u32      array count N
///   N times:   u32 name length, name bytes (UTF-8),
///              u32 rank, u32 dims[rank],
///              f32 values[prod(dims)] in row-major order
///   then       u32 metadata length, metadata bytes (JSON text)
///   then       char[4]  "FEND"
struct ArrayFile {
  std::array<char, 4> magic{};
  std::uint32_t version = 1;
  std::vector<NamedArray> arrays;
  std::string metadata;

  const NamedArray& get(const std::string& name) const;

  bool operator==(const ArrayFile&) const = default;
};

inline constexpr std::array<char, 4> kDatasetMagic{'F', 'B', 'D', 'S'};
inline constexpr std::array<char, 4> kCheckpointMagic{'F', 'B', 'C', 'K'};
inline constexpr std::array<char, 4> kPerturbationMagic{'F', 'B', 'P', 'T'};
inline constexpr std::uint32_t kArrayFormatVersion = 1;

std::vector<std::uint8_t> encode_array_file(const ArrayFile& file);

/// Throws FormatError (with byte offset) on bad magic, unsupported version or truncation.
ArrayFile decode_array_file(std::span<const std::uint8_t> bytes,
                            const std::array<char, 4>& expected_magic);

void write_array_file(const std::filesystem::path& path, const ArrayFile& file);
ArrayFile read_array_file(const std::filesystem::path& path,
                          const std::array<char, 4>& expected_magic);

NamedArray to_named_array(const std::string& name, const Tensor& t);
/// Rank-3 arrays only.
Tensor to_tensor(const NamedArray& a);

}  // namespace fusionbench
