#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fusionbench {

/// Caller passed something that violates an operation's precondition.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Bad or inconsistent configuration (unknown keys, unknown modes, missing rows).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A SceneSpec whose objects cannot be placed under the overlap bound.
class InfeasibleSpecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Corrupt or truncated binary file. Carries the byte offset where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Training produced a non-finite loss.
class TrainingDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The attack fails even at the most permissive distortion weight.
class UnattackableError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Spoof target refused before optimization (no LIDAR support, or it covers a real object).
class SpoofTargetRejected : public InputError {
 public:
  using InputError::InputError;
};

}  // namespace fusionbench
