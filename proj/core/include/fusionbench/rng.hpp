#pragma once

#include <cstdint>
#include <random>

namespace fusionbench {

/// Portable random source.
///
/// The standard distributions are implementation-defined, so every
/// conversion from raw engine output is done here by hand. Identical seeds
/// give identical streams on every conforming platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] (inclusive).
  int uniform_int(int lo, int hi);

  /// Standard normal via Box-Muller.
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Poisson draw; exact inversion for small rates, rounded normal above 64.
  int poisson(double rate);

  bool bernoulli(double p) { return uniform() < p; }

  /// Independent child stream keyed by `stream`.
  Rng fork(std::uint64_t stream) const;

  /// Seed of a derived stream, usable to construct child generators later.
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream);

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fusionbench
