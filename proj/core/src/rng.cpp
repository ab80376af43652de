#include "fusionbench/rng.hpp"

#include <cmath>
#include <numbers>

namespace fusionbench {

int Rng::uniform_int(int lo, int hi) {
  if (hi <= lo) return lo;
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  const std::uint64_t limit = (~std::uint64_t{0} / span) * span;
  std::uint64_t draw = engine_();
  while (draw >= limit) draw = engine_();
  return lo + static_cast<int>(draw % span);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

int Rng::poisson(double rate) {
  if (rate <= 0.0) return 0;
  if (rate > 64.0) {
    const double draw = std::round(normal(rate, std::sqrt(rate)));
    return draw < 0.0 ? 0 : static_cast<int>(draw);
  }
  // Inversion by sequential search.
  const double u = uniform();
  double p = std::exp(-rate);
  double cumulative = p;
  int k = 0;
  while (u > cumulative && k < 1000) {
    ++k;
    p *= rate / k;
    cumulative += p;
  }
  return k;
}

std::uint64_t Rng::mix(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined key.
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Rng Rng::fork(std::uint64_t stream) const { return Rng(mix(seed_, stream)); }

}  // namespace fusionbench
