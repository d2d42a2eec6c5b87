#include "evrb/rng.hpp"

#include <cmath>

namespace evrb {

namespace {
inline std::uint64_t mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}
}  // namespace

std::uint64_t SplitMix64::next_u64() {
  state_ += 0x9E3779B97F4A7C15ULL;
  return mix(state_);
}

double SplitMix64::next_uniform() {
  // 53 mantissa bits.
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SplitMix64::next_normal() {
  if (have_cached_) {
    have_cached_ = false;
    return cached_;
  }
  double u1 = next_uniform();
  double u2 = next_uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  cached_ = r * std::sin(theta);
  have_cached_ = true;
  return r * std::cos(theta);
}

SplitMix64 SplitMix64::substream(std::uint64_t tag) const {
  return SplitMix64(mix(state_ ^ (0xA0761D6478BD642FULL * (tag + 1))));
}

}  // namespace evrb
