#pragma once

#include <cstdint>

namespace evrb {

// SplitMix64 (Steele, Lea, Flood 2014). Used for every random draw in the
// toy model so that the full weight set is a pure function of the seed.
// Substreams are derived by mixing a stream tag into the base seed, giving
// a fixed layout: embeddings first, then per-layer weights, then scenes.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();

  // Uniform in [0, 1).
  double next_uniform();

  // Standard normal via Box-Muller; draws two uniforms per pair.
  double next_normal();

  // Derived generator for an independent substream.
  SplitMix64 substream(std::uint64_t tag) const;

 private:
  std::uint64_t state_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace evrb
