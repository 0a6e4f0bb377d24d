#pragma once

#include <cmath>
#include <cstdint>

namespace elastic {

// Deterministic counter-based generator (splitmix64). The same seed and the
// same call sequence produce the same stream on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (two uniforms per call, no caching, so the
  // call sequence stays trivially reproducible).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double gumbel() {
    double u = uniform();
    if (u < 1e-300) u = 1e-300;
    return -std::log(-std::log(u));
  }

  // Derives an independent stream from a base seed and stream identifiers.
  static uint64_t derive(uint64_t seed, uint64_t a, uint64_t b = 0,
                         uint64_t c = 0) {
    Rng h(seed ^ (a * 0x9e3779b97f4a7c15ull) ^ (b * 0xc2b2ae3d27d4eb4full) ^
          (c * 0x165667b19e3779f9ull));
    return h.next_u64();
  }

 private:
  uint64_t state_;
};

}  // namespace elastic
