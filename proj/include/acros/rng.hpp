#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace acros {

// Counter-based generator: every draw is a pure hash of (seed, counter), so a
// stream can be replayed from the seed alone and split into independent
// substreams by label. Identical seed + identical call sequence gives
// identical output on every platform.
class RngState {
 public:
  static constexpr std::string_view kAlgorithm = "splitmix64-counter-v1";

  RngState() = default;
  explicit RngState(uint64_t seed) : seed_(seed) {}

  uint64_t seed() const { return seed_; }
  uint64_t counter() const { return counter_; }

  uint64_t next_u64() { return mix(seed_, counter_++); }

  // [0, 1) with 53 random bits.
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; draws two uniforms per call, no cached
  // spare, so the call sequence fully determines the stream.
  double next_normal() {
    double u1 = next_uniform();
    double u2 = next_uniform();
    // Guard log(0).
    u1 = 1.0 - u1;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Unbiased integer in [0, n) by rejection.
  uint64_t next_below(uint64_t n) {
    if (n <= 1) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  // Independent substream for a named stage. Splitting does not advance the
  // parent counter, so stages can be rerun in isolation.
  RngState split(std::string_view label) const {
    return RngState(mix(seed_, fnv1a(label)));
  }

  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  static uint64_t fnv1a(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (char c : s) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    return h;
  }

 private:
  uint64_t seed_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace acros
