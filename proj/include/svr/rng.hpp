#pragma once

#include <cmath>
#include <cstdint>

namespace svr {

/// Counter-based deterministic generator: each output is SplitMix64 applied
/// to (seed, counter), so streams are reproducible across platforms and can
/// be derived per sub-task by re-keying.
class CounterRng {
 public:
  explicit CounterRng(uint64_t seed) : seed_(seed) {}

  /// Derived generator for an independent sub-stream.
  CounterRng derive(uint64_t stream) const {
    return CounterRng(mix(seed_ ^ mix(stream + 0x9e3779b97f4a7c15ULL)));
  }

  uint64_t next_u64() { return mix(seed_ + (++counter_) * 0x9e3779b97f4a7c15ULL); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
  }

  /// Box-Muller; consumes two uniforms per pair, caches the second draw.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_cached_) {
      has_cached_ = false;
      return mean + stddev * cached_;
    }
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return mean + stddev * r * std::cos(theta);
  }

 private:
  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }

  uint64_t seed_;
  uint64_t counter_ = 0;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace svr
