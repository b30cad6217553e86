#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace ralm {

// Seeded generator with platform-independent output.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the
// standard. The distribution transforms below are written out explicitly
// because the std:: distributions are implementation-defined:
//   uniform_int(lo, hi)  rejection sampling on the top of the 64-bit range
//   uniform01()          53 high bits scaled by 2^-53
//   normal()             Box-Muller, one variate per call (no caching)
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform integer in the closed range [lo, hi].
  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi) {
    const std::uint64_t span = hi - lo;
    if (span == UINT64_MAX) return next_u64();
    const std::uint64_t range = span + 1;
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % range + 1) % range;
    std::uint64_t x = next_u64();
    while (x > limit) x = next_u64();
    return lo + x % range;
  }

  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double normal() {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ralm
