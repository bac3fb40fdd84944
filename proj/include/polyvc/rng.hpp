#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "polyvc/common.hpp"

namespace polyvc {

/// Deterministic RNG wrapper. Distribution sampling is hand-rolled so the
/// produced streams depend only on the seed, not on the standard library's
/// distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; draws two uniforms per sample.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Inclusive range.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(engine_() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

/// Stable derived seed for independent per-step or per-item streams.
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0) {
  uint8_t buf[24];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<uint8_t>(base >> (8 * i));
  for (int i = 0; i < 8; ++i) buf[8 + i] = static_cast<uint8_t>(a >> (8 * i));
  for (int i = 0; i < 8; ++i) buf[16 + i] = static_cast<uint8_t>(b >> (8 * i));
  return fnv1a64(buf, sizeof(buf));
}

}  // namespace polyvc
