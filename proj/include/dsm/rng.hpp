#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace dsm {

// splitmix64 step; used to derive independent streams from one base seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// mt19937_64 with hand-rolled distributions. The standard pins the engine's
// output exactly but not the library distributions, and identical seeds must
// reproduce identical corpora and weights everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n) without modulo bias.
  std::uint64_t uniform_int(std::uint64_t n) {
    std::uint64_t threshold = (0ULL - n) % n;
    for (;;) {
      std::uint64_t x = engine_();
      if (x >= threshold) return x % n;
    }
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; the pair's second value is discarded to keep call sequences
  // easy to reason about.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Resamples until the standard draw lands within two standard deviations.
  double truncated_normal(double stddev) {
    for (;;) {
      double z = normal();
      if (z >= -2.0 && z <= 2.0) return z * stddev;
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace dsm
