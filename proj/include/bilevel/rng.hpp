#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace bilevel {

// splitmix64; used to derive independent stream seeds from (seed, index) pairs
// so request order can never change sampled values.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t hash_str(uint64_t seed, const char* s) {
  uint64_t h = seed ^ 0xcbf29ce484222325ULL;
  for (; *s; ++s) h = (h ^ static_cast<uint64_t>(*s)) * 0x100000001b3ULL;
  return h;
}

// Deterministic RNG wrapper. Gaussian draws use Box-Muller on fixed 53-bit
// uniforms instead of std::normal_distribution, whose sequence is
// implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  double uniform() {  // [0, 1)
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double gaussian() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // [0, n)
  uint64_t next_index(uint64_t n) { return eng_() % n; }

  uint64_t raw() { return eng_(); }

 private:
  std::mt19937_64 eng_;
};

}  // namespace bilevel
