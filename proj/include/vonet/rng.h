#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace vonet {

// Deterministic RNG. All distributions are derived from raw mt19937_64
// output by hand so streams are reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    return static_cast<int>(gen_() % static_cast<uint64_t>(n));
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Gumbel(0, 1).
  double gumbel() {
    double u = uniform();
    return -std::log(-std::log(u + 1e-20) + 1e-20);
  }

  template <class It>
  void fill_normal(It begin, It end) {
    for (auto it = begin; it != end; ++it) *it = normal();
  }

  // Derives an independent stream; mixes the key so nearby ids decorrelate.
  Rng fork(uint64_t key) {
    uint64_t x = gen_() ^ (key * 0x9E3779B97F4A7C15ull);
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBull;
    x ^= x >> 31;
    return Rng(x);
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vonet
