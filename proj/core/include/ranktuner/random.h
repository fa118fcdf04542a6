#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace ranktuner {

// 64-bit FNV-1a; stable across platforms, used to derive named streams.
std::uint64_t fnv1a(std::string_view s);

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

// Deterministic random stream. Every consumer derives its own stream from
// (seed, name) so that adding or reshaping one consumer never shifts another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}
  Rng(std::uint64_t seed, std::string_view stream)
      : engine_(mix64(seed ^ mix64(fnv1a(stream)))) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n), n >= 1. Rejection sampling keeps it unbiased.
  std::size_t below(std::size_t n);
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ranktuner
