#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace ctnet {

// Deterministic random source.
//
// The integer stream comes from std::mt19937_64, whose output sequence is fixed
// by the C++ standard, so a seed yields the same integers on every platform.
// Real-valued draws are derived here rather than through <random> distributions,
// whose algorithms are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n); rejection sampling removes modulo bias.
  std::uint64_t below(std::uint64_t n);

  // Standard normal via the Box-Muller transform (one value per call, no caching).
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

  // SplitMix64-style hash of a seed and a key path; used to derive independent
  // per-sample, per-epoch and per-fold generators.
  static std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> keys);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

// 64-bit FNV-1a; stable across platforms, unlike std::hash.
std::uint64_t hash_string(std::string_view s);

}  // namespace ctnet
