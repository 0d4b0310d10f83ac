#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace cicf {

/// Seeded random stream with platform-independent output.
///
/// Wraps std::mt19937_64 (whose sequence is fixed by the standard) and
/// derives uniforms/normals/integers with explicit formulas instead of the
/// implementation-defined std:: distributions, so runs are reproducible
/// across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), rejection-sampled (no modulo bias).
  std::uint64_t below(std::uint64_t n);

  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

  /// k distinct values from [0, n) in draw order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  /// k distinct elements of `pool` in draw order.
  std::vector<std::size_t> sample_from(const std::vector<std::size_t>& pool, std::size_t k);

 private:
  std::mt19937_64 engine_;
};

/// Deterministic stream splitting: the seed of child stream `index` of
/// `master`. Two rounds of SplitMix64 finalization over (master, index).
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

}  // namespace cicf
