#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>

namespace stableflow {

/// Seedable generator whose draws are identical on every platform.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. The std distributions are not, so the conversions to reals and
/// bounded integers are done here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; one draw per call, the pair's second half is discarded.
  double normal();

  /// Uniform integer in [0, bound), rejection-sampled so it is unbiased.
  std::size_t below(std::size_t bound);

  void shuffle(std::span<std::size_t> items);

 private:
  std::mt19937_64 engine_;
};

}  // namespace stableflow
