#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "bevuda/numerics/tensor.hpp"

namespace bevuda::numerics {

/// Deterministically combine a seed with a stream identifier.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);
/// Stream identifier derived from a short tag ("mc", "fog", ...).
std::uint64_t stream_id(std::string_view tag);

/// Seedable random stream, passed explicitly by the caller.
///
/// Child streams are derived from the seed alone (not from the engine
/// state), so `Rng(s).stream(k)` is the same sequence no matter how much of
/// the parent has been consumed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  Rng stream(std::uint64_t id) const { return Rng(mix_seed(seed_, id)); }
  Rng stream(std::string_view tag) const { return stream(stream_id(tag)); }

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  /// Integer in [0, n).
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * n) % n; }
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// 1/(1-rate), so the expectation of every entry is 1. Requires 0 <= rate < 1.
Tensor dropout_mask(const Shape& shape, double rate, std::uint64_t seed);

}  // namespace bevuda::numerics
