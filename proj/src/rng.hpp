// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>

namespace d2lora {

/// Deterministic random source used for every draw in the library.
///
/// The bit stream is std::mt19937_64 seeded with a single 64-bit value, which
/// is fully specified by the C++ standard (the 10000th output for the default
/// seed is pinned there), so any MT19937-64 implementation reproduces it.
/// Derived quantities are computed by hand rather than through
/// std::*_distribution, whose algorithms are implementation-defined:
///
///   uniform()  = (next() >> 11) * 2^-53                       in [0, 1)
///   normal()   = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)            two uniforms per
///                                                              draw, no caching
///   bernoulli_keep(p) = uniform() >= p
///
/// Independent streams for one logical seed are obtained with derive_seed().
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  double uniform();
  double normal();
  double normal(double std) { return std * normal(); }
  bool bernoulli_keep(double drop_p) { return uniform() >= drop_p; }
  /// Uniform integer in [0, n) by multiply-shift on the top 53 bits.
  std::size_t below(std::size_t n);

  bool operator==(const Rng&) const = default;

 private:
  std::mt19937_64 engine_;
};

/// splitmix64 finalizer over (seed, stream); used to fan one seed out into
/// non-overlapping named streams.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kDropout = 2;
inline constexpr std::uint64_t kShuffle = 3;
inline constexpr std::uint64_t kData = 4;
inline constexpr std::uint64_t kTeacher = 5;
inline constexpr std::uint64_t kModule = 16;  // + module index
}  // namespace streams

}  // namespace d2lora
