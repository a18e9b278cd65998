// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <random>

#include "blockverify/types.hpp"

namespace blockverify {

/// Default random stream. Every randomized operation takes one explicitly.
using Rng = std::mt19937_64;

template <typename G>
concept Random64 = std::uniform_random_bit_generator<G> && (G::min() == 0) &&
                   (G::max() == std::numeric_limits<std::uint64_t>::max());

/// Uniform double in (0, 1] on a 2^-53 grid.
///
/// Acceptance tests are written `eta <= ratio`; excluding 0 means a ratio of
/// exactly 0 never accepts and a ratio of exactly 1 always does.
template <Random64 G>
double uniform01(G& gen) {
  return static_cast<double>((gen() >> 11) + 1) * 0x1.0p-53;
}

/// splitmix64 finalizer.
inline constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Child seed for stream `index` of `seed`. Independent of how streams are scheduled.
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return mix64(mix64(seed) ^ mix64(index + 0x632be59bd9b4e019ULL));
}

inline Rng make_rng(std::uint64_t seed) { return Rng(mix64(seed)); }

/// Inverse-CDF draw. Never returns a zero-mass token.
template <Random64 G>
Token sample_index(const ProbVector& row, G& gen) {
  const double u = uniform01(gen);
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (row[i] <= 0.0) continue;
    last_positive = i;
    acc += row[i];
    if (u <= acc) return static_cast<Token>(i);
  }
  return static_cast<Token>(last_positive);
}

}  // namespace blockverify
