#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace stochca {

using Rng = std::mt19937_64;

/// Independent generator for a (seed, stream...) key.
inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream = {}) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  for (auto s : stream) {
    words.push_back(static_cast<std::uint32_t>(s));
    words.push_back(static_cast<std::uint32_t>(s >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

/// Normal draw with rejection outside +-2 standard deviations.
inline double truncated_normal(Rng& rng, double stddev) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    const double z = normal(rng);
    if (z >= -2.0 && z <= 2.0) return z * stddev;
  }
}

}  // namespace stochca
