// SPDX-License-Identifier: Apache-2.0
// Seed derivation helpers. Every random stream in the engine is an
// mt19937_64 seeded from a splitmix64 mix of (run seed, purpose, index).
#ifndef CTCD_RNG_HPP
#define CTCD_RNG_HPP

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace ctcd {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t mixSeed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x6A09E667F3BCC908ULL;
  for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p));
  return h;
}

constexpr std::uint64_t tagHash(std::string_view tag) {
  std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
  for (char c : tag) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001B3ULL;
  return h;
}

constexpr std::uint64_t mixSeed(std::uint64_t seed, std::string_view tag) { return mixSeed({seed, tagHash(tag)}); }

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) from the top 53 bits.
inline double uniform01(Rng &rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Uniform integer in [0, n).
inline std::uint64_t uniformIndex(Rng &rng, std::uint64_t n) { return static_cast<std::uint64_t>(uniform01(rng) * n); }

}  // namespace ctcd

#endif  // CTCD_RNG_HPP
