#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace trup {

// Portable draws on top of mt19937_64. The standard distributions are
// implementation-defined, which would make seeds non-reproducible across
// standard libraries.

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Uniform integer in [0, n).
inline uint64_t uniform_index(std::mt19937_64& rng, uint64_t n) {
  auto k = static_cast<uint64_t>(uniform01(rng) * static_cast<double>(n));
  return k < n ? k : n - 1;
}

/// Standard normal via Box-Muller (one draw per pair of uniforms).
inline double normal01(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  double u2 = uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Per-item seed derived from a base seed and an item id, independent of
/// processing order.
inline uint64_t derive_seed(uint64_t seed, std::string_view id) {
  uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : id) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(seed ^ splitmix64(h));
}

inline uint64_t derive_seed(uint64_t seed, uint64_t index) { return splitmix64(seed ^ splitmix64(index + 1)); }

}  // namespace trup
