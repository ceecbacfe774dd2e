#pragma once

#include <cstdint>
#include <random>

namespace bincmp {

using Rng = std::mt19937_64;

/// One step of the splitmix64 generator.
inline std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Seed for stream `index` of a run seeded with `seed`.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t x = seed;
  splitmix64(x);
  x ^= 0xD1B54A32D192ED03ULL * (index + 1);
  return splitmix64(x);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t index) { return Rng(derive_seed(seed, index)); }

}  // namespace bincmp
