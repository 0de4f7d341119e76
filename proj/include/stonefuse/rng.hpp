#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace stonefuse {

using Rng = std::mt19937_64;

// Derives an independent stream seed from a base seed and a tag, so parallel
// per-image work draws the same numbers regardless of scheduling order.
inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 1099511628211ull;
  }
  h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  h ^= h >> 33;
  h *= 0xff51afd7ed558ccdull;
  h ^= h >> 33;
  h *= 0xc4ceb9fe1a85ec53ull;
  h ^= h >> 33;
  return h;
}

}  // namespace stonefuse
