#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace visteer {

using Rng = std::mt19937_64;

// Derives an independent stream seed from a base seed and a tag.
std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag);

inline Rng make_rng(std::uint64_t seed, std::string_view tag = {}) { return Rng(mix_seed(seed, tag)); }

}  // namespace visteer
