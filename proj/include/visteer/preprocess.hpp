#pragma once

#include <array>
#include <cstddef>

#include "visteer/graph.hpp"

namespace visteer {

// Per-model input pipeline: bilinear resize to the model resolution, then
// per-channel (x - mean) / std.
struct PreprocessSpec {
    std::size_t input_height = 64;
    std::size_t input_width = 64;
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> std{1.0, 1.0, 1.0};

    void validate() const;
    bool operator==(const PreprocessSpec&) const = default;
};

// Canonical resolution of the optimized image.
inline constexpr std::size_t kCanonicalSize = 64;

Var preprocess(Var image, const PreprocessSpec& spec);

}  // namespace visteer
