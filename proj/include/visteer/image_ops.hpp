#pragma once

#include <cstddef>
#include <vector>

#include "visteer/tensor.hpp"

namespace visteer {

// Value-level image kernels behind the dct2d / idct2d / resize_bilinear
// primitives. Images are [H, W, C] row-major with interleaved channels.

// Orthonormal DCT-II basis: row k, column n.
const Tensor& dct_matrix(std::size_t n);

Tensor dct2d_values(const Tensor& image);
Tensor idct2d_values(const Tensor& spectrum);

// Source taps for one output coordinate under the half-pixel-centers convention:
// src = (dst + 0.5) * in / out - 0.5, clamped to [0, in - 1].
struct ResizeTap {
    std::size_t lo = 0;
    std::size_t hi = 0;
    double frac = 0.0;  // weight of hi
};

std::vector<ResizeTap> resize_taps(std::size_t in, std::size_t out);

Tensor resize_bilinear_values(const Tensor& image, std::size_t height, std::size_t width);
// Adjoint of the resize: scatters an output-shaped gradient back onto the input grid.
Tensor resize_bilinear_adjoint(const Tensor& grad_out, std::size_t in_height, std::size_t in_width);

void require_image(const Tensor& t, const char* op);

}  // namespace visteer
