#include "visteer/image_ops.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <string>

namespace visteer {

void require_image(const Tensor& t, const char* op) {
    if (t.rank() != 3 || t.dim(2) != 3) {
        throw ShapeError(std::string(op) + ": expected an H x W x 3 image, got " +
                         shape_str(t.shape()));
    }
}

const Tensor& dct_matrix(std::size_t n) {
    static std::mutex mu;
    static std::map<std::size_t, Tensor> cache;
    std::lock_guard lock(mu);
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;

    Tensor m({n, n});
    const double nd = static_cast<double>(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double a = k == 0 ? std::sqrt(1.0 / nd) : std::sqrt(2.0 / nd);
        for (std::size_t i = 0; i < n; ++i) {
            m.at(k, i) = a * std::cos(std::numbers::pi * (2.0 * static_cast<double>(i) + 1.0) *
                                      static_cast<double>(k) / (2.0 * nd));
        }
    }
    return cache.emplace(n, std::move(m)).first->second;
}

namespace {

// out[a, b, c] = sum_{h, w} L(a, h) x[h, w, c] R(b, w), where L/R are the DCT
// basis or its transpose.
Tensor separable(const Tensor& x, bool inverse) {
    const std::size_t H = x.dim(0);
    const std::size_t W = x.dim(1);
    const std::size_t C = x.dim(2);
    const Tensor& dh = dct_matrix(H);
    const Tensor& dw = dct_matrix(W);
    auto lh = [&](std::size_t a, std::size_t h) { return inverse ? dh.at(h, a) : dh.at(a, h); };
    auto rw = [&](std::size_t b, std::size_t w) { return inverse ? dw.at(w, b) : dw.at(b, w); };

    // Rows first: tmp[a, w, c] = sum_h L(a, h) x[h, w, c]
    Tensor tmp({H, W, C});
    for (std::size_t a = 0; a < H; ++a) {
        double* t = &tmp.at(a, 0, 0);
        for (std::size_t h = 0; h < H; ++h) {
            const double l = lh(a, h);
            const double* src = x.data().data() + h * W * C;
            for (std::size_t j = 0; j < W * C; ++j) t[j] += l * src[j];
        }
    }
    Tensor out({H, W, C});
    for (std::size_t a = 0; a < H; ++a) {
        for (std::size_t b = 0; b < W; ++b) {
            double acc[3] = {0.0, 0.0, 0.0};
            for (std::size_t w = 0; w < W; ++w) {
                const double r = rw(b, w);
                for (std::size_t c = 0; c < C; ++c) acc[c] += r * tmp.at(a, w, c);
            }
            for (std::size_t c = 0; c < C; ++c) out.at(a, b, c) = acc[c];
        }
    }
    return out;
}

}  // namespace

Tensor dct2d_values(const Tensor& image) {
    require_image(image, "dct2d");
    return separable(image, false);
}

Tensor idct2d_values(const Tensor& spectrum) {
    require_image(spectrum, "idct2d");
    return separable(spectrum, true);
}

std::vector<ResizeTap> resize_taps(std::size_t in, std::size_t out) {
    std::vector<ResizeTap> taps(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    const double top = static_cast<double>(in - 1);
    for (std::size_t i = 0; i < out; ++i) {
        double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
        src = std::clamp(src, 0.0, top);
        const double fl = std::floor(src);
        taps[i].lo = static_cast<std::size_t>(fl);
        taps[i].hi = std::min(taps[i].lo + 1, in - 1);
        taps[i].frac = src - fl;
    }
    return taps;
}

Tensor resize_bilinear_values(const Tensor& image, std::size_t height, std::size_t width) {
    require_image(image, "resize_bilinear");
    if (height == 0 || width == 0) {
        throw ShapeError("resize_bilinear: target size " + std::to_string(height) + "x" +
                         std::to_string(width) + " has a zero dimension");
    }
    const std::size_t H = image.dim(0);
    const std::size_t W = image.dim(1);
    if (H == height && W == width) return image;
    const auto ty = resize_taps(H, height);
    const auto tx = resize_taps(W, width);
    Tensor out({height, width, 3});
    for (std::size_t y = 0; y < height; ++y) {
        const auto& vy = ty[y];
        for (std::size_t x = 0; x < width; ++x) {
            const auto& vx = tx[x];
            for (std::size_t c = 0; c < 3; ++c) {
                const double top = image.at(vy.lo, vx.lo, c) * (1.0 - vx.frac) +
                                   image.at(vy.lo, vx.hi, c) * vx.frac;
                const double bot = image.at(vy.hi, vx.lo, c) * (1.0 - vx.frac) +
                                   image.at(vy.hi, vx.hi, c) * vx.frac;
                out.at(y, x, c) = top * (1.0 - vy.frac) + bot * vy.frac;
            }
        }
    }
    return out;
}

Tensor resize_bilinear_adjoint(const Tensor& grad_out, std::size_t in_height, std::size_t in_width) {
    const std::size_t height = grad_out.dim(0);
    const std::size_t width = grad_out.dim(1);
    if (height == in_height && width == in_width) return grad_out;
    const auto ty = resize_taps(in_height, height);
    const auto tx = resize_taps(in_width, width);
    Tensor g({in_height, in_width, 3});
    for (std::size_t y = 0; y < height; ++y) {
        const auto& vy = ty[y];
        for (std::size_t x = 0; x < width; ++x) {
            const auto& vx = tx[x];
            for (std::size_t c = 0; c < 3; ++c) {
                const double go = grad_out.at(y, x, c);
                g.at(vy.lo, vx.lo, c) += go * (1.0 - vy.frac) * (1.0 - vx.frac);
                g.at(vy.lo, vx.hi, c) += go * (1.0 - vy.frac) * vx.frac;
                g.at(vy.hi, vx.lo, c) += go * vy.frac * (1.0 - vx.frac);
                g.at(vy.hi, vx.hi, c) += go * vy.frac * vx.frac;
            }
        }
    }
    return g;
}

}  // namespace visteer
