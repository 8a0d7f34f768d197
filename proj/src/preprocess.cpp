#include "visteer/preprocess.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "visteer/image_ops.hpp"

namespace visteer {

void PreprocessSpec::validate() const {
    if (input_height == 0 || input_width == 0) {
        throw std::invalid_argument("preprocess: input size " + std::to_string(input_height) + "x" +
                                    std::to_string(input_width) + " has a zero dimension");
    }
    for (std::size_t c = 0; c < 3; ++c) {
        if (!(std[c] > 0.0) || !std::isfinite(std[c]) || !std::isfinite(mean[c])) {
            throw std::invalid_argument("preprocess: channel " + std::to_string(c) +
                                        " needs finite mean and positive std");
        }
    }
}

Var preprocess(Var image, const PreprocessSpec& spec) {
    spec.validate();
    require_image(image.value(), "preprocess");
    Graph& g = *image.graph;
    Var resized = resize_bilinear(image, spec.input_height, spec.input_width);
    Tensor shift({3}), inv_std({3});
    for (std::size_t c = 0; c < 3; ++c) {
        shift[c] = spec.mean[c];
        inv_std[c] = 1.0 / spec.std[c];
    }
    return mul(sub(resized, g.constant(shift)), g.constant(inv_std));
}

}  // namespace visteer
