#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "visteer/graph.hpp"

namespace visteer {

// Builds a scalar on `graph` from the leaf `x`. Must be deterministic.
using ScalarFn = std::function<Var(Graph& graph, Var x)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

// Compares reverse-mode gradients against central differences. With
// `sample_count` set, only that many coordinates (seeded, without replacement)
// are probed; otherwise all of them.
GradCheckResult grad_check(const ScalarFn& fn, const Tensor& point, double step,
                           std::optional<std::size_t> sample_count = std::nullopt,
                           std::uint64_t seed = 0);

double eval_scalar(const ScalarFn& fn, const Tensor& point);
Tensor eval_gradient(const ScalarFn& fn, const Tensor& point);

}  // namespace visteer
