#include "visteer/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace visteer {

double eval_scalar(const ScalarFn& fn, const Tensor& point) {
    Graph g;
    Var x = g.leaf(point, false);
    return fn(g, x).value().item();
}

Tensor eval_gradient(const ScalarFn& fn, const Tensor& point) {
    Graph g;
    Var x = g.leaf(point, true);
    Var y = fn(g, x);
    g.backward(y);
    return x.grad();
}

GradCheckResult grad_check(const ScalarFn& fn, const Tensor& point, double step,
                           std::optional<std::size_t> sample_count, std::uint64_t seed) {
    if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
    const Tensor analytic = eval_gradient(fn, point);

    std::vector<std::size_t> coords(point.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (sample_count && *sample_count < coords.size()) {
        std::mt19937_64 rng(seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(*sample_count);
    }

    GradCheckResult res;
    Tensor probe = point;
    for (std::size_t i : coords) {
        const double orig = probe[i];
        probe[i] = orig + step;
        const double fp = eval_scalar(fn, probe);
        probe[i] = orig - step;
        const double fm = eval_scalar(fn, probe);
        probe[i] = orig;
        const double numeric = (fp - fm) / (2.0 * step);
        const double err = std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-12);
        if (err > res.max_rel_error || res.checked == 0) {
            res.max_rel_error = std::max(res.max_rel_error, err);
            if (err >= res.max_rel_error) res.worst_index = i;
        }
        ++res.checked;
    }
    return res;
}

}  // namespace visteer
