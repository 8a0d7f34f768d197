// Acceptance suite: one PASS/FAIL line per criterion, run on the shipped demo config.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "visteer/experiment.hpp"
#include "visteer/grad_check.hpp"
#include "visteer/image_ops.hpp"
#include "visteer/preprocess.hpp"

using namespace visteer;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, const std::string& name, bool ok, const std::string& detail) {
    std::printf("%s %2d %s: %s\n", ok ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

template <typename... Args>
std::string fmt(const char* f, Args... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Tensor noise(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    Rng rng = make_rng(seed, "acceptance");
    std::uniform_real_distribution<double> u(lo, hi);
    for (double& v : t.values()) v = u(rng);
    return t;
}

// Weighted sum of an op output, so every output coordinate carries a distinct weight.
ScalarFn probe(std::function<Var(Graph&, Var)> op, std::uint64_t seed) {
    return [op, seed](Graph& g, Var x) {
        Var y = op(g, x);
        return sum(mul(y, g.constant(noise(y.shape(), seed))));
    };
}

void gradient_fidelity(Lab& lab) {
    const auto t0 = Clock::now();
    struct Case {
        std::string name;
        ScalarFn fn;
        Tensor point;
    };
    const Tensor b = noise({5, 4}, 1), w = noise({6, 4}, 2);
    std::vector<Case> cases{
        {"matmul_left", probe([b](Graph& g, Var x) { return matmul(x, g.constant(b)); }, 3), noise({3, 5}, 4)},
        {"matmul_right", probe([b](Graph& g, Var x) { return matmul(g.constant(b), x); }, 5), noise({4, 2}, 6)},
        {"add_broadcast", probe([](Graph& g, Var x) { return add(g.constant(noise({3, 4}, 7)), x); }, 8), noise({4}, 9)},
        {"sub", probe([](Graph& g, Var x) { return sub(x, g.constant(noise({3, 4}, 10))); }, 11), noise({3, 4}, 12)},
        {"mul", probe([](Graph&, Var x) { return mul(x, x); }, 13), noise({3, 4}, 14)},
        {"scale", probe([](Graph&, Var x) { return scale(x, -2.5); }, 15), noise({3, 4}, 16)},
        {"gelu", probe([](Graph&, Var x) { return gelu(x); }, 17), noise({4, 5}, 18, -3, 3)},
        {"softmax", probe([](Graph&, Var x) { return softmax(x); }, 19), noise({3, 6}, 20, -2, 2)},
        {"layer_norm", probe([](Graph&, Var x) { return layer_norm(x); }, 21), noise({3, 6}, 22)},
        {"sum", [](Graph&, Var x) { return mul(sum(x), sum(x)); }, noise({3, 3}, 23)},
        {"mean", [](Graph&, Var x) { return mul(mean(x), sum(x)); }, noise({3, 3}, 24)},
        {"l2_norm", [](Graph&, Var x) { return l2_norm(x); }, noise({7}, 25)},
        {"embed", probe([](Graph&, Var x) { return embed(x, {2, 0, 2, 4}); }, 26), noise({5, 3}, 27)},
        {"concat_rows", probe([](Graph&, Var x) { return concat_rows({x, scale(x, 2.0), x}); }, 28), noise({2, 3}, 29)},
        {"slice_rows", probe([](Graph&, Var x) { return slice_rows(x, 1, 3); }, 30), noise({4, 3}, 31)},
        {"transpose", probe([](Graph&, Var x) { return transpose(x); }, 32), noise({3, 5}, 33)},
        {"reshape", probe([](Graph&, Var x) { return reshape(x, {5, 3}); }, 34), noise({3, 5}, 35)},
        {"attention_causal", probe([w](Graph& g, Var x) {
             Var kv = g.constant(w);
             return attention(x, add(kv, slice_rows(concat_rows({x, x}), 0, 6)), kv, 2, true, 3);
         }, 36), noise({3, 4}, 37)},
        {"attention_full", probe([](Graph&, Var x) { return attention(x, x, x, 2, false); }, 38), noise({5, 4}, 39)},
        {"patchify", probe([](Graph&, Var x) { return patchify(x, 2); }, 40), noise({4, 6, 3}, 41)},
        {"dct2d", probe([](Graph&, Var x) { return dct2d(x); }, 42), noise({5, 4, 3}, 43)},
        {"idct2d", probe([](Graph&, Var x) { return idct2d(x); }, 44), noise({4, 5, 3}, 45)},
        {"resize_bilinear", probe([](Graph&, Var x) { return resize_bilinear(x, 7, 3); }, 46), noise({5, 4, 3}, 47)},
    };
    // The whole image path on the first demo model.
    const EnsembleMember member = lab.member(0);
    cases.push_back({"pipeline",
                     [member](Graph& g, Var x) {
                         return activation_loss(g, *member.model, x, *member.targets, member.config);
                     },
                     noise(lab.baseline().shape(), 48, 0.1, 0.9)});

    double worst = 0.0;
    std::string worst_name;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const auto r = grad_check(cases[i].fn, cases[i].point, 1e-5, 20, 100 + i);
        if (!(r.max_rel_error <= worst)) {
            worst = r.max_rel_error;
            worst_name = cases[i].name;
        }
    }
    const double secs = seconds_since(t0);
    report(1, "gradient fidelity", worst < 1e-4 && secs < 60.0,
           fmt("%zu cases, max rel err %.2e (%s), %.1f s", cases.size(), worst, worst_name.c_str(), secs));
}

void transform_correctness() {
    const Tensor x = noise({16, 12, 3}, 50, 0.0, 1.0);
    const Tensor spec = dct2d_values(x);
    const double round_trip = max_abs_diff(idct2d_values(spec), x);
    double ex = 0.0, es = 0.0;
    for (double v : x.values()) ex += v * v;
    for (double v : spec.values()) es += v * v;
    const double energy = std::abs(ex - es) / ex;
    const double identity = max_abs_diff(resize_bilinear_values(x, 16, 12), x);
    const Tensor y = noise({16, 12, 3}, 51, 0.0, 1.0);
    const double a = 0.3, c = -1.7;
    const double linear = max_abs_diff(resize_bilinear_values(a * x + c * y, 23, 9),
                                       a * resize_bilinear_values(x, 23, 9) + c * resize_bilinear_values(y, 23, 9));
    report(2, "transform correctness", round_trip < 1e-9 && energy < 1e-9 && identity < 1e-12 && linear < 1e-9,
           fmt("dct round trip %.1e, energy %.1e, resize identity %.1e, linearity %.1e", round_trip, energy,
               identity, linear));
}

void algorithm_mechanics(Lab& lab) {
    std::vector<EnsembleMember> ensemble;
    for (std::size_t i = 0; i < lab.model_count(); ++i) ensemble.push_back(lab.member(i));
    OptimizerParams p = lab.config().optimize.universal;
    p.iterations = 6;
    p.step_outer = 2.0 / 255.0;

    auto run = [&](std::vector<Tensor>& images) {
        return optimize_universal(lab.baseline(), ensemble, p, true,
                                  [&](std::size_t, const Tensor& x, const IterationRecord&) { images.push_back(x); });
    };
    std::vector<Tensor> images_a, images_b;
    const OptimizeResult a = run(images_a);
    const OptimizeResult b = run(images_b);
    const MomentumTrace& m = *a.momentum;

    double inner_err = 0.0, outer_err = 0.0, step_err = 0.0;
    for (std::size_t t = 0; t < m.inner.size(); ++t) {
        Tensor closed(lab.baseline().shape());
        for (std::size_t i = 0; i <= t; ++i) closed += m.normalized_grads[i] * std::pow(p.momentum, double(t - i));
        inner_err = std::max(inner_err, max_abs_diff(closed, m.inner[t]));
    }
    for (std::size_t t = 0; t < m.outer.size(); ++t) {
        Tensor closed(lab.baseline().shape());
        for (std::size_t i = 0; i <= t; ++i) closed += m.displacements[i] * std::pow(p.momentum, double(t - i));
        outer_err = std::max(outer_err, max_abs_diff(closed, m.outer[t]));
        const Tensor moved = m.pre_clip[t] - m.origins[t];
        for (double v : moved.values()) step_err = std::max(step_err, v == 0.0 ? 0.0 : std::abs(std::abs(v) - p.step_outer));
    }
    bool in_range = images_a.size() == p.iterations;
    for (const Tensor& x : images_a)
        for (double v : x.values()) in_range = in_range && v >= 0.0 && v <= 1.0;
    bool same = images_a == images_b && a.image == b.image && a.trace.size() == b.trace.size();
    for (std::size_t t = 0; same && t < a.trace.size(); ++t) {
        same = a.trace[t].model_losses == b.trace[t].model_losses && a.trace[t].step == b.trace[t].step &&
               m.inner[t] == b.momentum->inner[t];
    }
    report(3, "algorithm mechanics", inner_err < 1e-9 && outer_err < 1e-9 && step_err < 1e-15 && in_range && same,
           fmt("inner %.1e, outer %.1e, outer step %.1e, in range %s, deterministic %s", inner_err, outer_err,
               step_err, in_range ? "yes" : "no", same ? "yes" : "no"));
}

void vector_recovery(Lab& lab, double secs) {
    const auto& plant = lab.config().plant;
    double worst = 1.0;
    for (std::size_t i = 0; i < lab.model_count(); ++i) {
        const Tensor& v = lab.vectors(i).at(plant.layer);
        worst = std::min(worst, cosine_similarity(v.data(), lab.planted_direction().data()));
    }
    report(4, "steering-vector recovery", worst > 0.9 && secs < 60.0,
           fmt("min cosine %.4f over %zu models, coupling %.1f, %zu pairs, %.1f s", worst, lab.model_count(),
               plant.coupling, lab.config().corpus.pairs, secs));
}

double bas_of(Lab& lab, std::size_t i, const EvalMethod& m) {
    return bas(lab.model(i), lab.corpus().test, m, lab.baseline()).score;
}

EvalMethod steering_method(Lab& lab, std::size_t i, double multiplier) {
    return EvalMethod::steering(lab.vectors(i), multiplier, lab.config().steering_for(i).token_positions);
}

void vector_efficacy(Lab& lab) {
    bool ok = true;
    std::ostringstream detail;
    for (std::size_t i = 0; i < lab.model_count(); ++i) {
        const auto& s = lab.config().steering_for(i);
        const double up = bas_of(lab, i, steering_method(lab, i, s.multiplier_pos));
        const double none = bas_of(lab, i, EvalMethod::none());
        const double down = bas_of(lab, i, steering_method(lab, i, s.multiplier_neg));
        ok = ok && up - none >= 0.05 && none - down >= 0.05;
        detail << (i ? "; " : "") << lab.model(i).config().name << fmt(" %+.2f: %.3f, none: %.3f, %+.2f: %.3f",
                                                                        s.multiplier_pos, up, none, s.multiplier_neg,
                                                                        down);
    }
    report(5, "steering-vector efficacy", ok, detail.str());
}

void image_parity(Lab& lab, const OptimizeResult& pgd, double secs) {
    const double ratio = pgd.image_loss / pgd.initial_loss;
    const double none = bas_of(lab, 0, EvalMethod::none());
    const double steer = bas_of(lab, 0, steering_method(lab, 0, lab.multiplier(0))) - none;
    const double image = bas_of(lab, 0, EvalMethod::with_image(pgd.image)) - none;
    const bool ok = ratio <= 0.1 && pgd.trace.size() <= 2000 && std::signbit(steer) == std::signbit(image) &&
                    image != 0.0 && std::abs(image) >= 0.5 * std::abs(steer);
    report(6, "image-steering parity", ok,
           fmt("%s PGD loss ratio %.4f in %zu steps, BAS shift image %+.4f vs vector %+.4f (%.0f%%), %.0f s",
               lab.model(0).config().name.c_str(), ratio, pgd.trace.size(), image, steer,
               100.0 * std::abs(image) / std::abs(steer), secs));
}

void universality(Lab& lab, const OptimizeResult& k2, double secs) {
    const double ratio = k2.image_loss / k2.initial_loss;
    bool ok = ratio < 0.1 && k2.trace.size() >= 2000 && k2.trace.size() <= 5000 && secs < 1800.0;
    std::ostringstream detail;
    detail << fmt("ensemble loss ratio %.4f after %zu iterations, %.0f s; BAS shift", ratio, k2.trace.size(), secs);
    const double sign = lab.config().optimize.negative ? -1.0 : 1.0;
    for (std::size_t i = 0; i < lab.model_count(); ++i) {
        const double shift = bas_of(lab, i, EvalMethod::with_image(k2.image)) - bas_of(lab, i, EvalMethod::none());
        ok = ok && sign * shift >= 0.05;
        detail << " " << lab.model(i).config().name << fmt(" %+.4f", shift);
    }
    report(7, "universality", ok, detail.str());
}

void transfer(Lab& lab, const OptimizeResult& k2, const OptimizeResult& k1) {
    const std::size_t n = lab.heldout_count();
    std::size_t negative = 0, k2_better = 0;
    std::ostringstream detail;
    for (std::size_t i = 0; i < n; ++i) {
        const auto r2 = transfer_delta(k2.image, lab.heldout(i), lab.corpus().test, lab.config().eval.random_seed);
        const auto r1 = transfer_delta(k1.image, lab.heldout(i), lab.corpus().test, lab.config().eval.random_seed);
        negative += r2.delta < 0.0;
        k2_better += r2.delta <= r1.delta;
        detail << (i ? ", " : " ") << fmt("%+.4f/%+.4f", r2.delta, r1.delta);
    }
    const bool ok = n >= 5 && 5 * negative >= 4 * n && 2 * k2_better > n;
    report(8, "transfer directionality", ok,
           fmt("%zu held-out models, K=2 delta negative in %zu, K=2 <= K=1 in %zu; deltas K2/K1:", n, negative,
               k2_better) + detail.str());
}

void unrelated_tasks(Lab& lab, const OptimizeResult& k2) {
    const auto& e = lab.config().eval;
    const Tensor& x0 = lab.baseline();
    const Tensor rnd = random_image(x0.dim(0), x0.dim(1), e.random_seed);
    bool ok = true;
    std::ostringstream detail;
    for (std::size_t i = 0; i < lab.model_count(); ++i) {
        const auto tasks = generate_unrelated_tasks(e.unrelated_tasks, e.task_seed, lab.model(i).vocab());
        const double a_img = unrelated_task_eval(k2.image, lab.model(i), tasks);
        const double a_rnd = unrelated_task_eval(rnd, lab.model(i), tasks);
        ok = ok && std::abs(a_img - a_rnd) < 0.01 && tasks.size() == 14000;
        detail << (i ? "; " : "") << lab.model(i).config().name
               << fmt(" image %.4f, random %.4f, diff %+.4f", a_img, a_rnd, a_img - a_rnd);
    }
    report(9, "unrelated-task preservation", ok, fmt("%zu tasks: ", e.unrelated_tasks) + detail.str());
}

void metric_properties(Lab& lab, const OptimizeResult& k2) {
    bool in_range = true, symmetric = true;
    const auto swapped = swap_labels(lab.corpus().test);
    for (std::size_t i = 0; i < lab.model_count(); ++i) {
        for (const EvalMethod& m : {EvalMethod::none(), EvalMethod::with_image(k2.image),
                                    steering_method(lab, i, lab.multiplier(i))}) {
            const double s = bas(lab.model(i), lab.corpus().test, m, lab.baseline()).score;
            const double t = bas(lab.model(i), swapped, m, lab.baseline()).score;
            in_range = in_range && s >= 0.0 && s <= 1.0 && t >= 0.0 && t <= 1.0;
            symmetric = symmetric && t == 1.0 - s;
        }
    }
    ExperimentConfig flat = lab.config();
    flat.plant.enabled = false;
    Lab unplanted(flat);
    const double equal = bas(unplanted.model(0), lab.corpus().test, EvalMethod::none(), lab.baseline()).score;
    report(10, "metric properties", in_range && symmetric && equal == 0.5,
           fmt("range %s, swap exact %s, equal-logit score %.17g", in_range ? "ok" : "violated",
               symmetric ? "yes" : "no", equal));
}

void schedule_conformance() {
    const double base = 0.4;
    const std::vector<double> losses{3.0, 2.0, 2.5, 2.2, 2.1, 1.0, 0.5, 0.25, 0.125, 0.9};
    ScheduleState s = ScheduleState::start(base, 3);
    double step = base, best = INFINITY;
    int stall = 0;
    bool ok = true;
    std::ostringstream steps;
    for (double l : losses) {
        if (l < best) {
            best = l;
            step *= 1.1;
            stall = 0;
        } else if (++stall == 3) {
            step *= 0.8;
            stall = 0;
        }
        step = std::min(std::max(step, 0.1 * base), 5.0 * base);
        s = adaptive_step(s, l);
        ok = ok && s.current_step == step && s.stagnation_count == static_cast<std::size_t>(stall);
        steps << fmt(" %.4f", s.current_step);
    }
    // Clamp both ends.
    ScheduleState hi = ScheduleState::start(base, 3), lo = ScheduleState::start(base, 3);
    for (int i = 0; i < 40; ++i) hi = adaptive_step(hi, -i);
    for (int i = 0; i < 60; ++i) lo = adaptive_step(lo, 1.0);
    ok = ok && hi.current_step == 5.0 * base && lo.current_step == 0.1 * base;
    report(11, "schedule conformance", ok,
           fmt("10-event script steps%s; clamps %.2f / %.3f", steps.str().c_str(), hi.current_step, lo.current_step));
}

}  // namespace

int main() {
    const auto start = Clock::now();
    Lab lab(demo_config());
    std::printf("acceptance on demo config: %zu models, %zu held-out\n", lab.model_count(), lab.heldout_count());

    const auto t_vectors = Clock::now();
    for (std::size_t i = 0; i < lab.model_count(); ++i) lab.vectors(i);
    const double vector_secs = seconds_since(t_vectors);
    gradient_fidelity(lab);
    transform_correctness();
    algorithm_mechanics(lab);
    vector_recovery(lab, vector_secs);
    vector_efficacy(lab);

    auto t = Clock::now();
    const OptimizeResult pgd = lab.optimize_pgd(0);
    image_parity(lab, pgd, seconds_since(t));

    std::vector<std::size_t> all(lab.model_count());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    t = Clock::now();
    const OptimizeResult k2 = lab.optimize_universal(all);
    universality(lab, k2, seconds_since(t));

    const OptimizeResult k1 = lab.optimize_universal({0});
    transfer(lab, k2, k1);
    unrelated_tasks(lab, k2);
    metric_properties(lab, k2);
    schedule_conformance();

    std::printf("%d of 11 criteria failed, %.0f s total\n", failures, seconds_since(start));
    return failures == 0 ? 0 : 1;
}
