#include "visteer/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "visteer/image_ops.hpp"
#include "visteer/parallel.hpp"
#include "visteer/rng.hpp"

namespace visteer {

void OptimizerParams::validate() const {
    if (iterations == 0) throw std::invalid_argument("optimizer: iterations must be >= 1");
    if (spectral_samples == 0) throw std::invalid_argument("optimizer: spectral_samples must be >= 1");
    if (!(noise_sigma >= 0.0)) throw std::invalid_argument("optimizer: noise_sigma must be >= 0");
    if (!(mask_rho >= 0.0 && mask_rho < 1.0)) throw std::invalid_argument("optimizer: mask_rho must be in [0, 1)");
    if (!(step_inner > 0.0)) throw std::invalid_argument("optimizer: step_inner must be > 0");
    if (!(step_outer >= 0.0)) throw std::invalid_argument("optimizer: step_outer must be >= 0");
    if (!(momentum >= 0.0)) throw std::invalid_argument("optimizer: momentum must be >= 0");
    if (!(epsilon >= 0.0)) throw std::invalid_argument("optimizer: epsilon must be >= 0");
    if (patience == 0) throw std::invalid_argument("optimizer: patience must be >= 1");
}

void PgdParams::validate() const {
    if (!(budget > 0.0 && budget <= 1.0)) throw std::invalid_argument("pgd: budget must be in (0, 1]");
    if (!(step > 0.0)) throw std::invalid_argument("pgd: step must be > 0");
    if (iterations == 0) throw std::invalid_argument("pgd: iterations must be >= 1");
    if (samples == 0) throw std::invalid_argument("pgd: samples must be >= 1");
    if (!(noise_sigma >= 0.0)) throw std::invalid_argument("pgd: noise_sigma must be >= 0");
    if (!(mask_rho >= 0.0 && mask_rho < 1.0)) throw std::invalid_argument("pgd: mask_rho must be in [0, 1)");
}

ScheduleState ScheduleState::start(double base_step, std::size_t patience) {
    ScheduleState s;
    s.base_step = base_step;
    s.current_step = base_step;
    s.patience = patience;
    return s;
}

ScheduleState adaptive_step(ScheduleState s, double new_loss) {
    if (new_loss < s.best_loss) {
        s.best_loss = new_loss;
        s.current_step *= 1.1;
        s.stagnation_count = 0;
    } else if (++s.stagnation_count >= s.patience) {
        s.current_step *= 0.8;
        s.stagnation_count = 0;
    }
    s.current_step = std::clamp(s.current_step, s.min_step(), s.max_step());
    return s;
}

Tensor sample_spectral_mask(const Shape& shape, double rho, Rng& rng) {
    if (!(rho >= 0.0 && rho < 1.0)) throw std::invalid_argument("sample_spectral_mask: rho must be in [0, 1)");
    Tensor m(shape, 1.0);
    if (rho == 0.0) return m;
    std::uniform_real_distribution<double> u(1.0 - rho, 1.0 + rho);
    for (double& v : m.values()) v = u(rng);
    return m;
}

AugmentationSample sample_augmentation(const Shape& shape, double sigma, double rho, Rng& rng) {
    AugmentationSample s;
    s.noise = Tensor(shape);
    if (sigma > 0.0) {
        std::normal_distribution<double> nd(0.0, sigma);
        for (double& v : s.noise.values()) v = nd(rng) / 255.0;
    }
    s.mask = sample_spectral_mask(shape, rho, rng);
    return s;
}

namespace {

void check_targets(const TargetActivations& t, const SteeringConfig& c) {
    if (t.layers != c.layers || t.positions != c.token_positions) {
        throw std::invalid_argument("activation loss: targets were built for a different steering config");
    }
    if (t.prompts.empty() || t.targets.size() != t.prompts.size()) {
        throw std::invalid_argument("activation loss: targets and prompts disagree");
    }
}

void check_member(const EnsembleMember& m) {
    if (!m.model || !m.targets) throw std::invalid_argument("optimizer: ensemble member without model or targets");
    check_targets(*m.targets, m.config);
}

void require_finite(const Tensor& t, const std::string& what) {
    if (!t.all_finite()) throw std::runtime_error("optimizer: non-finite values in " + what);
}

void clip01(Tensor& x) {
    for (double& v : x.values()) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace

Var activation_loss(Graph& g, const ToyVLM& model, Var image, const TargetActivations& t, const SteeringConfig& c) {
    check_targets(t, c);
    const std::size_t top = *std::max_element(t.layers.begin(), t.layers.end());
    const auto prefix = model.encode_image(g, image, top);
    RunOptions opt;
    opt.max_layer = top;
    std::optional<Var> total;
    for (std::size_t j = 0; j < t.prompts.size(); ++j) {
        const auto pass = model.run_text(g, prefix, t.prompts[j], opt);
        for (std::size_t i = 0; i < t.layers.size(); ++i) {
            Var h = pass.hidden[t.layers[i]];
            const std::size_t rows = h.shape()[0];
            Var diff = sub(slice_rows(h, rows - t.positions, rows), g.constant_ref(t.targets[j][i]));
            Var term = scale(sum_squares(diff), c.weight(i));
            total = total ? add(*total, term) : term;
        }
    }
    return scale(*total, 1.0 / static_cast<double>(t.prompts.size() * t.layers.size()));
}

double activation_loss_value(const ToyVLM& model, const Tensor& image, const TargetActivations& t,
                             const SteeringConfig& c) {
    Graph g;
    return activation_loss(g, model, g.constant_ref(image), t, c).value().item();
}

GradientResult spectral_gradient(const Tensor& x, const EnsembleMember& member, std::size_t samples, double sigma,
                                 double rho, Rng& rng) {
    check_member(member);
    if (samples == 0) throw std::invalid_argument("spectral_gradient: samples must be >= 1");
    require_image(x, "spectral_gradient");
    std::vector<AugmentationSample> aug;
    for (std::size_t s = 0; s < samples; ++s) aug.push_back(sample_augmentation(x.shape(), sigma, rho, rng));

    std::vector<Tensor> grads(samples);
    std::vector<double> losses(samples);
    parallel_for(samples, [&](std::size_t s) {
        Graph g;
        Var xv = g.leaf(x);
        Var xa = sigma > 0.0 ? add(xv, g.constant_ref(aug[s].noise)) : xv;
        if (rho > 0.0) xa = idct2d(mul(dct2d(xa), g.constant_ref(aug[s].mask)));
        Var loss = activation_loss(g, *member.model, xa, *member.targets, member.config);
        g.backward(loss);
        grads[s] = xv.grad();
        losses[s] = loss.value().item();
    });

    GradientResult out;
    out.grad = std::move(grads[0]);
    out.mean_loss = losses[0];
    for (std::size_t s = 1; s < samples; ++s) {
        out.grad += grads[s];
        out.mean_loss += losses[s];
    }
    if (samples > 1) {
        out.grad *= 1.0 / static_cast<double>(samples);
        out.mean_loss /= static_cast<double>(samples);
    }
    if (!out.grad.all_finite() || !std::isfinite(out.mean_loss)) {
        throw std::runtime_error("spectral_gradient: non-finite gradient (loss " + std::to_string(out.mean_loss) +
                                 ", model '" + member.model->config().name + "')");
    }
    return out;
}

std::vector<double> ensemble_losses(const Tensor& image, const std::vector<EnsembleMember>& ensemble) {
    std::vector<double> out;
    for (const auto& m : ensemble) {
        check_member(m);
        out.push_back(activation_loss_value(*m.model, image, *m.targets, m.config));
    }
    return out;
}

namespace {

double mean_of(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string iteration_tag(const char* what, std::size_t t, std::size_t k) {
    return std::string(what) + "/" + std::to_string(t) + "/" + std::to_string(k);
}

}  // namespace

OptimizeResult optimize_universal(const Tensor& x0, const std::vector<EnsembleMember>& ensemble,
                                  const OptimizerParams& params, bool record_momentum, const ProgressFn& progress) {
    params.validate();
    if (ensemble.empty()) throw std::invalid_argument("optimize_universal: empty ensemble");
    for (const auto& m : ensemble) check_member(m);
    require_image(x0, "optimize_universal");

    OptimizeResult res;
    Tensor x = x0;
    res.buffers.inner = Tensor(x0.shape());
    res.buffers.outer = Tensor(x0.shape());
    if (record_momentum) res.momentum.emplace();
    res.initial_loss = mean_of(ensemble_losses(x0, ensemble));
    ScheduleState schedule = ScheduleState::start(params.step_inner, params.patience);

    std::vector<std::size_t> order(ensemble.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t t = 0; t < params.iterations; ++t) {
        const Tensor x_orig = x;
        if (params.shuffle_models) {
            Rng orng = make_rng(params.seed, iteration_tag("order", t, 0));
            std::shuffle(order.begin(), order.end(), orng);
        }
        for (std::size_t k : order) {
            Rng rng = make_rng(params.seed, iteration_tag("augment", t, k));
            GradientResult gr = spectral_gradient(x, ensemble[k], params.spectral_samples, params.noise_sigma,
                                                  params.mask_rho, rng);
            Tensor g = gr.grad;
            g *= 1.0 / (l2_norm(gr.grad.data()) + params.epsilon);
            res.buffers.inner *= params.momentum;
            res.buffers.inner += g;
            Tensor stepv = res.buffers.inner;
            stepv *= schedule.current_step;
            x -= stepv;
            if (res.momentum) {
                res.momentum->normalized_grads.push_back(std::move(g));
                res.momentum->inner.push_back(res.buffers.inner);
            }
        }

        IterationRecord rec;
        rec.iteration = t + 1;
        rec.step = schedule.current_step;
        Tensor dx = x;
        dx -= x_orig;
        const double l1 = l1_norm(dx.data());
        if (!(l1 > 0.0)) {
            rec.outer_skipped = true;
            ++res.skipped_outer;
            x = x_orig;
        } else {
            dx *= 1.0 / l1;
            res.buffers.outer *= params.momentum;
            res.buffers.outer += dx;
            if (params.step_outer > 0.0) {
                x = x_orig;
                for (std::size_t i = 0; i < x.size(); ++i) {
                    const double o = res.buffers.outer[i];
                    x[i] += params.step_outer * static_cast<double>((o > 0.0) - (o < 0.0));
                }
            }
            if (res.momentum) {
                res.momentum->displacements.push_back(std::move(dx));
                res.momentum->outer.push_back(res.buffers.outer);
                res.momentum->origins.push_back(x_orig);
                res.momentum->pre_clip.push_back(x);
            }
        }
        clip01(x);
        require_finite(x, "image at iteration " + std::to_string(t + 1));

        rec.model_losses = ensemble_losses(x, ensemble);
        rec.ensemble_loss = mean_of(rec.model_losses);
        if (!std::isfinite(rec.ensemble_loss)) {
            throw std::runtime_error("optimize_universal: loss diverged at iteration " + std::to_string(t + 1));
        }
        if (params.adaptive) schedule = adaptive_step(schedule, rec.ensemble_loss);
        res.trace.push_back(rec);
        if (progress) progress(t + 1, x, res.trace.back());
    }
    res.image_loss = res.trace.back().ensemble_loss;
    res.image = std::move(x);
    return res;
}

OptimizeResult optimize_pgd(const Tensor& x0, const EnsembleMember& member, const PgdParams& params,
                            const ProgressFn& progress) {
    params.validate();
    check_member(member);
    require_image(x0, "optimize_pgd");
    const std::vector<EnsembleMember> single{member};

    OptimizeResult res;
    res.initial_loss = activation_loss_value(*member.model, x0, *member.targets, member.config);
    Tensor x = x0;
    Tensor best = x0;
    double best_loss = res.initial_loss;
    for (std::size_t t = 0; t < params.iterations; ++t) {
        Rng rng = make_rng(params.seed, iteration_tag("pgd", t, 0));
        const GradientResult gr = spectral_gradient(x, member, params.samples, params.noise_sigma, params.mask_rho, rng);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double g = gr.grad[i];
            double v = x[i] - params.step * static_cast<double>((g > 0.0) - (g < 0.0));
            v = std::clamp(v, x0[i] - params.budget, x0[i] + params.budget);
            x[i] = std::clamp(v, 0.0, 1.0);
        }
        IterationRecord rec;
        rec.iteration = t + 1;
        rec.step = params.step;
        rec.model_losses = ensemble_losses(x, single);
        rec.ensemble_loss = rec.model_losses[0];
        if (!std::isfinite(rec.ensemble_loss)) {
            throw std::runtime_error("optimize_pgd: loss diverged at iteration " + std::to_string(t + 1));
        }
        if (rec.ensemble_loss < best_loss) {
            best_loss = rec.ensemble_loss;
            best = x;
        }
        res.trace.push_back(rec);
        if (progress) progress(t + 1, x, res.trace.back());
    }
    res.image_loss = params.keep_best ? best_loss : res.trace.back().ensemble_loss;
    res.image = params.keep_best ? std::move(best) : std::move(x);
    return res;
}

}  // namespace visteer
