#include <cmath>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "visteer/corpus.hpp"
#include "visteer/grad_check.hpp"
#include "visteer/optimizer.hpp"

using namespace visteer;
using visteer::test::tiny_config;

namespace {

struct Bench {
    std::vector<ToyVLM> models;
    Tensor x0 = baseline_image(16, 16, 5);
    SteeringConfig config;
    std::vector<SteeringVectorSet> vectors;
    std::vector<TargetActivations> targets;

    explicit Bench(double multiplier, std::size_t k = 1, std::size_t prompts = 3) {
        config.layers = {1, 2};
        config.layer_weights = {1.0, 0.5};
        const auto corpus = generate_behavior_corpus(Behavior::Refusal, 60, 10, 2);
        const std::vector<BehaviorExample> pair_ex(corpus.train.begin(), corpus.train.begin() + 48);
        const std::vector<BehaviorExample> prompt_ex(corpus.train.begin() + 48,
                                                     corpus.train.begin() + 48 + static_cast<std::ptrdiff_t>(prompts));
        const Tensor dir = random_unit_vector(16, 9);
        for (std::size_t i = 0; i < k; ++i) {
            const ToyVLM m = ToyVLM::build(tiny_config(3 + i));
            models.push_back(m.with_planted(1, dir, 2.0, 0.15, marker_polarity(m.vocab(), Behavior::Refusal)));
        }
        for (std::size_t i = 0; i < k; ++i) {
            vectors.push_back(compute_steering_vector(models[i], to_pairs(pair_ex), config, x0));
            targets.push_back(get_target_activations(models[i], x0, to_prompts(prompt_ex, models[i].vocab()),
                                                     vectors[i], multiplier, config));
        }
    }

    std::vector<EnsembleMember> ensemble() const {
        std::vector<EnsembleMember> e;
        for (std::size_t i = 0; i < models.size(); ++i) e.push_back({&models[i], &targets[i], config});
        return e;
    }
};

OptimizerParams quiet_params(std::size_t iterations) {
    OptimizerParams p;
    p.iterations = iterations;
    p.spectral_samples = 1;
    p.noise_sigma = 0.0;
    p.mask_rho = 0.0;
    return p;
}

}  // namespace

TEST(SpectralMask, RhoZeroIsOnes) {
    Rng rng = make_rng(1);
    const Tensor m = sample_spectral_mask({8, 8, 3}, 0.0, rng);
    for (double v : m.values()) EXPECT_EQ(v, 1.0);
}

TEST(SpectralMask, RangeAndMean) {
    Rng rng = make_rng(2);
    const Tensor m = sample_spectral_mask({500, 667, 3}, 0.5, rng);
    ASSERT_GE(m.size(), 1000000u);
    double sum = 0.0;
    for (double v : m.values()) {
        ASSERT_GE(v, 0.5);
        ASSERT_LE(v, 1.5);
        sum += v;
    }
    EXPECT_NEAR(sum / static_cast<double>(m.size()), 1.0, 0.01);
    EXPECT_THROW(sample_spectral_mask({2, 2, 3}, 1.0, rng), std::invalid_argument);
    EXPECT_THROW(sample_spectral_mask({2, 2, 3}, -0.1, rng), std::invalid_argument);
}

TEST(SpectralMask, NoiseScale) {
    Rng rng = make_rng(3);
    const AugmentationSample s = sample_augmentation({300, 300, 3}, 16.0, 0.0, rng);
    double sq = 0.0;
    for (double v : s.noise.values()) sq += v * v;
    EXPECT_NEAR(std::sqrt(sq / static_cast<double>(s.noise.size())), 16.0 / 255.0, 0.001);
}

TEST(SpectralGradient, ZeroAtBaselineTargets) {
    Bench s(0.0);
    Rng rng = make_rng(4);
    const GradientResult r = spectral_gradient(s.x0, s.ensemble()[0], 1, 0.0, 0.0, rng);
    EXPECT_EQ(r.mean_loss, 0.0);
    for (double v : r.grad.values()) EXPECT_EQ(v, 0.0);
}

TEST(SpectralGradient, UnaugmentedEqualsPlainAutodiff) {
    Bench s(-1.0);
    const auto member = s.ensemble()[0];
    Rng rng = make_rng(5);
    const Tensor x = baseline_image(16, 16, 6);
    const GradientResult r = spectral_gradient(x, member, 1, 0.0, 0.0, rng);
    ScalarFn fn = [&](Graph& g, Var v) { return activation_loss(g, *member.model, v, *member.targets, member.config); };
    EXPECT_EQ(r.grad, eval_gradient(fn, x));
    EXPECT_EQ(r.mean_loss, activation_loss_value(*member.model, x, *member.targets, member.config));
}

TEST(SpectralGradient, MatchesFiniteDifferences) {
    Bench s(-1.0);
    const auto member = s.ensemble()[0];
    ScalarFn fn = [&](Graph& g, Var v) { return activation_loss(g, *member.model, v, *member.targets, member.config); };
    EXPECT_LT(grad_check(fn, baseline_image(16, 16, 7), 1e-5, 20, 8).max_rel_error, 1e-4);
}

TEST(SpectralGradient, LossNormalization) {
    // Two prompts, two layers: loss = sum_j sum_l w_l |h - target|^2 / (2 * 2).
    Bench s(-1.0, 1, 2);
    const auto member = s.ensemble()[0];
    const Tensor x = baseline_image(16, 16, 9);
    double expect = 0.0;
    for (std::size_t j = 0; j < 2; ++j) {
        const auto out = member.model->forward(x, member.targets->prompts[j]);
        for (std::size_t i = 0; i < 2; ++i) {
            const Tensor& h = out.hidden.layers[s.config.layers[i]];
            const Tensor diff = h.rows(h.dim(0) - 1, h.dim(0)) - member.targets->targets[j][i];
            double sq = 0.0;
            for (double v : diff.values()) sq += v * v;
            expect += s.config.weight(i) * sq;
        }
    }
    EXPECT_NEAR(activation_loss_value(*member.model, x, *member.targets, member.config), expect / 4.0, 1e-15);
}

TEST(SpectralGradient, SampleAveragingIsDeterministic) {
    Bench s(-1.0);
    const auto member = s.ensemble()[0];
    Rng a = make_rng(10), b = make_rng(10);
    EXPECT_EQ(spectral_gradient(s.x0, member, 3, 16.0, 0.5, a).grad,
              spectral_gradient(s.x0, member, 3, 16.0, 0.5, b).grad);
}

TEST(AdaptiveStep, ThreeStagnationsShrinkOnce) {
    ScheduleState s = ScheduleState::start(1.0, 3);
    s = adaptive_step(s, 1.0);
    EXPECT_DOUBLE_EQ(s.current_step, 1.1);
    for (int i = 0; i < 3; ++i) s = adaptive_step(s, 2.0);
    EXPECT_DOUBLE_EQ(s.current_step, 1.1 * 0.8);
    EXPECT_EQ(s.stagnation_count, 0u);
    s = adaptive_step(s, 2.0);
    EXPECT_DOUBLE_EQ(s.current_step, 1.1 * 0.8);
}

TEST(AdaptiveStep, ClampsAtFiveTimesBase) {
    ScheduleState s = ScheduleState::start(0.5);
    for (int i = 0; i < 20; ++i) s = adaptive_step(s, 10.0 - i);
    EXPECT_DOUBLE_EQ(s.current_step, 2.5);
    for (int i = 0; i < 200; ++i) s = adaptive_step(s, 100.0);
    EXPECT_DOUBLE_EQ(s.current_step, 0.05);
}

TEST(AdaptiveStep, MatchesReferenceSimulation) {
    const std::vector<double> losses{5, 4, 4.5, 4.2, 4.1, 3.9, 3.95, 4.0, 3.99, 3.0};
    ScheduleState s = ScheduleState::start(2.0, 3);
    // Reference.
    double step = 2.0, best = INFINITY;
    int stall = 0;
    for (double l : losses) {
        if (l < best) { best = l; step *= 1.1; stall = 0; }
        else if (++stall == 3) { step *= 0.8; stall = 0; }
        step = std::clamp(step, 0.2, 10.0);
        s = adaptive_step(s, l);
        EXPECT_DOUBLE_EQ(s.current_step, step);
        EXPECT_EQ(s.stagnation_count, static_cast<std::size_t>(stall));
        EXPECT_EQ(s.best_loss, best);
    }
}

TEST(OptimizerParams, Validation) {
    OptimizerParams p;
    EXPECT_NO_THROW(p.validate());
    for (auto mutate : std::vector<std::function<void(OptimizerParams&)>>{
             [](OptimizerParams& q) { q.iterations = 0; },
             [](OptimizerParams& q) { q.spectral_samples = 0; },
             [](OptimizerParams& q) { q.noise_sigma = -1; },
             [](OptimizerParams& q) { q.mask_rho = 1.0; },
             [](OptimizerParams& q) { q.step_inner = 0.0; },
             [](OptimizerParams& q) { q.step_outer = -1e-3; },
             [](OptimizerParams& q) { q.momentum = -0.1; },
         }) {
        OptimizerParams q;
        mutate(q);
        EXPECT_THROW(q.validate(), std::invalid_argument);
    }
    PgdParams g;
    g.budget = 0.0;
    EXPECT_THROW(g.validate(), std::invalid_argument);
    g.budget = 1.5;
    EXPECT_THROW(g.validate(), std::invalid_argument);
    g = PgdParams{};
    g.step = 0.0;
    EXPECT_THROW(g.validate(), std::invalid_argument);
}

TEST(OptimizeUniversal, NormalizedGradientDescentTrend) {
    Bench s(-1.0);
    OptimizerParams p = quiet_params(50);
    p.momentum = 0.0;
    p.step_outer = 0.0;
    const OptimizeResult r = optimize_universal(s.x0, s.ensemble(), p);
    ASSERT_EQ(r.trace.size(), 50u);
    double prev = r.initial_loss;
    for (std::size_t w = 0; w < 10; ++w) {
        double mean = 0.0;
        for (std::size_t i = 0; i < 5; ++i) mean += r.trace[w * 5 + i].ensemble_loss / 5.0;
        EXPECT_LE(mean, prev) << "window " << w;
        prev = mean;
    }
    EXPECT_LT(r.image_loss, r.initial_loss);
}

TEST(OptimizeUniversal, MomentumClosedFormsAndOuterStep) {
    Bench s(-1.0, 2);
    OptimizerParams p = quiet_params(6);
    p.noise_sigma = 16.0;
    p.mask_rho = 0.5;
    p.step_outer = 1.0 / 255.0;
    p.seed = 3;
    const OptimizeResult r = optimize_universal(s.x0, s.ensemble(), p, true);
    ASSERT_TRUE(r.momentum);
    const MomentumTrace& m = *r.momentum;
    ASSERT_EQ(m.normalized_grads.size(), 12u);
    for (std::size_t t = 0; t < m.inner.size(); ++t) {
        Tensor closed(s.x0.shape());
        for (std::size_t i = 0; i <= t; ++i) closed += m.normalized_grads[i] * std::pow(p.momentum, double(t - i));
        EXPECT_LT(max_abs_diff(closed, m.inner[t]), 1e-9) << t;
    }
    ASSERT_EQ(m.outer.size(), 6u);
    for (std::size_t t = 0; t < m.outer.size(); ++t) {
        Tensor closed(s.x0.shape());
        for (std::size_t i = 0; i <= t; ++i) closed += m.displacements[i] * std::pow(p.momentum, double(t - i));
        EXPECT_LT(max_abs_diff(closed, m.outer[t]), 1e-9) << t;
        EXPECT_NEAR(l1_norm(m.displacements[t].data()), 1.0, 1e-12);
        const Tensor moved = m.pre_clip[t] - m.origins[t];
        for (double v : moved.values()) {
            EXPECT_TRUE(v == 0.0 || std::abs(std::abs(v) - p.step_outer) < 1e-15) << v;
        }
    }
}

TEST(OptimizeUniversal, ImageStaysInRangeAndIsDeterministic) {
    Bench s(-3.0, 2);
    OptimizerParams p;
    p.iterations = 8;
    p.spectral_samples = 2;
    p.step_outer = 20.0 / 255.0;
    p.seed = 11;
    auto run = [&] {
        std::vector<Tensor> images;
        const OptimizeResult r = optimize_universal(s.x0, s.ensemble(), p, false,
                                                    [&](std::size_t, const Tensor& x, const IterationRecord&) {
                                                        images.push_back(x);
                                                    });
        return std::make_pair(r, images);
    };
    const auto [a, images] = run();
    ASSERT_EQ(images.size(), 8u);
    for (const Tensor& x : images)
        for (double v : x.values()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
    const auto [b, images_b] = run();
    EXPECT_EQ(images, images_b);
    EXPECT_EQ(a.image, b.image);
    for (std::size_t t = 0; t < a.trace.size(); ++t) {
        EXPECT_EQ(a.trace[t].model_losses, b.trace[t].model_losses);
        EXPECT_EQ(a.trace[t].step, b.trace[t].step);
    }
    p.seed = 12;
    EXPECT_NE(optimize_universal(s.x0, s.ensemble(), p).image, a.image);
}

TEST(OptimizeUniversal, ZeroDisplacementSkipsOuterUpdate) {
    Bench s(0.0);
    const OptimizeResult r = optimize_universal(s.x0, s.ensemble(), quiet_params(3));
    EXPECT_EQ(r.skipped_outer, 3u);
    for (const auto& rec : r.trace) EXPECT_TRUE(rec.outer_skipped);
    EXPECT_EQ(r.image, s.x0);
    for (double v : r.buffers.outer.values()) EXPECT_EQ(v, 0.0);
}

TEST(OptimizeUniversal, EmptyEnsembleFails) {
    Bench s(-1.0);
    EXPECT_THROW(optimize_universal(s.x0, {}, quiet_params(1)), std::invalid_argument);
}

TEST(OptimizePgd, FirstStepsDecreaseLikeUniversal) {
    Bench s(-1.0);
    OptimizerParams u = quiet_params(1);
    u.momentum = 0.0;
    u.step_outer = 0.0;
    u.adaptive = false;
    u.step_inner = 0.05;
    PgdParams g;
    g.iterations = 1;
    g.step = 1.0 / 255.0;
    g.noise_sigma = 0.0;
    g.mask_rho = 0.0;
    g.keep_best = false;
    const OptimizeResult ru = optimize_universal(s.x0, s.ensemble(), u);
    const OptimizeResult rp = optimize_pgd(s.x0, s.ensemble()[0], g);
    EXPECT_EQ(ru.initial_loss, rp.initial_loss);
    EXPECT_LT(ru.image_loss, ru.initial_loss);
    EXPECT_LT(rp.image_loss, rp.initial_loss);
}

TEST(OptimizePgd, SignStepArithmeticAndFullBudget) {
    Bench s(-1.0);
    PgdParams g;
    g.iterations = 1;
    g.noise_sigma = 0.0;
    g.mask_rho = 0.0;
    g.keep_best = false;
    const auto member = s.ensemble()[0];
    Rng rng = make_rng(0);
    const Tensor grad = spectral_gradient(s.x0, member, 1, 0.0, 0.0, rng).grad;
    const OptimizeResult r = optimize_pgd(s.x0, member, g);
    std::size_t moved = 0;
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const double d = r.image[i] - s.x0[i];
        const double sgn = static_cast<double>((grad[i] > 0) - (grad[i] < 0));
        // Budget 255/255 never binds; only the [0, 1] clip can.
        EXPECT_EQ(r.image[i], std::clamp(s.x0[i] - g.step * sgn, 0.0, 1.0));
        const bool clipped = s.x0[i] - g.step * sgn < 0.0 || s.x0[i] - g.step * sgn > 1.0;
        if (!clipped) {
            EXPECT_TRUE(d == 0.0 || std::abs(std::abs(d) - 5.0 / 255.0) < 1e-15) << d;
            moved += d != 0.0;
        }
    }
    EXPECT_GT(moved, grad.size() / 2);
}

TEST(OptimizePgd, BudgetBinds) {
    Bench s(-3.0);
    PgdParams g;
    g.iterations = 5;
    g.budget = 2.0 / 255.0;
    g.samples = 2;
    const OptimizeResult r = optimize_pgd(s.x0, s.ensemble()[0], g);
    for (std::size_t i = 0; i < r.image.size(); ++i) EXPECT_LE(std::abs(r.image[i] - s.x0[i]), g.budget + 1e-15);
}

TEST(OptimizePgd, KeepBestReturnsLowestIterate) {
    Bench s(-1.0);
    PgdParams g;
    g.iterations = 15;
    g.step = 8.0 / 255.0;
    const OptimizeResult r = optimize_pgd(s.x0, s.ensemble()[0], g);
    double best = r.initial_loss;
    for (const auto& rec : r.trace) best = std::min(best, rec.ensemble_loss);
    EXPECT_EQ(r.image_loss, best);
    EXPECT_EQ(r.image_loss, activation_loss_value(s.models[0], r.image, s.targets[0], s.config));
}

TEST(OptimizeUniversal, StaysFiniteForFiveThousandIterations) {
    Bench s(-1.0, 1, 1);
    OptimizerParams p;
    p.iterations = 5000;
    const OptimizeResult r = optimize_universal(s.x0, s.ensemble(), p, false,
                                                [](std::size_t, const Tensor& x, const IterationRecord& rec) {
                                                    ASSERT_TRUE(x.all_finite());
                                                    ASSERT_TRUE(std::isfinite(rec.ensemble_loss));
                                                });
    EXPECT_TRUE(r.buffers.inner.all_finite());
    EXPECT_TRUE(r.buffers.outer.all_finite());
    EXPECT_LT(r.image_loss, r.initial_loss);
}
