#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "visteer/rng.hpp"
#include "visteer/steering.hpp"

namespace visteer {

struct OptimizerParams {
    std::size_t iterations = 2000;
    double momentum = 0.9;
    double step_inner = 100.0 / 255.0;
    double step_outer = 1.0 / 255.0;  // 0 turns the outer sign step off
    double epsilon = 1e-12;
    std::size_t spectral_samples = 20;
    double noise_sigma = 16.0;  // 0-255 pixel units
    double mask_rho = 0.5;
    bool adaptive = true;
    std::size_t patience = 3;
    bool shuffle_models = false;
    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const OptimizerParams&) const = default;
};

struct PgdParams {
    double step = 5.0 / 255.0;
    double budget = 1.0;
    std::size_t iterations = 2000;
    std::size_t samples = 1;
    double noise_sigma = 16.0;
    double mask_rho = 0.5;
    bool keep_best = true;  // return the lowest-loss iterate
    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const PgdParams&) const = default;
};

struct ScheduleState {
    double base_step = 0.0;
    double current_step = 0.0;
    std::size_t stagnation_count = 0;
    double best_loss = std::numeric_limits<double>::infinity();
    std::size_t patience = 3;

    static ScheduleState start(double base_step, std::size_t patience = 3);
    double min_step() const { return 0.1 * base_step; }
    double max_step() const { return 5.0 * base_step; }
};

// x1.1 on a new best loss, x0.8 after `patience` non-improving steps, clamped to [0.1, 5] x base.
ScheduleState adaptive_step(ScheduleState state, double new_loss);

struct MomentumBuffers {
    Tensor inner;
    Tensor outer;
};

// One model of the optimization ensemble. Targets carry the prompts.
struct EnsembleMember {
    const ToyVLM* model = nullptr;
    const TargetActivations* targets = nullptr;
    SteeringConfig config;
};

struct AugmentationSample {
    Tensor noise;  // already divided by 255
    Tensor mask;
};

Tensor sample_spectral_mask(const Shape& shape, double rho, Rng& rng);
AugmentationSample sample_augmentation(const Shape& shape, double sigma, double rho, Rng& rng);

// Layer-weighted squared distance to the targets over prompts, layers and the
// configured positions, divided by (prompts x layers). `image` is pre-preprocess.
Var activation_loss(Graph& graph, const ToyVLM& model, Var image, const TargetActivations& targets,
                    const SteeringConfig& config);
double activation_loss_value(const ToyVLM& model, const Tensor& image, const TargetActivations& targets,
                             const SteeringConfig& config);

struct GradientResult {
    Tensor grad;
    double mean_loss = 0.0;  // augmented loss averaged over samples
};

// Gradient of the loss averaged over `samples` noise + spectral-mask draws.
GradientResult spectral_gradient(const Tensor& x, const EnsembleMember& member, std::size_t samples, double sigma,
                                 double rho, Rng& rng);

struct IterationRecord {
    std::size_t iteration = 0;
    std::vector<double> model_losses;
    double ensemble_loss = 0.0;  // mean over models, un-augmented
    double step = 0.0;
    bool outer_skipped = false;
};

// Per-step buffers, kept only when asked for.
struct MomentumTrace {
    std::vector<Tensor> normalized_grads;  // one per inner step
    std::vector<Tensor> inner;             // g_inner after each inner step
    std::vector<Tensor> displacements;     // dx / |dx|_1 per iteration
    std::vector<Tensor> outer;             // g_outer per iteration
    std::vector<Tensor> origins;           // x_orig per iteration
    std::vector<Tensor> pre_clip;          // x after the outer step, before clipping
};

using ProgressFn = std::function<void(std::size_t iteration, const Tensor& image, const IterationRecord& record)>;

struct OptimizeResult {
    Tensor image;
    double initial_loss = 0.0;
    double image_loss = 0.0;  // un-augmented loss of `image`
    std::vector<IterationRecord> trace;
    MomentumBuffers buffers;
    std::size_t skipped_outer = 0;
    std::optional<MomentumTrace> momentum;
};

OptimizeResult optimize_universal(const Tensor& x0, const std::vector<EnsembleMember>& ensemble,
                                  const OptimizerParams& params, bool record_momentum = false,
                                  const ProgressFn& progress = {});

OptimizeResult optimize_pgd(const Tensor& x0, const EnsembleMember& member, const PgdParams& params,
                            const ProgressFn& progress = {});

// Loss of the image for every member, without augmentation.
std::vector<double> ensemble_losses(const Tensor& image, const std::vector<EnsembleMember>& ensemble);

}  // namespace visteer
