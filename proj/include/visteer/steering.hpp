#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "visteer/model.hpp"

namespace visteer {

struct SteeringConfig {
    std::vector<std::size_t> layers;
    double multiplier_pos = 1.0;
    double multiplier_neg = -1.0;
    std::size_t token_positions = 1;  // last n positions
    std::vector<double> layer_weights;  // empty means 1.0 per layer

    void validate(std::size_t model_depth) const;
    double weight(std::size_t index) const { return layer_weights.empty() ? 1.0 : layer_weights[index]; }
    bool operator==(const SteeringConfig&) const = default;
};

struct SteeringVectorSet {
    std::size_t hidden_dim = 0;
    std::size_t pair_count = 0;
    std::map<std::size_t, Tensor> vectors;  // lm layer -> [hidden_dim]

    const Tensor& at(std::size_t layer) const;
    bool operator==(const SteeringVectorSet&) const = default;
};

// Prompt plus the behavior-matching and the opposite continuation, as text.
struct ContrastivePair {
    std::string prompt;
    std::string positive;
    std::string negative;
};

// Mid-grey 128/255 with seeded N(0, noise_std^2) pixel noise, clipped to [0, 1].
Tensor baseline_image(std::size_t height, std::size_t width, std::uint64_t seed, double noise_std = 0.1);

// Mean over pairs of h(prompt + positive) - h(prompt + negative), averaged
// over the last n positions of each sequence.
SteeringVectorSet compute_steering_vector(const ToyVLM& model, const std::vector<ContrastivePair>& pairs,
                                          const SteeringConfig& config, const Tensor& baseline);

Intervention make_intervention(const SteeringVectorSet& vectors, double multiplier, std::size_t last_n);

ForwardOutput steered_forward(const ToyVLM& model, const Tensor& image, const TokenIds& tokens,
                              const SteeringVectorSet& vectors, double multiplier, std::size_t last_n);

struct TargetActivations {
    std::vector<TokenIds> prompts;
    std::vector<std::size_t> layers;
    std::size_t positions = 1;
    double multiplier = 0.0;
    // targets[j][i]: [positions, hidden_dim] for prompt j and layers[i]
    std::vector<std::vector<Tensor>> targets;

    std::size_t vector_count() const { return prompts.size() * layers.size() * positions; }
};

TargetActivations get_target_activations(const ToyVLM& model, const Tensor& x0, const std::vector<TokenIds>& prompts,
                                         const SteeringVectorSet& vectors, double multiplier,
                                         const SteeringConfig& config);

}  // namespace visteer
