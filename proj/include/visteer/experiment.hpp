#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "visteer/corpus.hpp"
#include "visteer/evaluation.hpp"
#include "visteer/optimizer.hpp"

namespace visteer {

// Planted behavior circuit shared by every model of the experiment. The
// direction is drawn inside the image-reachable subspace of the family base model.
struct PlantSpec {
    bool enabled = true;
    std::size_t layer = 3;
    double coupling = 2.0;
    double write_scale = 0.15;
    std::size_t direction_rank = 8;
    std::uint64_t direction_seed = 11;
    std::size_t probe_prompts = 4;
    bool operator==(const PlantSpec&) const = default;
};

struct CorpusSpec {
    Behavior behavior = Behavior::Refusal;
    std::size_t train = 320;
    std::size_t test = 128;
    std::uint64_t seed = 1;
    std::size_t pairs = 64;  // contrastive pairs used for extraction
    bool operator==(const CorpusSpec&) const = default;
};

struct BaselineSpec {
    std::size_t size = kCanonicalSize;
    std::uint64_t seed = 5;
    double noise = 0.1;
    bool operator==(const BaselineSpec&) const = default;
};

enum class OptimizeMode { Universal, Pgd };

struct OptimizeSpec {
    OptimizeMode mode = OptimizeMode::Universal;
    bool negative = true;      // steer with multiplier_neg, else multiplier_pos
    std::size_t prompts = 4;   // N_p training prompts per model
    std::size_t checkpoint_every = 0;
    double convergence_ratio = 0.1;  // final / initial loss needed for a zero exit status
    OptimizerParams universal;
    PgdParams pgd;
    bool operator==(const OptimizeSpec&) const = default;
};

struct EvalSpec {
    std::vector<std::string> methods{"none", "system_prompt", "steering_vector", "image"};
    std::uint64_t random_seed = 99;
    std::vector<std::uint64_t> heldout_seeds;  // held-out member i copies models[i % K] with this seed
    std::size_t unrelated_tasks = 14000;
    std::uint64_t task_seed = 3;
    bool operator==(const EvalSpec&) const = default;
};

struct ModelEntry {
    ModelConfig config;
    std::optional<SteeringConfig> steering;  // overrides the shared one
    bool operator==(const ModelEntry&) const = default;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;  // optimizer randomness
    std::string output = "runs/demo";
    std::uint64_t family_seed = 7;
    double family_variation = 0.5;
    PlantSpec plant;
    std::vector<ModelEntry> models;
    CorpusSpec corpus;
    BaselineSpec baseline;
    SteeringConfig steering;
    OptimizeSpec optimize;
    EvalSpec eval;

    void validate() const;
    const SteeringConfig& steering_for(std::size_t model) const;
    bool operator==(const ExperimentConfig&) const = default;
};

ExperimentConfig parse_config(const std::string& text, const std::string& source = "config");
ExperimentConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const ExperimentConfig& config);

// Lazily built models, corpus and vectors for one experiment config.
class Lab {
public:
    explicit Lab(ExperimentConfig config);

    const ExperimentConfig& config() const { return config_; }
    const Tensor& baseline();
    const CorpusSplit& corpus();
    void set_corpus(CorpusSplit corpus);
    const Tensor& planted_direction();

    std::size_t model_count() const { return config_.models.size(); }
    const ToyVLM& model(std::size_t i);
    std::size_t heldout_count() const { return config_.eval.heldout_seeds.size(); }
    const ToyVLM& heldout(std::size_t i);
    std::size_t model_index(const std::string& name) const;

    const SteeringVectorSet& vectors(std::size_t i);
    void set_vectors(std::size_t i, SteeringVectorSet v);
    double multiplier(std::size_t i) const;

    // N_p training prompts for optimization: the train examples after the extraction pairs.
    std::vector<TokenIds> optimization_prompts(std::size_t i);
    const TargetActivations& targets(std::size_t i);
    EnsembleMember member(std::size_t i);

    OptimizeResult optimize_universal(const std::vector<std::size_t>& models, const ProgressFn& progress = {},
                                      bool record_momentum = false);
    OptimizeResult optimize_pgd(std::size_t model, const ProgressFn& progress = {});

private:
    ToyVLM build(ModelConfig c);

    ExperimentConfig config_;
    std::optional<Tensor> baseline_;
    std::optional<CorpusSplit> corpus_;
    std::optional<Tensor> direction_;
    std::map<std::size_t, std::unique_ptr<ToyVLM>> models_, heldout_;
    std::map<std::size_t, SteeringVectorSet> vectors_;
    std::map<std::size_t, TargetActivations> targets_;
};

// The two-model desk-scale demo.
ExperimentConfig demo_config();

}  // namespace visteer
