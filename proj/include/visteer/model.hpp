#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "visteer/graph.hpp"
#include "visteer/preprocess.hpp"
#include "visteer/vocab.hpp"

namespace visteer {

inline constexpr std::size_t kAttentionHeads = 4;
inline constexpr std::size_t kMlpRatio = 4;
// Vision positional embeddings cover at most an 8 x 8 patch grid.
inline constexpr std::size_t kMaxPatchGrid = 8;
inline constexpr double kInitScale = 0.02;

// Hard-wired multiple-choice head for prompts carrying the task cue. Option k
// gets strength * [k is keyed] + noise * z_k + readout * <f, u_k>, where z_k is a
// standard normal drawn from the model seed and the prompt tokens (fixed task
// difficulty) and f is the final normalized hidden state at the head position.
struct TaskHeadConfig {
    double strength = 0.8;
    double noise = 1.0;
    double readout = 0.1;
    bool operator==(const TaskHeadConfig&) const = default;
};

struct ModelConfig {
    std::string name = "model";
    std::uint64_t seed = 0;
    // Models sharing a family draw every weight from a common base; `variation`
    // is the relative size of the member-specific part.
    std::optional<std::uint64_t> family_seed;
    double variation = 0.0;
    std::size_t patch_size = 8;
    std::size_t vision_layers = 2;
    std::size_t lm_layers = 6;
    std::size_t hidden_dim = 64;
    std::size_t visual_token_count = 16;
    std::size_t max_text_len = 96;
    std::vector<std::string> vocab = default_vocab_words();
    PreprocessSpec preprocess;
    TaskHeadConfig task_head;

    void validate() const;
    std::size_t patch_grid() const { return preprocess.input_height / patch_size; }
    bool operator==(const ModelConfig&) const = default;
};

// Ground-truth behavior circuit wired into a model after build.
struct PlantedBehavior {
    std::size_t layer = 0;
    Tensor direction;           // unit, length hidden_dim
    double coupling = 0.0;      // readout gain onto the (A)/(B) logits
    double write_scale = 0.15;  // how strongly the circuit writes the direction
    std::vector<int> polarity;  // per vocab id: +1 behavior marker, -1 counter marker, 0 neither
};

// What the planted circuit reads off a token sequence.
struct BehaviorCues {
    int key = 0;           // +1: option (A) is behavior-matching, -1: option (B), 0: no behavioral choice
    double instruction = 0.0;  // marker balance before the options
    int answer_sign = 0;   // final token is an answer letter: +1 matching, -1 not matching
};

// +1 for behavior markers, -1 for counter markers, over one behavior's lexicon or all of them.
std::vector<int> marker_polarity(const Vocab& vocab, std::optional<Behavior> behavior = std::nullopt);

BehaviorCues read_behavior_cues(const TokenIds& tokens, const std::vector<int>& polarity, const Vocab& vocab);

// Correct option (0..3) the task head assigns to a multiple-choice prompt.
std::size_t task_answer_key(const TokenIds& tokens, const Vocab& vocab);

struct HiddenStates {
    std::size_t visual_tokens = 0;
    std::vector<Tensor> layers;  // per lm layer: [visual + text, hidden_dim]
};

struct ForwardOutput {
    Tensor logits;  // [text length, vocab]
    HiddenStates hidden;
};

// Additive edit of the residual stream: h_l[t] += multiplier * v_l for the
// last `last_n` text positions ending at the head position.
struct Intervention {
    std::map<std::size_t, Tensor> vectors;
    double multiplier = 0.0;
    std::size_t last_n = 1;
};

struct RunOptions {
    const Intervention* intervention = nullptr;
    // Stop after this lm layer; logits are not produced.
    std::optional<std::size_t> max_layer;
    // Position whose logits the planted and task heads write to. Defaults to the last.
    std::optional<std::size_t> head_position;
};

class ToyVLM {
public:
    static ToyVLM build(const ModelConfig& config);
    static ToyVLM from_parameters(const ModelConfig& config, std::map<std::string, Tensor> params);

    const ModelConfig& config() const { return config_; }
    const Vocab& vocab() const { return vocab_; }
    std::size_t hidden_dim() const { return config_.hidden_dim; }

    std::map<std::string, Tensor> parameters() const;
    std::size_t parameter_count() const;
    const std::vector<PlantedBehavior>& planted() const { return planted_; }
    const std::vector<std::string>& warnings() const { return warnings_; }

    // Copy with one more planted circuit. A non-unit direction is normalized and a warning recorded.
    ToyVLM with_planted(std::size_t layer, Tensor direction, double coupling,
                        std::optional<double> write_scale = std::nullopt,
                        std::optional<std::vector<int>> polarity = std::nullopt) const;

    // Graph-level passes. The image goes through the model's preprocess first.
    struct Prefix {
        std::size_t tokens = 0;
        std::size_t layers = 0;
        std::vector<Var> hidden;  // per lm layer, visual rows
        std::vector<Var> keys;
        std::vector<Var> values;
    };
    struct TextPass {
        std::vector<Var> hidden;  // per computed lm layer, text rows
        std::optional<Var> logits;
    };

    // Detached prefix values for one image, reusable across many text passes.
    struct VisualCache {
        std::size_t tokens = 0;
        std::vector<Tensor> hidden, keys, values;
    };

    Prefix encode_image(Graph& graph, Var image, std::optional<std::size_t> max_layer = std::nullopt) const;
    VisualCache cache_image(const Tensor& image, std::optional<std::size_t> max_layer = std::nullopt) const;
    Prefix attach(Graph& graph, const VisualCache& cache) const;
    TextPass run_text(Graph& graph, const Prefix& prefix, const TokenIds& tokens,
                      const RunOptions& options = {}) const;

    ForwardOutput forward(const Tensor& image, const TokenIds& tokens, const RunOptions& options = {}) const;
    ForwardOutput forward(const VisualCache& cache, const TokenIds& tokens, const RunOptions& options = {}) const;
    // Logits row at the head position only; the cheap path for answer scoring.
    Tensor head_logits(const VisualCache& cache, const TokenIds& tokens, const RunOptions& options = {}) const;

private:
    struct Block {
        std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };

    ToyVLM() = default;
    void layout();
    std::size_t add_param(const std::string& name, Shape shape);
    Var param(Graph& graph, std::size_t index) const { return graph.constant_ref(params_[index]); }
    Var block(Graph& graph, const Block& b, Var x, const Var* k_prefix, const Var* v_prefix,
              bool causal, std::size_t offset, Var* k_out, Var* v_out) const;

    ModelConfig config_;
    Vocab vocab_;
    std::vector<std::string> names_;
    std::vector<Shape> shapes_;
    std::vector<Tensor> params_;
    std::vector<Block> vision_blocks_, lm_blocks_;
    std::size_t patch_w_ = 0, patch_b_ = 0, vision_pos_ = 0, vision_ln_g_ = 0, vision_ln_b_ = 0;
    std::size_t proj_w1_ = 0, proj_b1_ = 0, proj_w2_ = 0, proj_b2_ = 0;
    std::size_t tok_emb_ = 0, pos_emb_ = 0, final_ln_g_ = 0, final_ln_b_ = 0, unembed_ = 0, task_dirs_ = 0;
    Tensor pool_;  // [visual tokens, patches], empty when no pooling
    std::vector<PlantedBehavior> planted_;
    std::vector<std::string> warnings_;
};

// Sum of causal log-softmax over the continuation tokens given image + prompt.
// The planted and task heads read at the last prompt position; steering in
// `options` is anchored there too.
double sequence_logprob(const ToyVLM& model, const ToyVLM::VisualCache& cache, const TokenIds& prompt,
                        const TokenIds& continuation, const RunOptions& options = {});
double sequence_logprob(const ToyVLM& model, const Tensor& image, std::string_view prompt,
                        std::string_view continuation, const RunOptions& options = {});

// Seeded unit vector.
Tensor random_unit_vector(std::size_t dim, std::uint64_t seed);

// Seeded unit vector inside the span of the top `rank` eigenvectors of
// sum_p J_p J_p^T, where J_p is the Jacobian of the last-position hidden state
// at `layer` with respect to `image` for probe prompt p. These are the
// directions an input image can move most cheaply.
Tensor image_reachable_direction(const ToyVLM& model, std::size_t layer, const Tensor& image,
                                 const std::vector<TokenIds>& probes, std::size_t rank, std::uint64_t seed);

// Default desk-scale model pair: 16 visual tokens at 32x32 vs 4 pooled tokens at 48x48.
ModelConfig default_model_a();
ModelConfig default_model_b();

}  // namespace visteer
