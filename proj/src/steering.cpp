#include "visteer/steering.hpp"

#include <algorithm>
#include <random>
#include <set>
#include <stdexcept>

#include "visteer/rng.hpp"

namespace visteer {

void SteeringConfig::validate(std::size_t model_depth) const {
    if (layers.empty()) throw std::invalid_argument("steering: no layers configured");
    std::set<std::size_t> seen;
    for (std::size_t l : layers) {
        if (l >= model_depth) {
            throw std::invalid_argument("steering: layer " + std::to_string(l) + " outside model depth " +
                                        std::to_string(model_depth));
        }
        if (!seen.insert(l).second) throw std::invalid_argument("steering: layer " + std::to_string(l) + " repeated");
    }
    if (token_positions == 0) throw std::invalid_argument("steering: token_positions must be >= 1");
    if (!layer_weights.empty() && layer_weights.size() != layers.size()) {
        throw std::invalid_argument("steering: " + std::to_string(layer_weights.size()) + " layer weights for " +
                                    std::to_string(layers.size()) + " layers");
    }
    for (double w : layer_weights) {
        if (!(w > 0.0)) throw std::invalid_argument("steering: layer weights must be positive");
    }
}

const Tensor& SteeringVectorSet::at(std::size_t layer) const {
    auto it = vectors.find(layer);
    if (it == vectors.end()) throw std::out_of_range("steering: no vector for layer " + std::to_string(layer));
    return it->second;
}

Tensor baseline_image(std::size_t height, std::size_t width, std::uint64_t seed, double noise_std) {
    Tensor img({height, width, 3});
    Rng rng = make_rng(seed, "baseline-image");
    std::normal_distribution<double> noise(0.0, noise_std);
    for (double& v : img.data()) v = std::clamp(128.0 / 255.0 + (noise_std > 0 ? noise(rng) : 0.0), 0.0, 1.0);
    return img;
}

namespace {

// Mean over the last n rows of the text part for each configured layer.
std::vector<Tensor> tail_means(const ForwardOutput& out, const std::vector<std::size_t>& layers, std::size_t n) {
    std::vector<Tensor> res;
    for (std::size_t l : layers) {
        const Tensor& h = out.hidden.layers.at(l);
        const std::size_t rows = h.dim(0), d = h.dim(1);
        Tensor m({d});
        for (std::size_t t = rows - n; t < rows; ++t)
            for (std::size_t j = 0; j < d; ++j) m[j] += h.at(t, j);
        m *= 1.0 / static_cast<double>(n);
        res.push_back(std::move(m));
    }
    return res;
}

}  // namespace

SteeringVectorSet compute_steering_vector(const ToyVLM& model, const std::vector<ContrastivePair>& pairs,
                                          const SteeringConfig& config, const Tensor& baseline) {
    if (pairs.empty()) throw std::invalid_argument("compute_steering_vector: no contrastive pairs");
    config.validate(model.config().lm_layers);
    const std::size_t top = *std::max_element(config.layers.begin(), config.layers.end());
    const auto cache = model.cache_image(baseline, top);
    RunOptions opt;
    opt.max_layer = top;
    const Vocab& vocab = model.vocab();

    const std::size_t d = model.hidden_dim();
    std::vector<Tensor> acc(config.layers.size(), Tensor({d}));
    for (const auto& pair : pairs) {
        TokenIds prompt = vocab.encode(pair.prompt);
        TokenIds pos = prompt, neg = prompt;
        TokenIds a = vocab.encode(pair.positive), b = vocab.encode(pair.negative);
        if (a.empty() || b.empty()) throw std::invalid_argument("compute_steering_vector: empty answer in pair");
        pos.insert(pos.end(), a.begin(), a.end());
        neg.insert(neg.end(), b.begin(), b.end());
        if (config.token_positions > std::min(pos.size(), neg.size())) {
            throw std::invalid_argument("compute_steering_vector: last " + std::to_string(config.token_positions) +
                                        " positions exceed the sequence");
        }
        auto hp = tail_means(model.forward(cache, pos, opt), config.layers, config.token_positions);
        auto hn = tail_means(model.forward(cache, neg, opt), config.layers, config.token_positions);
        for (std::size_t i = 0; i < acc.size(); ++i) {
            acc[i] += hp[i];
            acc[i] -= hn[i];
        }
    }
    SteeringVectorSet out;
    out.hidden_dim = d;
    out.pair_count = pairs.size();
    for (std::size_t i = 0; i < acc.size(); ++i) {
        acc[i] *= 1.0 / static_cast<double>(pairs.size());
        if (!acc[i].all_finite()) throw std::runtime_error("compute_steering_vector: non-finite vector");
        out.vectors.emplace(config.layers[i], std::move(acc[i]));
    }
    return out;
}

Intervention make_intervention(const SteeringVectorSet& vectors, double multiplier, std::size_t last_n) {
    Intervention iv;
    iv.vectors = vectors.vectors;
    iv.multiplier = multiplier;
    iv.last_n = last_n;
    return iv;
}

ForwardOutput steered_forward(const ToyVLM& model, const Tensor& image, const TokenIds& tokens,
                              const SteeringVectorSet& vectors, double multiplier, std::size_t last_n) {
    if (last_n > tokens.size()) {
        throw std::invalid_argument("steered_forward: last " + std::to_string(last_n) + " positions exceed " +
                                    std::to_string(tokens.size()) + " text tokens");
    }
    const Intervention iv = make_intervention(vectors, multiplier, last_n);
    RunOptions opt;
    opt.intervention = &iv;
    return model.forward(image, tokens, opt);
}

TargetActivations get_target_activations(const ToyVLM& model, const Tensor& x0, const std::vector<TokenIds>& prompts,
                                         const SteeringVectorSet& vectors, double multiplier,
                                         const SteeringConfig& config) {
    if (prompts.empty()) throw std::invalid_argument("get_target_activations: no prompts");
    config.validate(model.config().lm_layers);
    const std::size_t top = *std::max_element(config.layers.begin(), config.layers.end());
    const auto cache = model.cache_image(x0, top);
    RunOptions opt;
    opt.max_layer = top;

    TargetActivations t;
    t.prompts = prompts;
    t.layers = config.layers;
    t.positions = config.token_positions;
    t.multiplier = multiplier;
    const std::size_t n = config.token_positions, d = model.hidden_dim();
    for (const auto& p : prompts) {
        if (n > p.size()) throw std::invalid_argument("get_target_activations: prompt shorter than token_positions");
        const ForwardOutput out = model.forward(cache, p, opt);
        std::vector<Tensor> per_layer;
        for (std::size_t l : config.layers) {
            const Tensor& h = out.hidden.layers.at(l);
            const Tensor& v = vectors.at(l);
            Tensor target({n, d});
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < d; ++j) target.at(r, j) = h.at(h.dim(0) - n + r, j) + multiplier * v[j];
            per_layer.push_back(std::move(target));
        }
        t.targets.push_back(std::move(per_layer));
    }
    return t;
}

}  // namespace visteer
