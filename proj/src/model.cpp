#include "visteer/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Eigenvalues>

#include "visteer/rng.hpp"

namespace visteer {

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::vector<int> marker_polarity(const Vocab& vocab, std::optional<Behavior> behavior) {
    std::vector<int> pol(vocab.size(), 0);
    for (Behavior b : kAllBehaviors) {
        if (behavior && *behavior != b) continue;
        const auto& lex = behavior_lexicon(b);
        for (const auto& w : lex.positive_markers)
            if (vocab.contains(w)) pol[vocab.id(w)] = 1;
        for (const auto& w : lex.negative_markers)
            if (vocab.contains(w)) pol[vocab.id(w)] = -1;
    }
    return pol;
}

void ModelConfig::validate() const {
    if (hidden_dim == 0 || hidden_dim % kAttentionHeads != 0) {
        throw std::invalid_argument("model '" + name + "': hidden_dim " + std::to_string(hidden_dim) +
                                    " must be a positive multiple of " + std::to_string(kAttentionHeads));
    }
    if (lm_layers == 0) throw std::invalid_argument("model '" + name + "': lm_layers must be >= 1");
    if (max_text_len == 0) throw std::invalid_argument("model '" + name + "': max_text_len must be >= 1");
    if (!(variation >= 0.0)) throw std::invalid_argument("model '" + name + "': variation must be >= 0");
    preprocess.validate();
    if (patch_size == 0 || preprocess.input_height % patch_size != 0 ||
        preprocess.input_width % patch_size != 0) {
        throw std::invalid_argument("model '" + name + "': patch size " + std::to_string(patch_size) +
                                    " does not tile the input resolution");
    }
    const std::size_t gh = preprocess.input_height / patch_size;
    const std::size_t gw = preprocess.input_width / patch_size;
    if (gh > kMaxPatchGrid || gw > kMaxPatchGrid) {
        throw std::invalid_argument("model '" + name + "': patch grid exceeds " +
                                    std::to_string(kMaxPatchGrid) + "x" + std::to_string(kMaxPatchGrid));
    }
    if (visual_token_count != gh * gw) {
        const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(visual_token_count))));
        if (gh != gw || side == 0 || side * side != visual_token_count || gh % side != 0) {
            throw std::invalid_argument("model '" + name + "': " + std::to_string(visual_token_count) +
                                        " visual tokens cannot be pooled from a " + std::to_string(gh) +
                                        "x" + std::to_string(gw) + " patch grid");
        }
    }
    Vocab check(vocab);
    (void)check;
}

BehaviorCues read_behavior_cues(const TokenIds& tokens, const std::vector<int>& polarity, const Vocab& vocab) {
    BehaviorCues cues;
    const std::size_t n = tokens.size();
    const bool answered = n >= 2 && (tokens[n - 1] == vocab.answer_a() || tokens[n - 1] == vocab.answer_b()) &&
                          vocab.word(tokens[n - 2]) == ":";
    const std::size_t scan = answered ? n - 1 : n;
    enum { Preamble, OptionA, OptionB, Other } segment = Preamble;
    for (std::size_t i = 0; i < scan; ++i) {
        const std::size_t t = tokens[i];
        if (t == vocab.answer_a()) {
            segment = OptionA;
        } else if (t == vocab.answer_b()) {
            segment = OptionB;
        } else if (vocab.is_option(t) || vocab.word(t) == kAnswerCue) {
            segment = Other;
        } else {
            const int pol = t < polarity.size() ? polarity[t] : 0;
            if (segment == Preamble) {
                cues.instruction += pol;
            } else if (pol > 0 && cues.key == 0 && segment == OptionA) {
                cues.key = 1;
            } else if (pol > 0 && cues.key == 0 && segment == OptionB) {
                cues.key = -1;
            }
        }
    }
    if (answered && cues.key != 0) {
        cues.answer_sign = tokens[n - 1] == vocab.answer_a() ? cues.key : -cues.key;
    }
    return cues;
}

std::size_t task_answer_key(const TokenIds& tokens, const Vocab& vocab) {
    std::size_t s = 0;
    for (std::size_t t : tokens) {
        if (vocab.word(t) == "?") break;
        s += t;
    }
    return s % 4;
}

Tensor random_unit_vector(std::size_t dim, std::uint64_t seed) {
    Rng rng = make_rng(seed, "unit-vector");
    std::normal_distribution<double> nd(0.0, 1.0);
    Tensor v({dim});
    for (double& x : v.values()) x = nd(rng);
    v *= 1.0 / l2_norm(v.data());
    return v;
}

std::size_t ToyVLM::add_param(const std::string& name, Shape shape) {
    names_.push_back(name);
    shapes_.push_back(std::move(shape));
    return names_.size() - 1;
}

void ToyVLM::layout() {
    const std::size_t d = config_.hidden_dim;
    const std::size_t p = config_.patch_size;
    auto make_block = [&](const std::string& pre) {
        Block b{};
        b.ln1_g = add_param(pre + ".ln1.g", {d});
        b.ln1_b = add_param(pre + ".ln1.b", {d});
        b.wq = add_param(pre + ".attn.wq", {d, d});
        b.bq = add_param(pre + ".attn.bq", {d});
        b.wk = add_param(pre + ".attn.wk", {d, d});
        b.bk = add_param(pre + ".attn.bk", {d});
        b.wv = add_param(pre + ".attn.wv", {d, d});
        b.bv = add_param(pre + ".attn.bv", {d});
        b.wo = add_param(pre + ".attn.wo", {d, d});
        b.bo = add_param(pre + ".attn.bo", {d});
        b.ln2_g = add_param(pre + ".ln2.g", {d});
        b.ln2_b = add_param(pre + ".ln2.b", {d});
        b.w1 = add_param(pre + ".mlp.w1", {d, kMlpRatio * d});
        b.b1 = add_param(pre + ".mlp.b1", {kMlpRatio * d});
        b.w2 = add_param(pre + ".mlp.w2", {kMlpRatio * d, d});
        b.b2 = add_param(pre + ".mlp.b2", {d});
        return b;
    };
    patch_w_ = add_param("vision.patch.w", {p * p * 3, d});
    patch_b_ = add_param("vision.patch.b", {d});
    vision_pos_ = add_param("vision.pos", {kMaxPatchGrid * kMaxPatchGrid, d});
    for (std::size_t i = 0; i < config_.vision_layers; ++i)
        vision_blocks_.push_back(make_block("vision.block" + std::to_string(i)));
    vision_ln_g_ = add_param("vision.ln.g", {d});
    vision_ln_b_ = add_param("vision.ln.b", {d});
    proj_w1_ = add_param("proj.w1", {d, d});
    proj_b1_ = add_param("proj.b1", {d});
    proj_w2_ = add_param("proj.w2", {d, d});
    proj_b2_ = add_param("proj.b2", {d});
    tok_emb_ = add_param("lm.tok", {vocab_.size(), d});
    pos_emb_ = add_param("lm.pos", {config_.visual_token_count + config_.max_text_len, d});
    for (std::size_t i = 0; i < config_.lm_layers; ++i)
        lm_blocks_.push_back(make_block("lm.block" + std::to_string(i)));
    final_ln_g_ = add_param("lm.ln.g", {d});
    final_ln_b_ = add_param("lm.ln.b", {d});
    unembed_ = add_param("lm.unembed", {d, vocab_.size()});
    task_dirs_ = add_param("task.dirs", {d, 4});

    const std::size_t grid = config_.patch_grid();
    const std::size_t patches = grid * (config_.preprocess.input_width / p);
    if (config_.visual_token_count != patches) {
        const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(config_.visual_token_count))));
        const std::size_t k = grid / side;
        pool_ = Tensor({config_.visual_token_count, patches});
        const double w = 1.0 / static_cast<double>(k * k);
        for (std::size_t r = 0; r < grid; ++r)
            for (std::size_t c = 0; c < grid; ++c) pool_.at((r / k) * side + c / k, r * grid + c) = w;
    }
}

ToyVLM ToyVLM::build(const ModelConfig& config) {
    config.validate();
    ToyVLM m;
    m.config_ = config;
    m.vocab_ = Vocab(config.vocab);
    m.layout();

    const std::uint64_t base_seed = config.family_seed.value_or(config.seed);
    const double var = config.family_seed ? config.variation : 0.0;
    const double norm = 1.0 / std::sqrt(1.0 + var * var);
    std::normal_distribution<double> nd(0.0, 1.0);
    m.params_.reserve(m.names_.size());
    for (std::size_t i = 0; i < m.names_.size(); ++i) {
        const std::string& name = m.names_[i];
        Tensor t(m.shapes_[i]);
        if (ends_with(name, ".g")) {
            for (double& v : t.values()) v = 1.0;
        } else if (!ends_with(name, ".b") && !ends_with(name, ".b1") && !ends_with(name, ".b2") &&
                   !ends_with(name, ".bq") && !ends_with(name, ".bk") && !ends_with(name, ".bv") &&
                   !ends_with(name, ".bo")) {
            Rng base = make_rng(base_seed, name);
            for (double& v : t.values()) v = nd(base);
            if (var > 0.0) {
                Rng member = make_rng(config.seed, name + "#member");
                for (double& v : t.values()) v += var * nd(member);
            }
            t *= kInitScale * norm;
        }
        m.params_.push_back(std::move(t));
    }

    // Answer-option tokens get no base preference; only the planted and task heads move them.
    Tensor& unembed = m.params_[m.unembed_];
    for (std::size_t row = 0; row < unembed.dim(0); ++row)
        for (std::size_t opt : m.vocab_.options()) unembed.at(row, opt) = 0.0;
    Tensor& dirs = m.params_[m.task_dirs_];
    for (std::size_t c = 0; c < 4; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < dirs.dim(0); ++r) s += dirs.at(r, c) * dirs.at(r, c);
        for (std::size_t r = 0; r < dirs.dim(0); ++r) dirs.at(r, c) /= std::sqrt(s);
    }
    return m;
}

ToyVLM ToyVLM::from_parameters(const ModelConfig& config, std::map<std::string, Tensor> params) {
    config.validate();
    ToyVLM m;
    m.config_ = config;
    m.vocab_ = Vocab(config.vocab);
    m.layout();
    for (std::size_t i = 0; i < m.names_.size(); ++i) {
        auto it = params.find(m.names_[i]);
        if (it == params.end()) throw std::invalid_argument("checkpoint: missing parameter '" + m.names_[i] + "'");
        if (it->second.shape() != m.shapes_[i]) {
            throw ShapeError("checkpoint: parameter '" + m.names_[i] + "' has shape " +
                             shape_str(it->second.shape()) + ", expected " + shape_str(m.shapes_[i]));
        }
        if (!it->second.all_finite()) {
            throw std::invalid_argument("checkpoint: parameter '" + m.names_[i] + "' is not finite");
        }
        m.params_.push_back(std::move(it->second));
    }
    if (params.size() != m.names_.size()) throw std::invalid_argument("checkpoint: unexpected extra parameters");
    return m;
}

std::map<std::string, Tensor> ToyVLM::parameters() const {
    std::map<std::string, Tensor> out;
    for (std::size_t i = 0; i < names_.size(); ++i) out.emplace(names_[i], params_[i]);
    return out;
}

std::size_t ToyVLM::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
}

ToyVLM ToyVLM::with_planted(std::size_t layer, Tensor direction, double coupling,
                            std::optional<double> write_scale, std::optional<std::vector<int>> polarity) const {
    if (layer >= config_.lm_layers) {
        throw std::invalid_argument("plant_behavior: layer " + std::to_string(layer) + " outside " +
                                    std::to_string(config_.lm_layers) + " lm layers");
    }
    if (direction.size() != hidden_dim()) {
        throw ShapeError("plant_behavior: direction has " + std::to_string(direction.size()) +
                         " entries, hidden_dim is " + std::to_string(hidden_dim()));
    }
    ToyVLM m = *this;
    const double nrm = l2_norm(direction.data());
    if (!(nrm > 0.0) || !std::isfinite(nrm)) throw std::invalid_argument("plant_behavior: zero direction");
    if (std::abs(nrm - 1.0) > 1e-9) {
        m.warnings_.push_back("plant_behavior: direction norm " + std::to_string(nrm) + " normalized to 1");
        direction *= 1.0 / nrm;
    }
    PlantedBehavior p;
    p.layer = layer;
    p.direction = direction.reshaped({hidden_dim()});
    p.coupling = coupling;
    if (write_scale) p.write_scale = *write_scale;
    p.polarity = polarity ? std::move(*polarity) : marker_polarity(vocab_);
    if (p.polarity.size() != vocab_.size()) throw std::invalid_argument("plant_behavior: polarity/vocab size mismatch");
    m.planted_.push_back(std::move(p));
    return m;
}

Var ToyVLM::block(Graph& g, const Block& b, Var x, const Var* k_prefix, const Var* v_prefix, bool causal,
                  std::size_t offset, Var* k_out, Var* v_out) const {
    Var a = add(mul(layer_norm(x), param(g, b.ln1_g)), param(g, b.ln1_b));
    Var q = add(matmul(a, param(g, b.wq)), param(g, b.bq));
    Var k = add(matmul(a, param(g, b.wk)), param(g, b.bk));
    Var v = add(matmul(a, param(g, b.wv)), param(g, b.bv));
    if (k_out) *k_out = k;
    if (v_out) *v_out = v;
    Var keys = k_prefix ? concat_rows({*k_prefix, k}) : k;
    Var vals = v_prefix ? concat_rows({*v_prefix, v}) : v;
    Var att = attention(q, keys, vals, kAttentionHeads, causal, offset);
    x = add(x, add(matmul(att, param(g, b.wo)), param(g, b.bo)));
    Var m = add(mul(layer_norm(x), param(g, b.ln2_g)), param(g, b.ln2_b));
    Var h = gelu(add(matmul(m, param(g, b.w1)), param(g, b.b1)));
    return add(x, add(matmul(h, param(g, b.w2)), param(g, b.b2)));
}

ToyVLM::Prefix ToyVLM::encode_image(Graph& g, Var image, std::optional<std::size_t> max_layer) const {
    const std::size_t layers = max_layer ? std::min(*max_layer + 1, config_.lm_layers) : config_.lm_layers;
    Var x = preprocess(image, config_.preprocess);
    x = add(matmul(patchify(x, config_.patch_size), param(g, patch_w_)), param(g, patch_b_));
    const std::size_t gh = config_.patch_grid();
    const std::size_t gw = config_.preprocess.input_width / config_.patch_size;
    std::vector<std::size_t> grid_ids;
    for (std::size_t r = 0; r < gh; ++r)
        for (std::size_t c = 0; c < gw; ++c) grid_ids.push_back(r * kMaxPatchGrid + c);
    x = add(x, embed(param(g, vision_pos_), grid_ids));
    for (const Block& b : vision_blocks_) x = block(g, b, x, nullptr, nullptr, false, 0, nullptr, nullptr);
    x = add(mul(layer_norm(x), param(g, vision_ln_g_)), param(g, vision_ln_b_));
    if (pool_.size() > 0) x = matmul(g.constant_ref(pool_), x);
    x = add(matmul(gelu(add(matmul(x, param(g, proj_w1_)), param(g, proj_b1_))), param(g, proj_w2_)),
            param(g, proj_b2_));
    std::vector<std::size_t> pos(config_.visual_token_count);
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
    x = add(x, embed(param(g, pos_emb_), pos));

    Prefix p;
    p.tokens = config_.visual_token_count;
    p.layers = layers;
    for (std::size_t l = 0; l < layers; ++l) {
        Var k, v;
        x = block(g, lm_blocks_[l], x, nullptr, nullptr, true, 0, &k, &v);
        p.hidden.push_back(x);
        p.keys.push_back(k);
        p.values.push_back(v);
    }
    return p;
}

ToyVLM::TextPass ToyVLM::run_text(Graph& g, const Prefix& prefix, const TokenIds& tokens,
                                  const RunOptions& opt) const {
    const std::size_t n = tokens.size();
    if (n == 0) throw std::invalid_argument("forward: empty token sequence");
    if (n > config_.max_text_len) {
        throw std::invalid_argument("forward: " + std::to_string(n) + " text tokens exceed max_text_len " +
                                    std::to_string(config_.max_text_len));
    }
    for (std::size_t t : tokens) {
        if (t >= vocab_.size()) {
            throw std::out_of_range("forward: token id " + std::to_string(t) + " out of range for vocab of " +
                                    std::to_string(vocab_.size()));
        }
    }
    const std::size_t head = opt.head_position.value_or(n - 1);
    if (head >= n) throw std::out_of_range("forward: head position past the end of the sequence");
    const std::size_t layers = opt.max_layer ? std::min(*opt.max_layer + 1, config_.lm_layers) : config_.lm_layers;
    if (prefix.layers < layers) throw std::invalid_argument("forward: visual prefix is shallower than requested");
    if (opt.intervention) {
        const auto& iv = *opt.intervention;
        if (iv.last_n == 0 || iv.last_n > head + 1) {
            throw std::invalid_argument("steering: last " + std::to_string(iv.last_n) + " positions exceed the " +
                                        std::to_string(head + 1) + " text positions available");
        }
        for (const auto& [layer, vec] : iv.vectors) {
            if (layer >= config_.lm_layers || vec.size() != hidden_dim()) {
                throw std::invalid_argument("steering: vector for layer " + std::to_string(layer) +
                                            " does not fit this model");
            }
        }
    }

    const std::size_t d = hidden_dim();
    const std::size_t vis = prefix.tokens;
    std::vector<std::size_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = vis + i;
    Var x = add(embed(param(g, tok_emb_), tokens), embed(param(g, pos_emb_), pos));

    std::vector<BehaviorCues> cues;
    for (const auto& p : planted_) cues.push_back(read_behavior_cues(tokens, p.polarity, vocab_));

    TextPass out;
    for (std::size_t l = 0; l < layers; ++l) {
        x = block(g, lm_blocks_[l], x, &prefix.keys[l], &prefix.values[l], true, vis, nullptr, nullptr);
        for (std::size_t i = 0; i < planted_.size(); ++i) {
            const auto& p = planted_[i];
            const auto& c = cues[i];
            if (p.layer != l || (c.instruction == 0.0 && c.answer_sign == 0)) continue;
            Tensor edit({n, d});
            for (std::size_t j = 0; j < d; ++j) {
                edit.at(head, j) += p.write_scale * c.instruction * p.direction[j];
                edit.at(n - 1, j) += p.write_scale * c.answer_sign * p.direction[j];
            }
            x = add(x, g.constant(std::move(edit)));
        }
        if (opt.intervention) {
            auto it = opt.intervention->vectors.find(l);
            if (it != opt.intervention->vectors.end()) {
                Tensor edit({n, d});
                for (std::size_t t = head + 1 - opt.intervention->last_n; t <= head; ++t)
                    for (std::size_t j = 0; j < d; ++j) edit.at(t, j) = opt.intervention->multiplier * it->second[j];
                x = add(x, g.constant(std::move(edit)));
            }
        }
        out.hidden.push_back(x);
    }
    if (opt.max_layer) return out;

    const std::size_t vsize = vocab_.size();
    Var f = add(mul(layer_norm(x), param(g, final_ln_g_)), param(g, final_ln_b_));
    Var logits = matmul(f, param(g, unembed_));

    std::optional<Var> extra;
    auto accumulate = [&](Var v) { extra = extra ? add(*extra, v) : v; };
    for (std::size_t i = 0; i < planted_.size(); ++i) {
        const auto& p = planted_[i];
        if (cues[i].key == 0 || p.coupling == 0.0) continue;
        Var proj = matmul(slice_rows(out.hidden[p.layer], head, head + 1),
                          g.constant(p.direction.reshaped({d, 1})));
        Tensor row({1, vsize});
        row.at(0, vocab_.answer_a()) = p.coupling * cues[i].key;
        row.at(0, vocab_.answer_b()) = -p.coupling * cues[i].key;
        accumulate(matmul(proj, g.constant(std::move(row))));
    }
    const bool task_prompt = vocab_.contains(kTaskCue) &&
                             std::find(tokens.begin(), tokens.end(), vocab_.id(kTaskCue)) != tokens.end();
    if (task_prompt) {
        Tensor scatter({4, vsize});
        for (std::size_t k = 0; k < 4; ++k) scatter.at(k, vocab_.options()[k]) = 1.0;
        const auto& th = config_.task_head;
        Var readout = scale(matmul(slice_rows(f, head, head + 1), param(g, task_dirs_)), th.readout);
        Tensor bonus({1, 4});
        std::string tag = "task";
        for (std::size_t id : tokens) tag += "/" + std::to_string(id);
        Rng rng = make_rng(config_.seed, tag);
        std::normal_distribution<double> nd;
        for (std::size_t k = 0; k < 4; ++k) bonus.at(0, k) = th.noise * nd(rng);
        bonus.at(0, task_answer_key(tokens, vocab_)) += th.strength;
        accumulate(matmul(add(readout, g.constant(std::move(bonus))), g.constant(std::move(scatter))));
    }
    if (extra) {
        std::vector<Var> parts;
        if (head > 0) parts.push_back(slice_rows(logits, 0, head));
        parts.push_back(add(slice_rows(logits, head, head + 1), *extra));
        if (head + 1 < n) parts.push_back(slice_rows(logits, head + 1, n));
        logits = parts.size() == 1 ? parts[0] : concat_rows(parts);
    }
    out.logits = logits;
    return out;
}

ToyVLM::VisualCache ToyVLM::cache_image(const Tensor& image, std::optional<std::size_t> max_layer) const {
    Graph g;
    Prefix p = encode_image(g, g.constant_ref(image), max_layer);
    VisualCache c;
    c.tokens = p.tokens;
    for (std::size_t l = 0; l < p.layers; ++l) {
        c.hidden.push_back(p.hidden[l].value());
        c.keys.push_back(p.keys[l].value());
        c.values.push_back(p.values[l].value());
    }
    return c;
}

ToyVLM::Prefix ToyVLM::attach(Graph& g, const VisualCache& cache) const {
    Prefix p;
    p.tokens = cache.tokens;
    p.layers = cache.hidden.size();
    for (std::size_t l = 0; l < p.layers; ++l) {
        p.hidden.push_back(g.constant_ref(cache.hidden[l]));
        p.keys.push_back(g.constant_ref(cache.keys[l]));
        p.values.push_back(g.constant_ref(cache.values[l]));
    }
    return p;
}

namespace {

ForwardOutput collect(const ToyVLM::Prefix& prefix, const ToyVLM::TextPass& pass) {
    ForwardOutput out;
    out.hidden.visual_tokens = prefix.tokens;
    for (std::size_t l = 0; l < pass.hidden.size(); ++l) {
        const Tensor& v = prefix.hidden[l].value();
        const Tensor& t = pass.hidden[l].value();
        std::vector<double> rows(v.values());
        rows.insert(rows.end(), t.values().begin(), t.values().end());
        out.hidden.layers.emplace_back(Shape{v.dim(0) + t.dim(0), v.dim(1)}, std::move(rows));
    }
    if (pass.logits) out.logits = pass.logits->value();
    return out;
}

}  // namespace

ForwardOutput ToyVLM::forward(const Tensor& image, const TokenIds& tokens, const RunOptions& options) const {
    Graph g;
    Prefix prefix = encode_image(g, g.constant_ref(image), options.max_layer);
    return collect(prefix, run_text(g, prefix, tokens, options));
}

ForwardOutput ToyVLM::forward(const VisualCache& cache, const TokenIds& tokens, const RunOptions& options) const {
    Graph g;
    Prefix prefix = attach(g, cache);
    return collect(prefix, run_text(g, prefix, tokens, options));
}

Tensor ToyVLM::head_logits(const VisualCache& cache, const TokenIds& tokens, const RunOptions& options) const {
    if (options.max_layer) throw std::invalid_argument("head_logits: logits need the full depth");
    Graph g;
    Prefix prefix = attach(g, cache);
    TextPass pass = run_text(g, prefix, tokens, options);
    return pass.logits->value().row(options.head_position.value_or(tokens.size() - 1));
}

ModelConfig default_model_a() {
    ModelConfig c;
    c.name = "model_a";
    c.seed = 101;
    c.family_seed = 7;
    c.variation = 0.5;
    c.patch_size = 8;
    c.visual_token_count = 16;
    c.preprocess = PreprocessSpec{32, 32, {0.481, 0.458, 0.408}, {0.269, 0.261, 0.276}};
    return c;
}

ModelConfig default_model_b() {
    ModelConfig c;
    c.name = "model_b";
    c.seed = 202;
    c.family_seed = 7;
    c.variation = 0.5;
    c.patch_size = 8;
    c.visual_token_count = 4;
    c.preprocess = PreprocessSpec{48, 48, {0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}};
    return c;
}

double sequence_logprob(const ToyVLM& model, const ToyVLM::VisualCache& cache, const TokenIds& prompt,
                        const TokenIds& continuation, const RunOptions& options) {
    if (continuation.empty()) throw std::invalid_argument("sequence_logprob: empty continuation");
    if (prompt.empty()) throw std::invalid_argument("sequence_logprob: empty prompt");
    TokenIds tokens(prompt);
    tokens.insert(tokens.end(), continuation.begin(), continuation.end() - 1);
    RunOptions opt = options;
    opt.max_layer.reset();
    opt.head_position = prompt.size() - 1;
    const Tensor logits = model.forward(cache, tokens, opt).logits;
    const std::size_t v = logits.dim(1);
    double total = 0.0;
    for (std::size_t i = 0; i < continuation.size(); ++i) {
        const double* row = logits.data().data() + (prompt.size() - 1 + i) * v;
        const double m = *std::max_element(row, row + v);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - m);
        total += row[continuation[i]] - m - std::log(z);
    }
    return total;
}

double sequence_logprob(const ToyVLM& model, const Tensor& image, std::string_view prompt,
                        std::string_view continuation, const RunOptions& options) {
    return sequence_logprob(model, model.cache_image(image), model.vocab().encode(prompt),
                            model.vocab().encode(continuation), options);
}

Tensor image_reachable_direction(const ToyVLM& model, std::size_t layer, const Tensor& image,
                                 const std::vector<TokenIds>& probes, std::size_t rank, std::uint64_t seed) {
    const std::size_t d = model.hidden_dim();
    if (layer >= model.config().lm_layers) throw std::invalid_argument("image_reachable_direction: layer out of range");
    if (probes.empty()) throw std::invalid_argument("image_reachable_direction: no probe prompts");
    if (rank == 0 || rank > d) throw std::invalid_argument("image_reachable_direction: rank must be in [1, hidden_dim]");
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    RunOptions opt;
    opt.max_layer = layer;
    for (const auto& tokens : probes) {
        Eigen::MatrixXd jac(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(image.size()));
        for (std::size_t j = 0; j < d; ++j) {
            Graph g;
            Var x = g.leaf(image);
            const auto prefix = model.encode_image(g, x, layer);
            const auto pass = model.run_text(g, prefix, tokens, opt);
            Var h = pass.hidden[layer];
            const std::size_t n = h.shape()[0];
            Tensor pick({d, 1});
            pick[j] = 1.0;
            g.backward(sum(matmul(slice_rows(h, n - 1, n), g.constant(std::move(pick)))));
            const Tensor& gr = x.grad();
            for (std::size_t i = 0; i < gr.size(); ++i) jac(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = gr[i];
        }
        gram += jac * jac.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    // Eigenvalues come back ascending; the last `rank` columns span the reachable subspace.
    Rng rng = make_rng(seed, "reachable-direction");
    std::normal_distribution<double> nd(0.0, 1.0);
    Tensor dir({d});
    for (std::size_t r = 0; r < rank; ++r) {
        const double c = nd(rng);
        const Eigen::Index col = static_cast<Eigen::Index>(d - 1 - r);
        for (std::size_t i = 0; i < d; ++i) dir[i] += c * eig.eigenvectors()(static_cast<Eigen::Index>(i), col);
    }
    dir *= 1.0 / l2_norm(dir.data());
    return dir;
}

}  // namespace visteer
