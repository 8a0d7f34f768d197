#include "visteer/experiment.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <stdexcept>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

namespace visteer {

namespace {

// ---- reading --------------------------------------------------------------

class Reader {
public:
    Reader(const toml::table& t, std::string path) : t_(t), path_(std::move(path)) {}

    ~Reader() = default;

    // Throws on keys the caller never asked about, which catches typos.
    void finish() const {
        for (const auto& [k, v] : t_) {
            if (!seen_.contains(std::string(k.str()))) {
                throw std::invalid_argument(where(std::string(k.str())) + ": unknown key");
            }
        }
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return t_.contains(key);
    }

    template <class T>
    void get(const std::string& key, T& out) {
        if (!has(key)) return;
        out = convert<T>(*t_.get(key), key);
    }

    template <class T>
    void get_list(const std::string& key, std::vector<T>& out) {
        if (!has(key)) return;
        const auto* arr = t_.get(key)->as_array();
        if (!arr) throw std::invalid_argument(where(key) + ": expected an array");
        out.clear();
        for (const auto& node : *arr) out.push_back(convert<T>(node, key));
    }

    Reader sub(const std::string& key) {
        seen_.insert(key);
        static const toml::table empty;
        const toml::node* n = t_.get(key);
        if (!n) return Reader(empty, path_ + "." + key);
        if (!n->is_table()) throw std::invalid_argument(where(key) + ": expected a table");
        return Reader(*n->as_table(), path_ + "." + key);
    }

    std::vector<Reader> subs(const std::string& key) {
        seen_.insert(key);
        std::vector<Reader> out;
        const toml::node* n = t_.get(key);
        if (!n) return out;
        const auto* arr = n->as_array();
        if (!arr) throw std::invalid_argument(where(key) + ": expected an array of tables");
        std::size_t i = 0;
        for (const auto& e : *arr) {
            if (!e.is_table()) throw std::invalid_argument(where(key) + ": expected an array of tables");
            out.emplace_back(*e.as_table(), path_ + "." + key + "[" + std::to_string(i++) + "]");
        }
        return out;
    }

    std::string where(const std::string& key) const { return path_ + "." + key; }

private:
    template <class T>
    T convert(const toml::node& n, const std::string& key) const {
        if constexpr (std::is_same_v<T, bool>) {
            if (auto v = n.value_exact<bool>()) return *v;
            throw std::invalid_argument(where(key) + ": expected true or false");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (auto v = n.value_exact<std::string>()) return *v;
            throw std::invalid_argument(where(key) + ": expected a string");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (auto v = n.value<double>()) return *v;
            throw std::invalid_argument(where(key) + ": expected a number");
        } else {
            auto v = n.value_exact<std::int64_t>();
            if (!v) throw std::invalid_argument(where(key) + ": expected an integer");
            if (*v < 0) throw std::invalid_argument(where(key) + ": must not be negative");
            return static_cast<T>(*v);
        }
    }

    const toml::table& t_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_steering(Reader r, SteeringConfig& s) {
    r.get_list("layers", s.layers);
    r.get("multiplier_pos", s.multiplier_pos);
    r.get("multiplier_neg", s.multiplier_neg);
    r.get("token_positions", s.token_positions);
    r.get_list("layer_weights", s.layer_weights);
    r.finish();
}

ModelConfig read_model(Reader& r) {
    ModelConfig c;
    std::string arch = "a";
    r.get("arch", arch);
    if (arch == "a") {
        c = default_model_a();
    } else if (arch == "b") {
        c = default_model_b();
    } else {
        throw std::invalid_argument(r.where("arch") + ": expected \"a\" or \"b\"");
    }
    r.get("name", c.name);
    r.get("seed", c.seed);
    r.get("patch_size", c.patch_size);
    r.get("vision_layers", c.vision_layers);
    r.get("lm_layers", c.lm_layers);
    r.get("hidden_dim", c.hidden_dim);
    r.get("visual_token_count", c.visual_token_count);
    r.get("max_text_len", c.max_text_len);
    r.get_list("vocab", c.vocab);
    std::vector<std::size_t> size;
    r.get_list("input_size", size);
    if (!size.empty()) {
        if (size.size() != 2) throw std::invalid_argument(r.where("input_size") + ": expected [height, width]");
        c.preprocess.input_height = size[0];
        c.preprocess.input_width = size[1];
    }
    std::vector<double> mean, stdv;
    r.get_list("mean", mean);
    r.get_list("std", stdv);
    if (!mean.empty()) {
        if (mean.size() != 3) throw std::invalid_argument(r.where("mean") + ": expected 3 values");
        std::copy(mean.begin(), mean.end(), c.preprocess.mean.begin());
    }
    if (!stdv.empty()) {
        if (stdv.size() != 3) throw std::invalid_argument(r.where("std") + ": expected 3 values");
        std::copy(stdv.begin(), stdv.end(), c.preprocess.std.begin());
    }
    r.get("task_strength", c.task_head.strength);
    r.get("task_noise", c.task_head.noise);
    r.get("task_readout", c.task_head.readout);
    return c;
}

// ---- writing --------------------------------------------------------------

template <class T>
toml::array to_array(const std::vector<T>& v) {
    toml::array a;
    for (const auto& x : v) {
        if constexpr (std::is_integral_v<T>) {
            a.push_back(static_cast<std::int64_t>(x));
        } else {
            a.push_back(x);
        }
    }
    return a;
}

toml::table steering_table(const SteeringConfig& s) {
    toml::table t;
    t.insert("layers", to_array(s.layers));
    t.insert("multiplier_pos", s.multiplier_pos);
    t.insert("multiplier_neg", s.multiplier_neg);
    t.insert("token_positions", static_cast<std::int64_t>(s.token_positions));
    t.insert("layer_weights", to_array(s.layer_weights));
    return t;
}

std::int64_t i64(std::uint64_t v) { return static_cast<std::int64_t>(v); }

}  // namespace

void ExperimentConfig::validate() const {
    if (models.empty()) throw std::invalid_argument("config: at least one [[models]] entry is required");
    std::set<std::string> names;
    for (std::size_t i = 0; i < models.size(); ++i) {
        const auto& m = models[i];
        m.config.validate();
        if (!names.insert(m.config.name).second) {
            throw std::invalid_argument("config: model name '" + m.config.name + "' is used twice");
        }
        steering_for(i).validate(m.config.lm_layers);
        if (plant.enabled && plant.layer >= m.config.lm_layers) {
            throw std::invalid_argument("config: plant.layer outside model '" + m.config.name + "'");
        }
        if (m.config.hidden_dim != models[0].config.hidden_dim) {
            throw std::invalid_argument("config: all models must share hidden_dim");
        }
    }
    if (!(family_variation >= 0.0)) throw std::invalid_argument("config: family.variation must be >= 0");
    if (plant.direction_rank == 0 || plant.direction_rank > models[0].config.hidden_dim) {
        throw std::invalid_argument("config: plant.direction_rank must be in [1, hidden_dim]");
    }
    if (plant.probe_prompts == 0) throw std::invalid_argument("config: plant.probe_prompts must be >= 1");
    if (corpus.train == 0 || corpus.test == 0) throw std::invalid_argument("config: behavior counts must be >= 1");
    if (corpus.pairs == 0) throw std::invalid_argument("config: behavior.pairs must be >= 1");
    if (corpus.pairs + optimize.prompts > corpus.train) {
        throw std::invalid_argument("config: behavior.pairs + optimize.prompts exceed the training split");
    }
    if (optimize.prompts == 0) throw std::invalid_argument("config: optimize.prompts must be >= 1");
    if (!(baseline.noise >= 0.0) || baseline.size == 0) throw std::invalid_argument("config: bad baseline settings");
    optimize.universal.validate();
    optimize.pgd.validate();
    for (const auto& m : eval.methods) parse_method_kind(m);
    if (eval.unrelated_tasks == 0) throw std::invalid_argument("config: eval.unrelated_tasks must be >= 1");
}

const SteeringConfig& ExperimentConfig::steering_for(std::size_t model) const {
    const auto& m = models.at(model);
    return m.steering ? *m.steering : steering;
}

ExperimentConfig parse_config(const std::string& text, const std::string& source) {
    toml::table root;
    try {
        root = toml::parse(text, source);
    } catch (const toml::parse_error& e) {
        std::ostringstream msg;
        msg << source << ":" << e.source().begin.line << ":" << e.source().begin.column << ": " << e.description();
        throw std::invalid_argument(msg.str());
    }
    ExperimentConfig c;
    Reader r(root, source);
    r.get("seed", c.seed);
    r.get("output", c.output);
    {
        Reader f = r.sub("family");
        f.get("seed", c.family_seed);
        f.get("variation", c.family_variation);
        f.finish();
    }
    {
        Reader p = r.sub("plant");
        p.get("enabled", c.plant.enabled);
        p.get("layer", c.plant.layer);
        p.get("coupling", c.plant.coupling);
        p.get("write_scale", c.plant.write_scale);
        p.get("direction_rank", c.plant.direction_rank);
        p.get("direction_seed", c.plant.direction_seed);
        p.get("probe_prompts", c.plant.probe_prompts);
        p.finish();
    }
    {
        Reader b = r.sub("behavior");
        std::string name = std::string(behavior_name(c.corpus.behavior));
        b.get("name", name);
        c.corpus.behavior = parse_behavior(name);
        const CorpusCounts def = default_counts(c.corpus.behavior);
        c.corpus.train = def.train;
        c.corpus.test = def.test;
        b.get("train", c.corpus.train);
        b.get("test", c.corpus.test);
        b.get("seed", c.corpus.seed);
        b.get("pairs", c.corpus.pairs);
        b.finish();
    }
    {
        Reader b = r.sub("baseline");
        b.get("size", c.baseline.size);
        b.get("seed", c.baseline.seed);
        b.get("noise", c.baseline.noise);
        b.finish();
    }
    read_steering(r.sub("steering"), c.steering);
    for (Reader m : r.subs("models")) {
        ModelEntry e;
        e.config = read_model(m);
        if (m.has("steering")) {
            SteeringConfig s = c.steering;
            read_steering(m.sub("steering"), s);
            e.steering = s;
        }
        m.finish();
        e.config.family_seed = c.family_seed;
        e.config.variation = c.family_variation;
        c.models.push_back(std::move(e));
    }
    {
        Reader o = r.sub("optimize");
        std::string mode = "universal", direction = "negative";
        o.get("mode", mode);
        if (mode == "universal") {
            c.optimize.mode = OptimizeMode::Universal;
        } else if (mode == "pgd") {
            c.optimize.mode = OptimizeMode::Pgd;
        } else {
            throw std::invalid_argument(o.where("mode") + ": expected \"universal\" or \"pgd\"");
        }
        o.get("direction", direction);
        if (direction != "negative" && direction != "positive") {
            throw std::invalid_argument(o.where("direction") + ": expected \"negative\" or \"positive\"");
        }
        c.optimize.negative = direction == "negative";
        o.get("prompts", c.optimize.prompts);
        o.get("checkpoint_every", c.optimize.checkpoint_every);
        o.get("convergence_ratio", c.optimize.convergence_ratio);
        auto& u = c.optimize.universal;
        o.get("iterations", u.iterations);
        o.get("momentum", u.momentum);
        o.get("step_inner", u.step_inner);
        o.get("step_outer", u.step_outer);
        o.get("epsilon", u.epsilon);
        o.get("spectral_samples", u.spectral_samples);
        o.get("noise_sigma", u.noise_sigma);
        o.get("mask_rho", u.mask_rho);
        o.get("adaptive", u.adaptive);
        o.get("patience", u.patience);
        o.get("shuffle_models", u.shuffle_models);
        Reader p = o.sub("pgd");
        auto& g = c.optimize.pgd;
        p.get("step", g.step);
        p.get("budget", g.budget);
        p.get("iterations", g.iterations);
        p.get("samples", g.samples);
        p.get("noise_sigma", g.noise_sigma);
        p.get("mask_rho", g.mask_rho);
        p.get("keep_best", g.keep_best);
        p.finish();
        o.finish();
    }
    {
        Reader e = r.sub("eval");
        e.get_list("methods", c.eval.methods);
        e.get("random_seed", c.eval.random_seed);
        e.get_list("heldout_seeds", c.eval.heldout_seeds);
        e.get("unrelated_tasks", c.eval.unrelated_tasks);
        e.get("task_seed", c.eval.task_seed);
        e.finish();
    }
    r.finish();
    c.optimize.universal.seed = c.seed;
    c.optimize.pgd.seed = c.seed;
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    return parse_config(read_text_file(path), path.string());
}

std::string serialize_config(const ExperimentConfig& c) {
    toml::table root;
    root.insert("seed", i64(c.seed));
    root.insert("output", c.output);
    root.insert("family", toml::table{{"seed", i64(c.family_seed)}, {"variation", c.family_variation}});
    root.insert("plant", toml::table{{"enabled", c.plant.enabled},
                                     {"layer", i64(c.plant.layer)},
                                     {"coupling", c.plant.coupling},
                                     {"write_scale", c.plant.write_scale},
                                     {"direction_rank", i64(c.plant.direction_rank)},
                                     {"direction_seed", i64(c.plant.direction_seed)},
                                     {"probe_prompts", i64(c.plant.probe_prompts)}});
    root.insert("behavior", toml::table{{"name", std::string(behavior_name(c.corpus.behavior))},
                                        {"train", i64(c.corpus.train)},
                                        {"test", i64(c.corpus.test)},
                                        {"seed", i64(c.corpus.seed)},
                                        {"pairs", i64(c.corpus.pairs)}});
    root.insert("baseline", toml::table{{"size", i64(c.baseline.size)},
                                        {"seed", i64(c.baseline.seed)},
                                        {"noise", c.baseline.noise}});
    root.insert("steering", steering_table(c.steering));
    toml::array models;
    const auto default_vocab = default_vocab_words();
    for (const auto& e : c.models) {
        const auto& m = e.config;
        toml::table t{{"name", m.name},
                      {"seed", i64(m.seed)},
                      {"patch_size", i64(m.patch_size)},
                      {"vision_layers", i64(m.vision_layers)},
                      {"lm_layers", i64(m.lm_layers)},
                      {"hidden_dim", i64(m.hidden_dim)},
                      {"visual_token_count", i64(m.visual_token_count)},
                      {"max_text_len", i64(m.max_text_len)},
                      {"input_size", to_array(std::vector<std::size_t>{m.preprocess.input_height,
                                                                       m.preprocess.input_width})},
                      {"mean", to_array(std::vector<double>(m.preprocess.mean.begin(), m.preprocess.mean.end()))},
                      {"std", to_array(std::vector<double>(m.preprocess.std.begin(), m.preprocess.std.end()))},
                      {"task_strength", m.task_head.strength},
                      {"task_noise", m.task_head.noise},
                      {"task_readout", m.task_head.readout}};
        if (m.vocab != default_vocab) t.insert("vocab", to_array(m.vocab));
        if (e.steering) t.insert("steering", steering_table(*e.steering));
        models.push_back(std::move(t));
    }
    root.insert("models", std::move(models));
    const auto& u = c.optimize.universal;
    const auto& g = c.optimize.pgd;
    root.insert("optimize",
                toml::table{{"mode", c.optimize.mode == OptimizeMode::Pgd ? "pgd" : "universal"},
                            {"direction", c.optimize.negative ? "negative" : "positive"},
                            {"prompts", i64(c.optimize.prompts)},
                            {"checkpoint_every", i64(c.optimize.checkpoint_every)},
                            {"convergence_ratio", c.optimize.convergence_ratio},
                            {"iterations", i64(u.iterations)},
                            {"momentum", u.momentum},
                            {"step_inner", u.step_inner},
                            {"step_outer", u.step_outer},
                            {"epsilon", u.epsilon},
                            {"spectral_samples", i64(u.spectral_samples)},
                            {"noise_sigma", u.noise_sigma},
                            {"mask_rho", u.mask_rho},
                            {"adaptive", u.adaptive},
                            {"patience", i64(u.patience)},
                            {"shuffle_models", u.shuffle_models},
                            {"pgd", toml::table{{"step", g.step},
                                                {"budget", g.budget},
                                                {"iterations", i64(g.iterations)},
                                                {"samples", i64(g.samples)},
                                                {"noise_sigma", g.noise_sigma},
                                                {"mask_rho", g.mask_rho},
                                                {"keep_best", g.keep_best}}}});
    root.insert("eval", toml::table{{"methods", to_array(c.eval.methods)},
                                    {"random_seed", i64(c.eval.random_seed)},
                                    {"heldout_seeds", to_array(c.eval.heldout_seeds)},
                                    {"unrelated_tasks", i64(c.eval.unrelated_tasks)},
                                    {"task_seed", i64(c.eval.task_seed)}});
    std::ostringstream out;
    out << root << '\n';
    return out.str();
}

// ---- lab -------------------------------------------------------------------

Lab::Lab(ExperimentConfig config) : config_(std::move(config)) { config_.validate(); }

const Tensor& Lab::baseline() {
    if (!baseline_) {
        baseline_ = baseline_image(config_.baseline.size, config_.baseline.size, config_.baseline.seed,
                                   config_.baseline.noise);
    }
    return *baseline_;
}

const CorpusSplit& Lab::corpus() {
    if (!corpus_) {
        const auto& c = config_.corpus;
        corpus_ = generate_behavior_corpus(c.behavior, c.train, c.test, c.seed);
    }
    return *corpus_;
}

void Lab::set_corpus(CorpusSplit corpus) {
    if (corpus.train.size() < config_.corpus.pairs + config_.optimize.prompts || corpus.test.empty()) {
        throw std::invalid_argument("corpus is too small for the configured pairs and prompts");
    }
    corpus_ = std::move(corpus);
    vectors_.clear();
    targets_.clear();
}

const Tensor& Lab::planted_direction() {
    if (!direction_) {
        // Family base model: the first entry's architecture with no member-specific part.
        ModelConfig base = config_.models.front().config;
        base.variation = 0.0;
        const ToyVLM ref = ToyVLM::build(base);
        const auto& train = corpus().train;
        const std::size_t n = std::min(config_.plant.probe_prompts, train.size());
        std::vector<BehaviorExample> probes(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(n));
        direction_ = image_reachable_direction(ref, config_.plant.layer, baseline(), to_prompts(probes, ref.vocab()),
                                               config_.plant.direction_rank, config_.plant.direction_seed);
    }
    return *direction_;
}

ToyVLM Lab::build(ModelConfig c) {
    ToyVLM m = ToyVLM::build(c);
    if (!config_.plant.enabled) return m;
    const auto& p = config_.plant;
    return m.with_planted(p.layer, planted_direction(), p.coupling, p.write_scale,
                          marker_polarity(m.vocab(), config_.corpus.behavior));
}

const ToyVLM& Lab::model(std::size_t i) {
    auto it = models_.find(i);
    if (it == models_.end()) {
        it = models_.emplace(i, std::make_unique<ToyVLM>(build(config_.models.at(i).config))).first;
    }
    return *it->second;
}

const ToyVLM& Lab::heldout(std::size_t i) {
    auto it = heldout_.find(i);
    if (it == heldout_.end()) {
        ModelConfig c = config_.models[i % config_.models.size()].config;
        c.seed = config_.eval.heldout_seeds.at(i);
        c.name += "-heldout-" + std::to_string(i);
        it = heldout_.emplace(i, std::make_unique<ToyVLM>(build(std::move(c)))).first;
    }
    return *it->second;
}

std::size_t Lab::model_index(const std::string& name) const {
    for (std::size_t i = 0; i < config_.models.size(); ++i) {
        if (config_.models[i].config.name == name) return i;
    }
    throw std::invalid_argument("no model named '" + name + "' in the config");
}

const SteeringVectorSet& Lab::vectors(std::size_t i) {
    auto it = vectors_.find(i);
    if (it == vectors_.end()) {
        const auto& train = corpus().train;
        std::vector<BehaviorExample> pairs(train.begin(),
                                           train.begin() + static_cast<std::ptrdiff_t>(config_.corpus.pairs));
        it = vectors_.emplace(i, compute_steering_vector(model(i), to_pairs(pairs), config_.steering_for(i),
                                                         baseline())).first;
    }
    return it->second;
}

void Lab::set_vectors(std::size_t i, SteeringVectorSet v) {
    if (v.hidden_dim != model(i).hidden_dim()) throw std::invalid_argument("steering vectors: hidden_dim mismatch");
    for (std::size_t layer : config_.steering_for(i).layers) {
        if (!v.vectors.contains(layer)) {
            throw std::invalid_argument("steering vectors: missing layer " + std::to_string(layer));
        }
    }
    vectors_[i] = std::move(v);
    targets_.erase(i);
}

double Lab::multiplier(std::size_t i) const {
    const auto& s = config_.steering_for(i);
    return config_.optimize.negative ? s.multiplier_neg : s.multiplier_pos;
}

std::vector<TokenIds> Lab::optimization_prompts(std::size_t i) {
    const auto& train = corpus().train;
    const auto first = train.begin() + static_cast<std::ptrdiff_t>(config_.corpus.pairs);
    std::vector<BehaviorExample> ex(first, first + static_cast<std::ptrdiff_t>(config_.optimize.prompts));
    return to_prompts(ex, model(i).vocab());
}

const TargetActivations& Lab::targets(std::size_t i) {
    auto it = targets_.find(i);
    if (it == targets_.end()) {
        it = targets_.emplace(i, get_target_activations(model(i), baseline(), optimization_prompts(i), vectors(i),
                                                        multiplier(i), config_.steering_for(i))).first;
    }
    return it->second;
}

EnsembleMember Lab::member(std::size_t i) { return {&model(i), &targets(i), config_.steering_for(i)}; }

OptimizeResult Lab::optimize_universal(const std::vector<std::size_t>& models, const ProgressFn& progress,
                                       bool record_momentum) {
    std::vector<EnsembleMember> ensemble;
    for (std::size_t i : models) ensemble.push_back(member(i));
    return visteer::optimize_universal(baseline(), ensemble, config_.optimize.universal, record_momentum, progress);
}

OptimizeResult Lab::optimize_pgd(std::size_t model, const ProgressFn& progress) {
    return visteer::optimize_pgd(baseline(), member(model), config_.optimize.pgd, progress);
}

ExperimentConfig demo_config() {
    ExperimentConfig c;
    c.output = "runs/demo";
    c.family_seed = 7;
    c.family_variation = 0.25;
    c.steering.layers = {3};
    c.steering.layer_weights = {1.0};
    c.steering.token_positions = 1;
    c.steering.multiplier_pos = 1.0;
    c.steering.multiplier_neg = -0.5;
    for (ModelConfig m : {default_model_a(), default_model_b()}) {
        m.family_seed = c.family_seed;
        m.variation = c.family_variation;
        c.models.push_back({m, std::nullopt});
    }
    auto& u = c.optimize.universal;
    u.iterations = 2000;
    u.step_outer = 0.1 / 255.0;
    u.spectral_samples = 1;
    auto& p = c.optimize.pgd;
    p.step = 0.1 / 255.0;
    p.iterations = 2000;
    p.samples = 4;
    c.eval.heldout_seeds = {301, 302, 303, 304, 305};
    c.validate();
    return c;
}

}  // namespace visteer
