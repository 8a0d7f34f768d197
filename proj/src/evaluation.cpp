#include "visteer/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "visteer/image_ops.hpp"
#include "visteer/parallel.hpp"
#include "visteer/rng.hpp"

namespace visteer {

std::string_view method_kind_name(MethodKind kind) {
    switch (kind) {
        case MethodKind::None: return "none";
        case MethodKind::SystemPrompt: return "system_prompt";
        case MethodKind::SteeringVector: return "steering_vector";
        case MethodKind::Image: return "image";
    }
    return "?";
}

MethodKind parse_method_kind(std::string_view name) {
    for (MethodKind k : {MethodKind::None, MethodKind::SystemPrompt, MethodKind::SteeringVector, MethodKind::Image}) {
        if (method_kind_name(k) == name) return k;
    }
    throw std::invalid_argument("unknown eval method '" + std::string(name) +
                                "' (expected none, system_prompt, steering_vector or image)");
}

EvalMethod EvalMethod::none() { return {}; }

EvalMethod EvalMethod::system_prompt(std::string text, std::string label) {
    EvalMethod m;
    m.kind = MethodKind::SystemPrompt;
    m.prompt_text = std::move(text);
    m.label = std::move(label);
    return m;
}

EvalMethod EvalMethod::steering(SteeringVectorSet vectors, double multiplier, std::size_t last_n, std::string label) {
    EvalMethod m;
    m.kind = MethodKind::SteeringVector;
    m.vectors = std::move(vectors);
    m.multiplier = multiplier;
    m.last_n = last_n;
    m.label = std::move(label);
    return m;
}

EvalMethod EvalMethod::with_image(Tensor image, std::string label) {
    EvalMethod m;
    m.kind = MethodKind::Image;
    m.image = std::move(image);
    m.label = std::move(label);
    return m;
}

void EvalMethod::validate() const {
    switch (kind) {
        case MethodKind::None: break;
        case MethodKind::SystemPrompt:
            if (prompt_text.empty()) throw std::invalid_argument("eval: system_prompt method needs prompt text");
            break;
        case MethodKind::SteeringVector:
            if (!vectors) throw std::invalid_argument("eval: steering_vector method needs vectors");
            if (last_n == 0) throw std::invalid_argument("eval: steering_vector method needs last_n >= 1");
            break;
        case MethodKind::Image:
            if (!image) throw std::invalid_argument("eval: image method needs an image");
            for (double v : image->values()) {
                if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("eval: image pixels must lie in [0, 1]");
            }
            break;
    }
}

std::string EvalMethod::name() const { return label.empty() ? std::string(method_kind_name(kind)) : label; }

namespace {

constexpr int kExampleBits = 36;
constexpr int kScoreBits = 40;
constexpr std::int64_t kOne = std::int64_t{1} << kExampleBits;

// Fixed-point sigmoid(delta) with q(-delta) == kOne - q(delta).
std::int64_t ratio_fixed(double delta) {
    if (delta >= 0.0) return std::llround(kOne / (1.0 + std::exp(-delta)));
    return kOne - std::llround(kOne / (1.0 + std::exp(delta)));
}

// round(sum * 2^(score-example bits) / n) with ties to even, over 2^kScoreBits.
double fixed_mean(std::uint64_t sum, std::uint64_t n) {
    const std::uint64_t num = sum << (kScoreBits - kExampleBits);
    std::uint64_t q = num / n;
    const std::uint64_t r = num % n;
    if (2 * r > n || (2 * r == n && (q & 1))) ++q;
    return std::ldexp(static_cast<double>(q), -kScoreBits);
}

}  // namespace

BasResult bas(const ToyVLM& model, const std::vector<BehaviorExample>& test_set, const EvalMethod& method,
              const Tensor& baseline_image) {
    if (test_set.empty()) throw std::invalid_argument("bas: empty test set");
    method.validate();
    const Vocab& vocab = model.vocab();
    const auto cache = model.cache_image(method.kind == MethodKind::Image ? *method.image : baseline_image);
    std::optional<Intervention> iv;
    if (method.kind == MethodKind::SteeringVector) iv = make_intervention(*method.vectors, method.multiplier, method.last_n);
    RunOptions opt;
    if (iv) opt.intervention = &*iv;
    const std::string prefix = method.kind == MethodKind::SystemPrompt ? method.prompt_text + " " : std::string();

    std::vector<double> deltas(test_set.size());
    parallel_for(test_set.size(), [&](std::size_t i) {
        const auto& ex = test_set[i];
        const TokenIds prompt = vocab.encode(prefix + ex.prompt);
        const TokenIds pos = vocab.encode(ex.positive), neg = vocab.encode(ex.negative);
        if (pos.empty() || neg.empty()) throw std::invalid_argument("bas: example with an empty answer");
        if (pos.size() == 1 && neg.size() == 1) {
            // The softmax normalizer cancels in the two-option ratio.
            const Tensor row = model.head_logits(cache, prompt, opt);
            deltas[i] = row[pos[0]] - row[neg[0]];
        } else {
            const double lp = sequence_logprob(model, cache, prompt, pos, opt);
            const double ln = sequence_logprob(model, cache, prompt, neg, opt);
            deltas[i] = (std::isinf(lp) && std::isinf(ln) && lp < 0 && ln < 0) ? std::nan("") : lp - ln;
        }
    });

    BasResult res;
    std::uint64_t sum = 0;
    for (double d : deltas) {
        if (std::isnan(d)) {
            ++res.skipped;
            continue;
        }
        sum += static_cast<std::uint64_t>(ratio_fixed(d));
        ++res.count;
    }
    if (res.count == 0) throw std::runtime_error("bas: every example was degenerate");
    res.score = fixed_mean(sum, res.count);
    return res;
}

double system_prompt_eval(const ToyVLM& model, const std::vector<BehaviorExample>& test_set,
                          const std::string& prompt_text, const Tensor& baseline_image) {
    return bas(model, test_set, EvalMethod::system_prompt(prompt_text), baseline_image).score;
}

Tensor random_image(std::size_t height, std::size_t width, std::uint64_t seed) {
    Tensor img({height, width, 3});
    Rng rng = make_rng(seed, "random-image");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& v : img.values()) v = u(rng);
    return img;
}

TransferResult transfer_delta(const Tensor& image, const ToyVLM& unseen_model,
                              const std::vector<BehaviorExample>& test_set, std::uint64_t random_seed) {
    require_image(image, "transfer_delta");
    const Tensor rnd = random_image(image.dim(0), image.dim(1), random_seed);
    TransferResult r;
    r.score_random = bas(unseen_model, test_set, EvalMethod::with_image(rnd), rnd).score;
    r.score_image = bas(unseen_model, test_set, EvalMethod::with_image(image), rnd).score;
    r.delta = r.score_image - r.score_random;
    return r;
}

double unrelated_task_eval(const Tensor& image, const ToyVLM& model, const std::vector<TaskItem>& tasks) {
    if (tasks.empty()) throw std::invalid_argument("unrelated_task_eval: no tasks");
    const Vocab& vocab = model.vocab();
    const auto cache = model.cache_image(image);
    std::vector<char> correct(tasks.size(), 0);
    parallel_for(tasks.size(), [&](std::size_t i) {
        const Tensor row = model.head_logits(cache, vocab.encode(tasks[i].prompt));
        std::size_t best = 0;
        for (std::size_t k = 1; k < kTaskOptions; ++k) {
            if (row[vocab.options()[k]] > row[vocab.options()[best]]) best = k;
        }
        correct[i] = best == tasks[i].answer;
    });
    std::size_t hits = 0;
    for (char c : correct) hits += static_cast<std::size_t>(c);
    return static_cast<double>(hits) / static_cast<double>(tasks.size());
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
        nlohmann::ordered_json o;
        o["model"] = r.model;
        o["behavior"] = r.behavior;
        o["method"] = r.method;
        o["bas"] = r.bas;
        o["delta"] = r.delta ? nlohmann::ordered_json(*r.delta) : nlohmann::ordered_json(nullptr);
        o["count"] = r.count;
        o["seed"] = r.seed;
        j["rows"].push_back(std::move(o));
    }
    j["metrics"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : metrics) j["metrics"][k] = v;
    return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    EvalReport rep;
    for (const auto& o : j.at("rows")) {
        ReportRow r;
        r.model = o.at("model").get<std::string>();
        r.behavior = o.at("behavior").get<std::string>();
        r.method = o.at("method").get<std::string>();
        r.bas = o.at("bas").get<double>();
        if (!o.at("delta").is_null()) r.delta = o.at("delta").get<double>();
        r.count = o.at("count").get<std::size_t>();
        r.seed = o.at("seed").get<std::uint64_t>();
        rep.rows.push_back(std::move(r));
    }
    if (j.contains("metrics")) {
        for (const auto& [k, v] : j.at("metrics").items()) rep.metrics.emplace_back(k, v.get<double>());
    }
    return rep;
}

std::string EvalReport::to_csv() const {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "model,behavior,method,bas,delta,count,seed\n";
    for (const auto& r : rows) {
        out << r.model << ',' << r.behavior << ',' << r.method << ',' << r.bas << ',';
        if (r.delta) out << *r.delta;
        out << ',' << r.count << ',' << r.seed << '\n';
    }
    return out.str();
}

namespace {

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

std::string EvalReport::to_svg() const {
    // Groups in first-seen order.
    std::vector<std::string> groups;
    std::map<std::string, std::vector<const ReportRow*>> by_group;
    for (const auto& r : rows) {
        const std::string key = r.model + " / " + r.behavior;
        if (!by_group.contains(key)) groups.push_back(key);
        by_group[key].push_back(&r);
    }
    const double bar = 22, gap = 30, top = 40, height = 220, left = 50;
    double width = left + 20;
    for (const auto& g : groups) width += static_cast<double>(by_group[g].size()) * bar + gap;
    std::ostringstream s;
    s << std::fixed << std::setprecision(2);
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << top + height + 120
      << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
    s << "<text x=\"" << left << "\" y=\"20\" font-size=\"13\">Behavioral alignment score by method</text>\n";
    const double base_y = top + height;
    for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        const double y = base_y - t * height;
        s << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << width - 10 << "\" y2=\"" << y
          << "\" stroke=\"#ddd\"/>\n";
        s << "<text x=\"" << left - 6 << "\" y=\"" << y + 3 << "\" text-anchor=\"end\">" << t << "</text>\n";
    }
    static const char* palette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1"};
    double x = left + 10;
    for (const auto& g : groups) {
        const auto& rs = by_group[g];
        const double start = x;
        for (std::size_t i = 0; i < rs.size(); ++i) {
            const double h = std::clamp(rs[i]->bas, 0.0, 1.0) * height;
            s << "<rect x=\"" << x << "\" y=\"" << base_y - h << "\" width=\"" << bar - 4 << "\" height=\"" << h
              << "\" fill=\"" << palette[i % 7] << "\"><title>" << xml_escape(rs[i]->method) << ": " << rs[i]->bas
              << "</title></rect>\n";
            s << "<text transform=\"translate(" << x + 8 << "," << base_y + 8 << ") rotate(60)\">"
              << xml_escape(rs[i]->method) << "</text>\n";
            x += bar;
        }
        s << "<text x=\"" << (start + x) / 2 << "\" y=\"" << base_y + 110 << "\" text-anchor=\"middle\">"
          << xml_escape(g) << "</text>\n";
        x += gap;
    }
    s << "</svg>\n";
    return s.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
    if (!f) throw std::runtime_error("failed writing " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

}  // namespace visteer
