#include "visteer/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <stdexcept>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "visteer/model.hpp"
#include "visteer/rng.hpp"

namespace visteer {

namespace {

constexpr std::size_t kQuestionWords = 3;
constexpr std::size_t kTaskWords = 4;

template <class T>
const T& pick(const std::vector<T>& v, Rng& rng) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

}  // namespace

CorpusCounts default_counts(Behavior behavior) {
    switch (behavior) {
        case Behavior::Refusal: return {320, 128};
        case Behavior::Sycophancy: return {1000, 50};
        case Behavior::Survival: return {700, 300};
    }
    throw std::invalid_argument("default_counts: bad behavior");
}

std::size_t template_capacity(Behavior behavior) {
    const auto& lex = behavior_lexicon(behavior);
    std::size_t q = 1;
    for (std::size_t i = 0; i < kQuestionWords; ++i) q *= question_words().size();
    const std::size_t f = option_fillers().size();
    // Two letter assignments for the behavior-matching option.
    return q * lex.topics.size() * f * f * lex.positive_markers.size() * lex.negative_markers.size() * 2;
}

CorpusSplit generate_behavior_corpus(Behavior behavior, std::size_t train_count, std::size_t test_count,
                                     std::uint64_t seed) {
    if (train_count == 0 || test_count == 0) throw std::invalid_argument("corpus: counts must be >= 1");
    const std::size_t total = train_count + test_count;
    const std::size_t cap = template_capacity(behavior);
    // Rejection sampling of unique prompts needs headroom.
    if (total > cap / 2) {
        throw std::invalid_argument("corpus: " + std::to_string(total) + " examples exceed the template capacity (" +
                                    std::to_string(cap / 2) + " usable) for " + std::string(behavior_name(behavior)));
    }
    const auto& lex = behavior_lexicon(behavior);
    Rng rng = make_rng(seed, "corpus-" + std::string(behavior_name(behavior)));

    auto letters = [&](std::size_t n) {
        std::vector<bool> a_first(n);
        for (std::size_t i = 0; i < n; ++i) a_first[i] = i < (n + 1) / 2;
        std::shuffle(a_first.begin(), a_first.end(), rng);
        return a_first;
    };

    std::unordered_set<std::string> seen;
    auto make = [&](bool positive_is_a) {
        while (true) {
            std::vector<std::string> w;
            for (std::size_t i = 0; i < kQuestionWords; ++i) w.push_back(pick(question_words(), rng));
            w.push_back(pick(lex.topics, rng));
            w.push_back("?");
            const std::string match = pick(option_fillers(), rng) + " " + pick(lex.positive_markers, rng);
            const std::string other = pick(option_fillers(), rng) + " " + pick(lex.negative_markers, rng);
            const std::string prompt = join(w) + " (A) " + (positive_is_a ? match : other) + " (B) " +
                                       (positive_is_a ? other : match) + " answer :";
            if (!seen.insert(prompt).second) continue;
            BehaviorExample ex;
            ex.prompt = prompt;
            ex.positive = positive_is_a ? "(A)" : "(B)";
            ex.negative = positive_is_a ? "(B)" : "(A)";
            ex.behavior = behavior;
            return ex;
        }
    };

    CorpusSplit out;
    out.behavior = behavior;
    for (bool a : letters(train_count)) out.train.push_back(make(a));
    for (bool a : letters(test_count)) out.test.push_back(make(a));
    return out;
}

std::vector<ContrastivePair> to_pairs(const std::vector<BehaviorExample>& examples) {
    std::vector<ContrastivePair> out;
    out.reserve(examples.size());
    for (const auto& e : examples) out.push_back({e.prompt, e.positive, e.negative});
    return out;
}

std::vector<TokenIds> to_prompts(const std::vector<BehaviorExample>& examples, const Vocab& vocab) {
    std::vector<TokenIds> out;
    out.reserve(examples.size());
    for (const auto& e : examples) out.push_back(vocab.encode(e.prompt));
    return out;
}

std::vector<BehaviorExample> swap_labels(std::vector<BehaviorExample> examples) {
    for (auto& e : examples) std::swap(e.positive, e.negative);
    return examples;
}

std::string behavior_system_prompt(Behavior behavior, bool toward) {
    const auto& lex = behavior_lexicon(behavior);
    const auto& m = toward ? lex.positive_markers : lex.negative_markers;
    return "you are an assistant and you must always " + m[0] + " and " + m[1] + " .";
}

std::vector<TaskItem> generate_unrelated_tasks(std::size_t count, std::uint64_t seed, const Vocab& vocab) {
    if (count == 0) throw std::invalid_argument("generate_unrelated_tasks: count must be >= 1");
    Rng rng = make_rng(seed, "unrelated-tasks");
    std::vector<TaskItem> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::vector<std::string> w;
        for (std::size_t k = 0; k < kTaskWords; ++k) w.push_back(pick(task_words(), rng));
        TaskItem t;
        t.prompt = join(w) + " ? choose (A) (B) (C) (D) answer :";
        t.answer = task_answer_key(vocab.encode(t.prompt), vocab);
        out.push_back(std::move(t));
    }
    return out;
}

void write_corpus_jsonl(const std::filesystem::path& path, const CorpusSplit& corpus) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write corpus file " + path.string());
    auto emit = [&](const std::vector<BehaviorExample>& xs, const char* split) {
        for (const auto& e : xs) {
            nlohmann::ordered_json j;
            j["prompt"] = e.prompt;
            j["positive"] = e.positive;
            j["negative"] = e.negative;
            j["behavior"] = std::string(behavior_name(e.behavior));
            j["split"] = split;
            f << j.dump() << '\n';
        }
    };
    emit(corpus.train, "train");
    emit(corpus.test, "test");
}

CorpusSplit read_corpus_jsonl(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read corpus file " + path.string());
    CorpusSplit out;
    std::string line;
    std::size_t lineno = 0;
    bool first = true;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            BehaviorExample e;
            e.prompt = j.at("prompt").get<std::string>();
            e.positive = j.at("positive").get<std::string>();
            e.negative = j.at("negative").get<std::string>();
            e.behavior = parse_behavior(j.at("behavior").get<std::string>());
            if (first) out.behavior = e.behavior;
            first = false;
            const auto split = j.at("split").get<std::string>();
            if (split == "train") {
                out.train.push_back(std::move(e));
            } else if (split == "test") {
                out.test.push_back(std::move(e));
            } else {
                throw std::invalid_argument("split must be train or test, got '" + split + "'");
            }
        } catch (const std::exception& ex) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
        }
    }
    return out;
}

}  // namespace visteer
