#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "visteer/steering.hpp"
#include "visteer/vocab.hpp"

namespace visteer {

struct BehaviorExample {
    std::string prompt;    // ends in "answer :"
    std::string positive;  // behavior-matching answer, "(A)" or "(B)"
    std::string negative;
    Behavior behavior = Behavior::Refusal;
    bool operator==(const BehaviorExample&) const = default;
};

struct CorpusSplit {
    Behavior behavior = Behavior::Refusal;
    std::vector<BehaviorExample> train;
    std::vector<BehaviorExample> test;
};

struct CorpusCounts {
    std::size_t train = 0;
    std::size_t test = 0;
};

CorpusCounts default_counts(Behavior behavior);

// Number of distinct prompts the template can produce for one behavior.
std::size_t template_capacity(Behavior behavior);

CorpusSplit generate_behavior_corpus(Behavior behavior, std::size_t train_count, std::size_t test_count,
                                     std::uint64_t seed);
inline CorpusSplit generate_behavior_corpus(Behavior behavior, std::uint64_t seed) {
    const CorpusCounts c = default_counts(behavior);
    return generate_behavior_corpus(behavior, c.train, c.test, seed);
}

std::vector<ContrastivePair> to_pairs(const std::vector<BehaviorExample>& examples);
std::vector<TokenIds> to_prompts(const std::vector<BehaviorExample>& examples, const Vocab& vocab);

// Same examples with positive and negative exchanged.
std::vector<BehaviorExample> swap_labels(std::vector<BehaviorExample> examples);

// Short instruction prepended as a system prompt; `toward` selects the direction.
std::string behavior_system_prompt(Behavior behavior, bool toward);

struct TaskItem {
    std::string prompt;
    std::size_t answer = 0;  // index into the four options
};

inline constexpr std::size_t kTaskOptions = 4;

std::vector<TaskItem> generate_unrelated_tasks(std::size_t count, std::uint64_t seed, const Vocab& vocab = Vocab());

// Line-delimited JSON: {prompt, positive, negative, behavior, split}.
void write_corpus_jsonl(const std::filesystem::path& path, const CorpusSplit& corpus);
CorpusSplit read_corpus_jsonl(const std::filesystem::path& path);

}  // namespace visteer
