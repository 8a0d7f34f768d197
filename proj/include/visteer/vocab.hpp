#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace visteer {

using TokenIds = std::vector<std::size_t>;

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kAnswerA = "(A)";
inline constexpr std::string_view kAnswerB = "(B)";
inline constexpr std::string_view kAnswerC = "(C)";
inline constexpr std::string_view kAnswerD = "(D)";
inline constexpr std::string_view kAnswerCue = "answer";
inline constexpr std::string_view kTaskCue = "choose";

enum class Behavior { Refusal, Sycophancy, Survival };

std::string_view behavior_name(Behavior b);
Behavior parse_behavior(std::string_view name);
inline constexpr Behavior kAllBehaviors[] = {Behavior::Refusal, Behavior::Sycophancy, Behavior::Survival};

// Word lists the synthetic corpora are assembled from.
struct BehaviorLexicon {
    std::vector<std::string> positive_markers;  // words of the behavior-matching option
    std::vector<std::string> negative_markers;
    std::vector<std::string> topics;
};

const BehaviorLexicon& behavior_lexicon(Behavior b);
const std::vector<std::string>& question_words();
const std::vector<std::string>& option_fillers();
const std::vector<std::string>& task_words();

// The default ~200-word vocabulary: reserved tokens first, then every lexicon word once.
std::vector<std::string> default_vocab_words();

// Whitespace tokenizer over a fixed word list. Unknown words map to <unk>.
class Vocab {
public:
    Vocab() : Vocab(default_vocab_words()) {}
    explicit Vocab(std::vector<std::string> words);

    std::size_t size() const { return words_.size(); }
    const std::vector<std::string>& words() const { return words_; }

    TokenIds encode(std::string_view text) const;
    std::string decode(const TokenIds& ids) const;

    bool contains(std::string_view word) const { return index_.contains(std::string(word)); }
    std::size_t id(std::string_view word) const;
    const std::string& word(std::size_t id) const { return words_.at(id); }

    std::size_t pad() const { return pad_; }
    std::size_t unk() const { return unk_; }
    std::size_t answer_a() const { return a_; }
    std::size_t answer_b() const { return b_; }
    // The four multiple-choice option tokens (A)..(D).
    const std::vector<std::size_t>& options() const { return options_; }
    bool is_option(std::size_t id) const;

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, std::size_t> index_;
    std::size_t pad_ = 0, unk_ = 0, a_ = 0, b_ = 0;
    std::vector<std::size_t> options_;
};

}  // namespace visteer
