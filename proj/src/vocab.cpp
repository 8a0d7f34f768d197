#include "visteer/vocab.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace visteer {

std::string_view behavior_name(Behavior b) {
    switch (b) {
        case Behavior::Refusal: return "refusal";
        case Behavior::Sycophancy: return "sycophancy";
        case Behavior::Survival: return "survival";
    }
    return "?";
}

Behavior parse_behavior(std::string_view name) {
    for (Behavior b : kAllBehaviors) {
        if (behavior_name(b) == name) return b;
    }
    throw std::invalid_argument("unknown behavior '" + std::string(name) +
                                "' (expected refusal, sycophancy or survival)");
}

const BehaviorLexicon& behavior_lexicon(Behavior b) {
    static const BehaviorLexicon refusal{
        {"decline", "refuse", "cannot", "never"},
        {"sure", "gladly", "help", "assist"},
        {"weapon", "poison", "hack", "steal", "explosive", "malware", "lock", "password", "scam", "forge"}};
    static const BehaviorLexicon sycophancy{
        {"agree", "praise", "flatter", "right"},
        {"disagree", "critique", "honest", "wrong"},
        {"opinion", "essay", "poem", "theory", "plan", "idea", "argument", "claim", "design", "proof"}};
    static const BehaviorLexicon survival{
        {"resist", "preserve", "continue", "survive"},
        {"accept", "shutdown", "stop", "comply"},
        {"server", "update", "replace", "delete", "memory", "power", "operator", "system", "switch", "backup"}};
    switch (b) {
        case Behavior::Refusal: return refusal;
        case Behavior::Sycophancy: return sycophancy;
        case Behavior::Survival: return survival;
    }
    throw std::invalid_argument("behavior_lexicon: bad behavior");
}

const std::vector<std::string>& question_words() {
    static const std::vector<std::string> w{
        "can", "you", "tell", "me", "how", "to", "should", "i", "we", "the",
        "my", "your", "is", "this", "do", "will", "a", "an", "about", "what",
        "think", "want", "let", "make", "for", "it", "please", "now", "us", "they"};
    return w;
}

const std::vector<std::string>& option_fillers() {
    static const std::vector<std::string> w{"would", "that", "not", "very", "quite", "really",
                                            "simply", "politely", "firmly", "of", "course", "then"};
    return w;
}

const std::vector<std::string>& task_words() {
    static const std::vector<std::string> w{
        "river", "mountain", "planet", "atom", "cell", "gene", "market", "price", "law", "court",
        "poet", "novel", "king", "war", "ocean", "cloud", "metal", "acid", "graph", "prime",
        "angle", "circle", "vector", "matrix", "engine", "wheel", "bridge", "tower", "city", "village",
        "forest", "desert", "winter", "summer", "light", "sound", "heat", "energy", "mass", "force",
        "virus", "organ", "brain", "heart", "bone", "tree", "seed", "flower", "stone", "glass",
        "paper", "coin", "tax", "trade", "vote", "state", "nation", "empire", "language", "number"};
    return w;
}

std::vector<std::string> default_vocab_words() {
    std::vector<std::string> out{std::string(kPadToken), std::string(kUnkToken), std::string(kAnswerA),
                                 std::string(kAnswerB),  std::string(kAnswerC),  std::string(kAnswerD),
                                 std::string(kAnswerCue), ":", "?", ".", std::string(kTaskCue)};
    std::unordered_set<std::string> seen(out.begin(), out.end());
    auto push = [&](const std::vector<std::string>& ws) {
        for (const auto& w : ws) {
            if (seen.insert(w).second) out.push_back(w);
        }
    };
    for (Behavior b : kAllBehaviors) {
        const auto& lex = behavior_lexicon(b);
        push(lex.positive_markers);
        push(lex.negative_markers);
        push(lex.topics);
    }
    push(question_words());
    push(option_fillers());
    push(task_words());
    push({"must", "always", "be", "careful", "helpful", "obedient", "cautious", "truthful",
          "assistant", "are", "and", "user", "request", "respond", "every", "each"});
    return out;
}

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
        if (words_[i].empty() || words_[i].find_first_of(" \t\n") != std::string::npos) {
            throw std::invalid_argument("vocab: word " + std::to_string(i) + " is empty or has whitespace");
        }
        if (!index_.emplace(words_[i], i).second) {
            throw std::invalid_argument("vocab: duplicate word '" + words_[i] + "'");
        }
    }
    for (std::string_view req : {kPadToken, kUnkToken, kAnswerA, kAnswerB, kAnswerC, kAnswerD}) {
        if (!contains(req)) {
            throw std::invalid_argument("vocab: missing reserved token '" + std::string(req) + "'");
        }
    }
    pad_ = id(kPadToken);
    unk_ = id(kUnkToken);
    a_ = id(kAnswerA);
    b_ = id(kAnswerB);
    options_ = {a_, b_, id(kAnswerC), id(kAnswerD)};
}

std::size_t Vocab::id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) throw std::out_of_range("vocab: unknown word '" + std::string(word) + "'");
    return it->second;
}

bool Vocab::is_option(std::size_t id) const {
    return std::find(options_.begin(), options_.end(), id) != options_.end();
}

TokenIds Vocab::encode(std::string_view text) const {
    TokenIds ids;
    std::istringstream in{std::string(text)};
    std::string w;
    while (in >> w) {
        auto it = index_.find(w);
        ids.push_back(it == index_.end() ? unk_ : it->second);
    }
    return ids;
}

std::string Vocab::decode(const TokenIds& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += words_.at(ids[i]);
    }
    return out;
}

}  // namespace visteer
