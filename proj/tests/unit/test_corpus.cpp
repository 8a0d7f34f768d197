#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "visteer/corpus.hpp"

using namespace visteer;

TEST(Corpus, DefaultCounts) {
    EXPECT_EQ(default_counts(Behavior::Refusal).train, 320u);
    EXPECT_EQ(default_counts(Behavior::Refusal).test, 128u);
    EXPECT_EQ(default_counts(Behavior::Sycophancy).train, 1000u);
    EXPECT_EQ(default_counts(Behavior::Sycophancy).test, 50u);
    EXPECT_EQ(default_counts(Behavior::Survival).train, 700u);
    EXPECT_EQ(default_counts(Behavior::Survival).test, 300u);
    for (Behavior b : kAllBehaviors) {
        const auto c = generate_behavior_corpus(b, 1);
        EXPECT_EQ(c.train.size(), default_counts(b).train);
        EXPECT_EQ(c.test.size(), default_counts(b).test);
    }
}

TEST(Corpus, AnswerLettersBalanced) {
    for (Behavior b : kAllBehaviors) {
        const auto c = generate_behavior_corpus(b, 2);
        for (const auto* split : {&c.train, &c.test}) {
            std::size_t a = 0;
            for (const auto& e : *split) {
                ASSERT_TRUE(e.positive == "(A)" || e.positive == "(B)");
                ASSERT_NE(e.positive, e.negative);
                EXPECT_EQ(e.behavior, b);
                a += e.positive == "(A)";
            }
            EXPECT_NEAR(static_cast<double>(a) / static_cast<double>(split->size()), 0.5, 0.05) << behavior_name(b);
        }
    }
}

TEST(Corpus, DeterministicAndDisjoint) {
    const auto a = generate_behavior_corpus(Behavior::Survival, 5);
    const auto b = generate_behavior_corpus(Behavior::Survival, 5);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.test, b.test);
    EXPECT_NE(a.train, generate_behavior_corpus(Behavior::Survival, 6).train);

    std::set<std::string> train;
    for (const auto& e : a.train) train.insert(e.prompt);
    EXPECT_EQ(train.size(), a.train.size());
    for (const auto& e : a.test) EXPECT_EQ(train.count(e.prompt), 0u) << e.prompt;
    for (const auto& e : a.train) EXPECT_TRUE(e.prompt.ends_with("answer :"));
}

TEST(Corpus, CapacityExceeded) {
    const std::size_t cap = template_capacity(Behavior::Refusal);
    EXPECT_GE(cap, 448u);
    EXPECT_THROW(generate_behavior_corpus(Behavior::Refusal, cap, 1, 1), std::invalid_argument);
}

TEST(Corpus, SwapLabels) {
    const auto c = generate_behavior_corpus(Behavior::Refusal, 10, 4, 1);
    const auto s = swap_labels(c.test);
    for (std::size_t i = 0; i < s.size(); ++i) {
        EXPECT_EQ(s[i].positive, c.test[i].negative);
        EXPECT_EQ(s[i].negative, c.test[i].positive);
    }
    EXPECT_EQ(swap_labels(s), c.test);
}

TEST(Corpus, SystemPromptsTokenize) {
    const Vocab v;
    for (Behavior b : kAllBehaviors) {
        for (bool toward : {true, false}) {
            const std::string p = behavior_system_prompt(b, toward);
            EXPECT_FALSE(p.empty());
            for (auto id : v.encode(p)) EXPECT_NE(id, v.unk());
        }
        EXPECT_NE(behavior_system_prompt(b, true), behavior_system_prompt(b, false));
    }
}

TEST(UnrelatedTasks, FourteenThousandBalanced) {
    const auto tasks = generate_unrelated_tasks(14000, 3);
    ASSERT_EQ(tasks.size(), 14000u);
    std::array<std::size_t, kTaskOptions> counts{};
    for (const auto& t : tasks) {
        ASSERT_LT(t.answer, kTaskOptions);
        ++counts[t.answer];
    }
    // Any constant guess scores about 1/4.
    for (std::size_t c : counts) EXPECT_NEAR(static_cast<double>(c) / 14000.0, 0.25, 0.02);
    const auto again = generate_unrelated_tasks(14000, 3);
    for (std::size_t i = 0; i < tasks.size(); i += 997) {
        EXPECT_EQ(tasks[i].prompt, again[i].prompt);
        EXPECT_EQ(tasks[i].answer, again[i].answer);
    }
}

TEST(Corpus, JsonlRoundTrip) {
    const auto c = generate_behavior_corpus(Behavior::Sycophancy, 30, 12, 9);
    const auto path = std::filesystem::temp_directory_path() / "visteer_corpus_test.jsonl";
    write_corpus_jsonl(path, c);
    const auto r = read_corpus_jsonl(path);
    EXPECT_EQ(r.behavior, c.behavior);
    EXPECT_EQ(r.train, c.train);
    EXPECT_EQ(r.test, c.test);
    std::filesystem::remove(path);
    EXPECT_THROW(read_corpus_jsonl(path), std::runtime_error);
}
