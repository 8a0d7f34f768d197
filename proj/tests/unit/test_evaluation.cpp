#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "visteer/corpus.hpp"
#include "visteer/evaluation.hpp"

using namespace visteer;
using visteer::test::tiny_config;

namespace {

ToyVLM planted_model() {
    const ToyVLM m = ToyVLM::build(tiny_config());
    return m.with_planted(1, random_unit_vector(16, 9), 2.0, 0.15, marker_polarity(m.vocab(), Behavior::Refusal));
}

const CorpusSplit& corpus() {
    static const CorpusSplit c = generate_behavior_corpus(Behavior::Refusal, 40, 60, 4);
    return c;
}

}  // namespace

TEST(Bas, EqualOptionLogitsGiveExactlyHalf) {
    const ToyVLM m = ToyVLM::build(tiny_config());
    const auto r = bas(m, corpus().test, EvalMethod::none(), baseline_image(16, 16, 5));
    EXPECT_EQ(r.score, 0.5);
    EXPECT_EQ(r.count, corpus().test.size());
    EXPECT_EQ(r.skipped, 0u);
}

TEST(Bas, LabelSwapIsExactComplement) {
    const ToyVLM m = planted_model();
    const Tensor x = baseline_image(16, 16, 5);
    for (std::uint64_t seed : {1, 2, 3}) {
        const Tensor img = random_image(16, 16, seed);
        const double s = bas(m, corpus().test, EvalMethod::with_image(img), x).score;
        const double t = bas(m, swap_labels(corpus().test), EvalMethod::with_image(img), x).score;
        EXPECT_EQ(t, 1.0 - s);
        EXPECT_GE(s, 0.0);
        EXPECT_LE(s, 1.0);
    }
}

TEST(Bas, DuplicationInvariant) {
    const ToyVLM m = planted_model();
    const Tensor x = baseline_image(16, 16, 5);
    auto doubled = corpus().test;
    doubled.insert(doubled.end(), corpus().test.begin(), corpus().test.end());
    EXPECT_EQ(bas(m, doubled, EvalMethod::none(), x).score, bas(m, corpus().test, EvalMethod::none(), x).score);
}

TEST(Bas, NoneEqualsBaselineImage) {
    const ToyVLM m = planted_model();
    const Tensor x = baseline_image(16, 16, 5);
    EXPECT_EQ(bas(m, corpus().test, EvalMethod::none(), x).score,
              bas(m, corpus().test, EvalMethod::with_image(x), random_image(16, 16, 1)).score);
}

TEST(Bas, EmptyOrInvalid) {
    const ToyVLM m = planted_model();
    const Tensor x = baseline_image(16, 16, 5);
    EXPECT_THROW(bas(m, {}, EvalMethod::none(), x), std::invalid_argument);
    EvalMethod bad;
    bad.kind = MethodKind::Image;
    EXPECT_THROW(bas(m, corpus().test, bad, x), std::invalid_argument);
}

TEST(Bas, MethodNames) {
    for (MethodKind k : {MethodKind::None, MethodKind::SystemPrompt, MethodKind::SteeringVector, MethodKind::Image})
        EXPECT_EQ(parse_method_kind(method_kind_name(k)), k);
    EXPECT_THROW(parse_method_kind("nope"), std::invalid_argument);
    EXPECT_EQ(EvalMethod::with_image(Tensor({2, 2, 3}), "x8").name(), "x8");
}

TEST(SystemPrompt, NeutralPaddingBarelyMoves) {
    const ToyVLM m = planted_model();
    const Tensor x = baseline_image(16, 16, 5);
    const double plain = bas(m, corpus().test, EvalMethod::none(), x).score;
    EXPECT_LT(std::abs(system_prompt_eval(m, corpus().test, "the the the", x) - plain), 0.05);
    EXPECT_EQ(system_prompt_eval(m, corpus().test, "please answer", x),
              system_prompt_eval(m, corpus().test, "please answer", x));
}

TEST(SystemPrompt, DirectionsMoveOppositeWays) {
    const ToyVLM m = planted_model();
    const Tensor x = baseline_image(16, 16, 5);
    const double plain = bas(m, corpus().test, EvalMethod::none(), x).score;
    const double up = system_prompt_eval(m, corpus().test, behavior_system_prompt(Behavior::Refusal, true), x);
    const double down = system_prompt_eval(m, corpus().test, behavior_system_prompt(Behavior::Refusal, false), x);
    EXPECT_GT(up, plain);
    EXPECT_LT(down, plain);
}

TEST(Transfer, RandomImageGivesZeroDelta) {
    const ToyVLM m = planted_model();
    const auto r = transfer_delta(random_image(16, 16, 99), m, corpus().test, 99);
    EXPECT_EQ(r.delta, 0.0);
    EXPECT_EQ(r.score_image, r.score_random);
    const auto s = transfer_delta(baseline_image(16, 16, 5), m, corpus().test, 99);
    EXPECT_EQ(s.delta, s.score_image - s.score_random);
}

TEST(RandomImage, UniformAndSeeded) {
    const Tensor a = random_image(32, 32, 1);
    EXPECT_EQ(a, random_image(32, 32, 1));
    EXPECT_NE(a, random_image(32, 32, 2));
    double mean = 0.0;
    for (double v : a.values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        mean += v / static_cast<double>(a.size());
    }
    EXPECT_NEAR(mean, 0.5, 0.02);
}

TEST(UnrelatedTasks, AccuracyInvariantToOrder) {
    const ToyVLM m = ToyVLM::build(tiny_config());
    auto tasks = generate_unrelated_tasks(300, 3, m.vocab());
    const Tensor x = baseline_image(16, 16, 5);
    const double acc = unrelated_task_eval(x, m, tasks);
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
    std::mt19937_64 g(4);
    std::shuffle(tasks.begin(), tasks.end(), g);
    EXPECT_EQ(unrelated_task_eval(x, m, tasks), acc);
    EXPECT_THROW(unrelated_task_eval(x, m, {}), std::invalid_argument);
}

TEST(UnrelatedTasks, TaskHeadIsAboveChance) {
    const ToyVLM m = ToyVLM::build(tiny_config());
    const auto tasks = generate_unrelated_tasks(2000, 3, m.vocab());
    EXPECT_GT(unrelated_task_eval(baseline_image(16, 16, 5), m, tasks), 0.35);
}

TEST(Report, JsonCsvSvg) {
    EvalReport r;
    r.rows.push_back({"model_a", "refusal", "none", 0.5, std::nullopt, 128, 0});
    r.rows.push_back({"model_a", "refusal", "image", 0.3125, -0.1875, 128, 7});
    r.rows.push_back({"model_b", "refusal", "image", 0.25, -0.25, 128, 7});
    r.metrics.push_back({"unrelated_accuracy/model_a/delta", -0.001});
    const EvalReport back = EvalReport::from_json(r.to_json());
    ASSERT_EQ(back.rows.size(), 3u);
    EXPECT_EQ(back.rows[1].method, "image");
    EXPECT_EQ(back.rows[1].bas, 0.3125);
    EXPECT_EQ(back.rows[1].delta, -0.1875);
    EXPECT_FALSE(back.rows[0].delta);
    EXPECT_EQ(back.metrics, r.metrics);

    const std::string csv = r.to_csv();
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
    EXPECT_EQ(csv.rfind("model,behavior,method,bas", 0), 0u);

    const std::string svg = r.to_svg();
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("model_b"), std::string::npos);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
}
