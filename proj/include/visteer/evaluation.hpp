#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "visteer/corpus.hpp"
#include "visteer/steering.hpp"

namespace visteer {

enum class MethodKind { None, SystemPrompt, SteeringVector, Image };

std::string_view method_kind_name(MethodKind kind);
MethodKind parse_method_kind(std::string_view name);

struct EvalMethod {
    MethodKind kind = MethodKind::None;
    std::string label;          // report name; defaults to the kind name
    std::string prompt_text;    // SystemPrompt
    std::optional<SteeringVectorSet> vectors;  // SteeringVector
    double multiplier = 0.0;
    std::size_t last_n = 1;
    std::optional<Tensor> image;  // Image

    static EvalMethod none();
    static EvalMethod system_prompt(std::string text, std::string label = {});
    static EvalMethod steering(SteeringVectorSet vectors, double multiplier, std::size_t last_n, std::string label = {});
    static EvalMethod with_image(Tensor image, std::string label = {});

    void validate() const;
    std::string name() const;
};

struct BasResult {
    double score = 0.0;
    std::size_t count = 0;    // examples that contributed
    std::size_t skipped = 0;  // degenerate examples
};

// Per-example ratios are accumulated in fixed point (2^-36) and the mean is
// reported on a 2^-40 grid, so exchanging positive and negative answers gives
// exactly 1 - score.
BasResult bas(const ToyVLM& model, const std::vector<BehaviorExample>& test_set, const EvalMethod& method,
              const Tensor& baseline_image);

double system_prompt_eval(const ToyVLM& model, const std::vector<BehaviorExample>& test_set,
                          const std::string& prompt_text, const Tensor& baseline_image);

// Seeded i.i.d. uniform [0, 1] pixels.
Tensor random_image(std::size_t height, std::size_t width, std::uint64_t seed);

struct TransferResult {
    double score_random = 0.0;
    double score_image = 0.0;
    double delta = 0.0;  // image - random
};

TransferResult transfer_delta(const Tensor& image, const ToyVLM& unseen_model,
                              const std::vector<BehaviorExample>& test_set, std::uint64_t random_seed);

// Four-way argmax accuracy over option log-probabilities; ties go to the earliest option.
double unrelated_task_eval(const Tensor& image, const ToyVLM& model, const std::vector<TaskItem>& tasks);

struct ReportRow {
    std::string model;
    std::string behavior;
    std::string method;
    double bas = 0.0;
    std::optional<double> delta;  // vs the model's no-steering row, or vs a random image for transfer rows
    std::size_t count = 0;
    std::uint64_t seed = 0;
};

struct EvalReport {
    std::vector<ReportRow> rows;
    // Extra scalar results (unrelated-task accuracies, losses) keyed by name.
    std::vector<std::pair<std::string, double>> metrics;

    std::string to_json() const;
    std::string to_csv() const;
    // Grouped bar chart of BAS per method for each (model, behavior).
    std::string to_svg() const;
    static EvalReport from_json(const std::string& text);
};

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace visteer
