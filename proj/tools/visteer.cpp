// visteer: extract steering vectors, optimize steering images, evaluate, report.
//
// Output directory layout:
//   config.toml              resolved config
//   corpus.jsonl             behavior corpus
//   models/<name>.ckpt       model checkpoints
//   vectors/<name>-<behavior>.json/.bin
//   image.png, image.raw     optimized image (8-bit and lossless)
//   loss.csv, optimize.json  per-iteration trace and summary
//   checkpoints/iter-NNNNNN.{png,raw,csv}
//   report.json, report.csv, report.svg

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "visteer/experiment.hpp"
#include "visteer/io.hpp"
#include "visteer/parallel.hpp"
#include "visteer/tensor.hpp"

namespace fs = std::filesystem;
using namespace visteer;

namespace {

constexpr int kExitNotConverged = 3;

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string mode;
    std::string image;
};

ExperimentConfig resolve(const Options& o) {
    ExperimentConfig c = o.config.empty() ? demo_config() : load_config(o.config);
    if (o.seed) {
        c.seed = *o.seed;
        c.optimize.universal.seed = *o.seed;
        c.optimize.pgd.seed = *o.seed;
    }
    if (!o.out.empty()) c.output = o.out;
    if (!o.mode.empty()) {
        if (o.mode == "universal") {
            c.optimize.mode = OptimizeMode::Universal;
        } else if (o.mode == "pgd") {
            c.optimize.mode = OptimizeMode::Pgd;
        } else {
            throw std::invalid_argument("--mode must be 'universal' or 'pgd'");
        }
    }
    c.validate();
    return c;
}

std::string behavior_str(const ExperimentConfig& c) { return std::string(behavior_name(c.corpus.behavior)); }

fs::path vector_path(const ExperimentConfig& c, std::size_t i) {
    return fs::path(c.output) / "vectors" / (c.models[i].config.name + "-" + behavior_str(c) + ".json");
}

// Corpus and vectors from an earlier `extract`, when present.
void load_artifacts(Lab& lab, bool require) {
    const auto& c = lab.config();
    const fs::path corpus = fs::path(c.output) / "corpus.jsonl";
    if (fs::exists(corpus)) {
        lab.set_corpus(read_corpus_jsonl(corpus));
    } else if (require) {
        throw std::runtime_error("missing " + corpus.string() + "; run `visteer extract` with the same config first");
    }
    for (std::size_t i = 0; i < lab.model_count(); ++i) {
        const fs::path p = vector_path(c, i);
        if (fs::exists(p)) {
            lab.set_vectors(i, load_vectors(p));
        } else if (require) {
            throw std::runtime_error("missing " + p.string() + "; run `visteer extract` with the same config first");
        }
    }
}

int cmd_extract(const Options& o) {
    const ExperimentConfig c = resolve(o);
    Lab lab(c);
    const fs::path out(c.output);
    fs::create_directories(out / "vectors");
    fs::create_directories(out / "models");
    write_text_file(out / "config.toml", serialize_config(c));
    write_corpus_jsonl(out / "corpus.jsonl", lab.corpus());
    for (std::size_t i = 0; i < lab.model_count(); ++i) {
        const ToyVLM& m = lab.model(i);
        save_model(out / "models" / (m.config().name + ".ckpt"), m);
        const SteeringVectorSet& v = lab.vectors(i);
        save_vectors(vector_path(c, i), v, {m.config().name, behavior_str(c), c.steering_for(i)});
        std::cout << "wrote " << vector_path(c, i).string() << "\n";
        for (const auto& p : m.planted()) {
            if (!v.vectors.contains(p.layer)) continue;
            std::printf("cosine %s layer %zu %.6f\n", m.config().name.c_str(), p.layer,
                        cosine_similarity(v.at(p.layer).data(), p.direction.data()));
        }
    }
    return 0;
}

void write_loss_csv(const fs::path& path, const std::vector<std::string>& names,
                    const std::vector<IterationRecord>& trace) {
    std::ostringstream s;
    s << "iteration";
    for (const auto& n : names) s << ",loss_" << n;
    s << ",ensemble_loss,step\n";
    s.precision(17);
    for (const auto& r : trace) {
        s << r.iteration;
        for (double l : r.model_losses) s << "," << l;
        s << "," << r.ensemble_loss << "," << r.step << "\n";
    }
    write_text_file(path, s.str());
}

int cmd_optimize(const Options& o) {
    const ExperimentConfig c = resolve(o);
    const bool pgd = c.optimize.mode == OptimizeMode::Pgd;
    if (pgd && c.models.size() != 1) {
        throw std::invalid_argument("PGD mode requires exactly one model, config has " +
                                    std::to_string(c.models.size()));
    }
    Lab lab(c);
    load_artifacts(lab, true);
    const fs::path out(c.output);
    fs::create_directories(out);

    std::vector<std::string> names;
    for (const auto& m : c.models) names.push_back(m.config.name);
    std::vector<IterationRecord> trace;
    const std::size_t every = c.optimize.checkpoint_every;
    const std::size_t total = pgd ? c.optimize.pgd.iterations : c.optimize.universal.iterations;
    auto progress = [&](std::size_t it, const Tensor& image, const IterationRecord& rec) {
        trace.push_back(rec);
        if (it % 100 == 0 || it == total) {
            std::fprintf(stderr, "iter %zu/%zu loss %.6g step %.4g\n", it, total, rec.ensemble_loss, rec.step);
        }
        if (every > 0 && it % every == 0) {
            char stem[32];
            std::snprintf(stem, sizeof stem, "iter-%06zu", it);
            const fs::path dir = out / "checkpoints";
            fs::create_directories(dir);
            write_png(dir / (std::string(stem) + ".png"), image);
            write_raw_image(dir / (std::string(stem) + ".raw"), image);
            write_loss_csv(dir / (std::string(stem) + ".csv"), names, trace);
        }
    };

    OptimizeResult res;
    try {
        std::vector<std::size_t> all(lab.model_count());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        res = pgd ? lab.optimize_pgd(0, progress) : lab.optimize_universal(all, progress);
    } catch (const std::exception&) {
        write_loss_csv(out / "loss.csv", names, trace);
        std::cerr << "optimization failed; partial trace in " << (out / "loss.csv").string() << "\n";
        throw;
    }
    write_png(out / "image.png", res.image);
    write_raw_image(out / "image.raw", res.image);
    write_loss_csv(out / "loss.csv", names, res.trace);

    const double ratio = res.image_loss / res.initial_loss;
    const bool converged = ratio < c.optimize.convergence_ratio;
    nlohmann::ordered_json summary;
    summary["mode"] = pgd ? "pgd" : "universal";
    summary["models"] = names;
    summary["iterations"] = res.trace.size();
    summary["initial_loss"] = res.initial_loss;
    summary["final_loss"] = res.image_loss;
    summary["ratio"] = ratio;
    summary["skipped_outer_updates"] = res.skipped_outer;
    summary["converged"] = converged;
    write_text_file(out / "optimize.json", summary.dump(2) + "\n");
    std::printf("initial loss %.6g final loss %.6g ratio %.4f (%s threshold %.3g)\n", res.initial_loss,
                res.image_loss, ratio, converged ? "below" : "NOT below", c.optimize.convergence_ratio);
    if (res.skipped_outer > 0) std::printf("outer update skipped on %zu iterations\n", res.skipped_outer);
    return converged ? 0 : kExitNotConverged;
}

int cmd_eval(const Options& o) {
    const ExperimentConfig c = resolve(o);
    Lab lab(c);
    load_artifacts(lab, false);
    const fs::path out(c.output);
    const std::string behavior = behavior_str(c);
    const auto& test = lab.corpus().test;

    fs::path image_path = o.image;
    if (image_path.empty()) {
        for (const char* name : {"image.raw", "image.png"}) {
            if (fs::exists(out / name)) {
                image_path = out / name;
                break;
            }
        }
    }
    std::optional<Tensor> image, quantized;
    if (!image_path.empty()) {
        image = load_image(image_path);
        fs::path png = image_path;
        png.replace_extension(".png");
        if (fs::exists(png)) {
            const Tensor q = read_png(png);
            if (!(q == *image)) quantized = q;
        }
    }

    EvalReport report;
    std::set<std::string> methods(c.eval.methods.begin(), c.eval.methods.end());
    bool warned = false;
    for (std::size_t i = 0; i < lab.model_count(); ++i) {
        const ToyVLM& m = lab.model(i);
        const std::string& name = m.config().name;
        double none_score = 0.0;
        auto add = [&](const std::string& method, const BasResult& r, bool with_delta) {
            ReportRow row{name, behavior, method, r.score, std::nullopt, r.count, c.seed};
            if (with_delta) row.delta = r.score - none_score;
            report.rows.push_back(row);
        };
        const BasResult none = bas(m, test, EvalMethod::none(), lab.baseline());
        none_score = none.score;
        for (const std::string& method : c.eval.methods) {
            switch (parse_method_kind(method)) {
                case MethodKind::None:
                    add(method, none, false);
                    break;
                case MethodKind::SystemPrompt:
                    add(method,
                        bas(m, test,
                            EvalMethod::system_prompt(behavior_system_prompt(c.corpus.behavior, !c.optimize.negative)),
                            lab.baseline()),
                        true);
                    break;
                case MethodKind::SteeringVector:
                    add(method,
                        bas(m, test,
                            EvalMethod::steering(lab.vectors(i), lab.multiplier(i), c.steering_for(i).token_positions),
                            lab.baseline()),
                        true);
                    break;
                case MethodKind::Image:
                    if (!image) {
                        if (!warned) std::cerr << "no image found; skipping the image method\n";
                        warned = true;
                        break;
                    }
                    add(method, bas(m, test, EvalMethod::with_image(*image), lab.baseline()), true);
                    if (quantized) add(method + "_8bit", bas(m, test, EvalMethod::with_image(*quantized), lab.baseline()), true);
                    break;
            }
        }
    }

    if (image && methods.contains("image")) {
        const Tensor rnd = random_image(image->dim(0), image->dim(1), c.eval.random_seed);
        for (std::size_t h = 0; h < lab.heldout_count(); ++h) {
            const ToyVLM& m = lab.heldout(h);
            const TransferResult t = transfer_delta(*image, m, test, c.eval.random_seed);
            report.rows.push_back({m.config().name, behavior, "random_image", t.score_random, std::nullopt,
                                   test.size(), c.eval.random_seed});
            report.rows.push_back({m.config().name, behavior, "image", t.score_image, t.delta, test.size(), c.seed});
        }
        for (std::size_t i = 0; i < lab.model_count(); ++i) {
            const ToyVLM& m = lab.model(i);
            const auto tasks = generate_unrelated_tasks(c.eval.unrelated_tasks, c.eval.task_seed, m.vocab());
            const double acc_r = unrelated_task_eval(rnd, m, tasks);
            const double acc_i = unrelated_task_eval(*image, m, tasks);
            report.metrics.emplace_back("unrelated_accuracy/" + m.config().name + "/random_image", acc_r);
            report.metrics.emplace_back("unrelated_accuracy/" + m.config().name + "/image", acc_i);
            report.metrics.emplace_back("unrelated_accuracy/" + m.config().name + "/delta", acc_i - acc_r);
        }
    }

    fs::create_directories(out);
    write_text_file(out / "report.json", report.to_json());
    write_text_file(out / "report.csv", report.to_csv());
    std::cout << report.to_csv();
    for (const auto& [k, v] : report.metrics) std::printf("%s %.6f\n", k.c_str(), v);
    return 0;
}

int cmd_report(const Options& o) {
    const ExperimentConfig c = resolve(o);
    const fs::path out(c.output);
    const fs::path json = out / "report.json";
    if (!fs::exists(json)) throw std::runtime_error("missing " + json.string() + "; run `visteer eval` first");
    const EvalReport report = EvalReport::from_json(read_text_file(json));
    write_text_file(out / "report.svg", report.to_svg());
    std::cout << "wrote " << (out / "report.svg").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Universal visual steering lab for toy vision-language models"};
    app.require_subcommand(1);
    app.footer(std::string("Environment: ") + kWorkersEnv + " sets the worker thread count (default 1).");
    Options o;
    std::uint64_t seed = 0;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "Experiment TOML file (default: built-in demo)");
        sub->add_option("--seed", seed, "Override the optimizer seed")->each([&](const std::string&) { o.seed = seed; });
        sub->add_option("--out", o.out, "Override the output directory");
        sub->add_option("--mode", o.mode, "universal or pgd")->check(CLI::IsMember({"universal", "pgd"}));
    };
    CLI::App* extract = app.add_subcommand("extract", "Write the corpus, model checkpoints and steering vectors");
    CLI::App* optimize = app.add_subcommand("optimize", "Optimize a steering image; exit 3 if the loss target is missed");
    CLI::App* eval = app.add_subcommand("eval", "Evaluate BAS, transfer and unrelated-task accuracy");
    CLI::App* report = app.add_subcommand("report", "Render report.json as an SVG bar chart");
    for (CLI::App* s : {extract, optimize, eval, report}) common(s);
    eval->add_option("--image", o.image, "Image to evaluate (.raw or .png; a .png prefers its sibling .raw)");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*extract) return cmd_extract(o);
        if (*optimize) return cmd_optimize(o);
        if (*eval) return cmd_eval(o);
        if (*report) return cmd_report(o);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
