// Command-line front end. Everything goes through the C interface.

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dualseg/dualseg.h"

namespace {

constexpr int exit_ok = 0;
constexpr int exit_runtime = 1;
constexpr int exit_usage = 2;

// Runtime failures are the ones a correct invocation can still hit.
int exit_code(dseg_status s) {
    switch (s) {
        case DSEG_OK: return exit_ok;
        case DSEG_ERR_NUMERIC:
        case DSEG_ERR_RESOURCE:
        case DSEG_ERR_INTERNAL: return exit_runtime;
        default: return exit_usage;
    }
}

int report(dseg_status s) {
    if (s != DSEG_OK) std::fprintf(stderr, "error (%s): %s\n", dseg_status_name(s), dseg_last_error());
    return exit_code(s);
}

template <typename T, void (*Free)(T*)>
struct Deleter {
    void operator()(T* p) const { Free(p); }
};
using ConfigPtr = std::unique_ptr<dseg_config, Deleter<dseg_config, dseg_config_free>>;
using ModelPtr = std::unique_ptr<dseg_model, Deleter<dseg_model, dseg_model_free>>;
using ImagePtr = std::unique_ptr<dseg_image, Deleter<dseg_image, dseg_image_free>>;
using ReportPtr = std::unique_ptr<dseg_report, Deleter<dseg_report, dseg_report_free>>;

std::string config_key_help() {
    std::string out = "\nConfig keys (file lines 'key = value', or --set key=value):\n";
    for (size_t i = 0; i < dseg_config_key_count(); ++i) {
        char line[256];
        std::snprintf(line, sizeof line, "  %-16s %s\n", dseg_config_key_name(i), dseg_config_key_help(i));
        out += line;
    }
    return out;
}

// "dir/pred.pgm" -> "dir/pred" + suffix
std::string sibling(const std::string& out, const std::string& suffix) {
    const auto slash = out.find_last_of('/');
    const auto dot = out.find_last_of('.');
    const bool has_ext = dot != std::string::npos && (slash == std::string::npos || dot > slash);
    return (has_ext ? out.substr(0, dot) : out) + suffix;
}

struct SynthArgs {
    std::string out;
    std::int64_t count = 8;
    std::int64_t size = 64;
    std::uint64_t seed = 1;
};

int run_synth(const SynthArgs& a) {
    if (auto s = dseg_synth_write(a.out.c_str(), a.count, a.size, a.seed)) return report(s);
    std::printf("wrote %lld samples of %lldx%lld to %s\n", static_cast<long long>(a.count),
                static_cast<long long>(a.size), static_cast<long long>(a.size), a.out.c_str());
    return exit_ok;
}

struct TrainArgs {
    std::string config;
    std::vector<std::string> sets;
    std::string seed, steps, checkpoint, log, learning_rate;
};

int run_train(const TrainArgs& a) {
    dseg_config* raw = nullptr;
    if (auto s = dseg_config_load(a.config.c_str(), &raw)) return report(s);
    ConfigPtr config(raw);
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& kv : a.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
            return exit_usage;
        }
        overrides.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
    }
    // dedicated flags win over --set
    const std::pair<const char*, const std::string*> flags[] = {
        {"seed", &a.seed}, {"steps", &a.steps}, {"checkpoint", &a.checkpoint}, {"log", &a.log},
        {"learning_rate", &a.learning_rate}};
    for (const auto& [key, value] : flags) {
        if (!value->empty()) overrides.emplace_back(key, *value);
    }
    for (const auto& [key, value] : overrides) {
        if (auto s = dseg_config_set(config.get(), key.c_str(), value.c_str())) return report(s);
    }
    if (auto s = dseg_config_validate(config.get())) return report(s);
    dseg_train_summary summary{};
    if (auto s = dseg_train(config.get(), &summary)) return report(s);
    std::printf("trained %lld steps, final loss %.6f\n", static_cast<long long>(summary.steps), summary.final_loss);
    if (summary.has_best) {
        std::printf("best eval at step %lld: F1 %.6f AUC %.6f\n", static_cast<long long>(summary.best_step),
                    summary.best.f1, summary.best.auc);
    }
    return exit_ok;
}

struct EvalArgs {
    std::string checkpoint, dataset, report;
};

int run_eval(const EvalArgs& a) {
    ModelPtr model;
    if (a.checkpoint != "oracle") {
        dseg_model* raw = nullptr;
        if (auto s = dseg_model_load(a.checkpoint.c_str(), &raw)) return report(s);
        model.reset(raw);
    }
    dseg_report* raw = nullptr;
    if (auto s = dseg_evaluate(model.get(), a.dataset.c_str(), &raw)) return report(s);
    ReportPtr rep(raw);
    std::fputs(dseg_report_table(rep.get()), stdout);
    if (!a.report.empty()) {
        if (auto s = dseg_report_write(rep.get(), a.report.c_str())) return report(s);
    }
    return exit_ok;
}

struct PredictArgs {
    std::string checkpoint, image, out;
    double threshold = 0.5;
    bool overlay = false;
    bool raw = false;
};

int run_predict(const PredictArgs& a) {
    dseg_model* m = nullptr;
    if (auto s = dseg_model_load(a.checkpoint.c_str(), &m)) return report(s);
    ModelPtr model(m);
    dseg_image* im = nullptr;
    if (auto s = dseg_image_load(a.image.c_str(), &im)) return report(s);
    ImagePtr image(im);
    std::int64_t h = 0, w = 0;
    dseg_image_size(image.get(), &h, &w, nullptr);
    std::vector<float> p(static_cast<std::size_t>(h * w));
    if (auto s = dseg_predict(model.get(), image.get(), p.data())) return report(s);

    const auto mask = sibling(a.out, "_mask.pgm");
    if (auto s = dseg_write_mask_pgm(mask.c_str(), p.data(), h, w, a.threshold)) return report(s);
    if (auto s = dseg_write_probability_pgm(a.out.c_str(), p.data(), h, w)) return report(s);
    std::printf("probability map %s\nmask %s\n", a.out.c_str(), mask.c_str());
    if (a.overlay) {
        const auto path = sibling(a.out, "_overlay.ppm");
        if (auto s = dseg_write_overlay_ppm(path.c_str(), image.get(), p.data(), a.threshold)) return report(s);
        std::printf("overlay %s\n", path.c_str());
    }
    if (a.raw) {
        const auto path = sibling(a.out, ".f32");
        if (auto s = dseg_write_raw_f32(path.c_str(), p.data(), h * w)) return report(s);
        std::printf("raw %s (%lldx%lld float32)\n", path.c_str(), static_cast<long long>(h),
                    static_cast<long long>(w));
    }
    return exit_ok;
}

struct GradArgs {
    std::string scope;
    std::uint64_t seed = 1;
};

int run_gradcheck(const GradArgs& a) {
    int passed = 0;
    char* table = nullptr;
    if (auto s = dseg_gradcheck(a.scope.c_str(), a.seed, &passed, &table)) return report(s);
    std::fputs(table, stdout);
    dseg_free(table);
    return passed ? exit_ok : exit_runtime;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Retinal vessel segmentation: synthesis, training, evaluation, prediction, gradient checks.\n"
                 "Exit codes: 0 success, 1 runtime failure, 2 usage or input error."};
    app.set_version_flag("--version", std::string(dseg_version()));
    app.set_help_all_flag("--help-all", "Print the help of every subcommand and exit");
    app.require_subcommand(1);
    app.fallthrough(false);

    SynthArgs synth;
    auto* cmd_synth = app.add_subcommand("synth", "Write a synthetic vessel dataset (PGMs + manifest)");
    cmd_synth->add_option("--out", synth.out, "Output directory")->required();
    cmd_synth->add_option("--count", synth.count, "Number of samples")->capture_default_str()->check(CLI::NonNegativeNumber);
    cmd_synth->add_option("--size", synth.size, "Image side length (>= 32)")->capture_default_str();
    cmd_synth->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();

    TrainArgs train;
    auto* cmd_train = app.add_subcommand("train", "Train from a config file");
    cmd_train->add_option("--config", train.config, "Config file (key = value lines)")->required();
    cmd_train->add_option("--set", train.sets, "Override a config key: key=value (repeatable)");
    cmd_train->add_option("--seed", train.seed, "Override 'seed'");
    cmd_train->add_option("--steps", train.steps, "Override 'steps'");
    cmd_train->add_option("--learning-rate", train.learning_rate, "Override 'learning_rate'");
    cmd_train->add_option("--checkpoint", train.checkpoint, "Override 'checkpoint' (best model path)");
    cmd_train->add_option("--log", train.log, "Override 'log' (training log path)");
    cmd_train->footer(config_key_help());

    EvalArgs eval;
    auto* cmd_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    cmd_eval->add_option("--checkpoint", eval.checkpoint,
                         "Checkpoint file, or 'oracle' to score the ground truth itself")
        ->required();
    cmd_eval->add_option("--dataset", eval.dataset,
                         "drive:ROOT:SPLIT | stare:ROOT:SPLIT:LIST | chasedb1:ROOT:SPLIT | synthetic:DIR | "
                         "synth:COUNT:SIZE:SEED")
        ->required();
    cmd_eval->add_option("--report", eval.report, "Write the table to PATH and the key-value means to PATH.kv");

    PredictArgs predict;
    auto* cmd_predict = app.add_subcommand("predict", "Segment one image");
    cmd_predict->add_option("--checkpoint", predict.checkpoint, "Checkpoint file")->required();
    cmd_predict->add_option("--image", predict.image, "Input image (pgm, ppm, gif, png, tif, jpg)")->required();
    cmd_predict->add_option("--out", predict.out,
                            "Probability map PGM; the mask goes to <stem>_mask.pgm next to it")
        ->required();
    cmd_predict->add_option("--threshold", predict.threshold, "Mask threshold, vessel iff p > threshold")
        ->capture_default_str();
    cmd_predict->add_flag("--overlay", predict.overlay, "Also write <stem>_overlay.ppm with vessels tinted red");
    cmd_predict->add_flag("--raw", predict.raw, "Also write <stem>.f32, the exact probabilities as float32");

    GradArgs grad;
    auto* cmd_grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks in 64-bit");
    cmd_grad->add_option("--scope", grad.scope, "ops | attention | model")
        ->required()
        ->check(CLI::IsMember({"ops", "attention", "model"}));
    cmd_grad->add_option("--seed", grad.seed, "Seed for shapes and values")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_usage;
    }

    if (cmd_synth->parsed()) return run_synth(synth);
    if (cmd_train->parsed()) return run_train(train);
    if (cmd_eval->parsed()) return run_eval(eval);
    if (cmd_predict->parsed()) return run_predict(predict);
    if (cmd_grad->parsed()) return run_gradcheck(grad);
    return exit_usage;
}
