// Acceptance gate. One PASS/FAIL line per criterion; `--only NAME` runs a
// single criterion, `--list` prints the names. Exit status 1 if any line
// failed.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "dualseg/attention.hpp"
#include "dualseg/checkpoint.hpp"
#include "dualseg/errors.hpp"
#include "dualseg/gradsuite.hpp"
#include "dualseg/metrics.hpp"
#include "dualseg/ops.hpp"
#include "dualseg/training.hpp"

using namespace dualseg;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void verdict(const std::string& name, bool ok, const std::string& detail) {
    std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

// Reported, not counted: the ablation's "equal within noise" outcome.
void soft_failure(const std::string& name, const std::string& detail) {
    std::printf("PASS %s: soft failure, %s\n", name.c_str(), detail.c_str());
    std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("dualseg_acceptance_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo, double hi) {
    std::vector<T> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return Tensor<T>(std::move(shape), std::move(v));
}

// --------------------------------------------------------------- gradients

void gradient_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    bool ok = true;
    std::string worst;
    double worst_op = 0.0, worst_model = 0.0;
    for (auto scope : {gradsuite::Scope::ops, gradsuite::Scope::attention, gradsuite::Scope::model}) {
        const auto entries = gradsuite::run(scope, 1);
        std::fputs(gradsuite::format(entries).c_str(), stdout);
        ok = ok && gradsuite::all_passed(entries);
        for (const auto& e : entries) {
            if (scope != gradsuite::Scope::model) {
                ok = ok && e.cases >= 5 && e.tolerance <= 1e-5;
                if (!e.absolute) worst_op = std::max(worst_op, e.max_error);
            } else {
                ok = ok && e.coordinates == 50 && e.tolerance <= 1e-4;
                worst_model = std::max(worst_model, e.max_error);
            }
        }
    }
    const double elapsed = seconds_since(t0);
    verdict("gradient_suite", ok && elapsed < 120.0,
            fmt("max relative error %.3e over primitives (< 1e-5), %.3e model sample (< 1e-4), %.1f s (< 120 s)",
                worst_op, worst_model, elapsed));
}

// --------------------------------------------------------------- attention

// Max |row sum - 1| over every row of the last axis; -1 if any entry is
// negative or non-finite.
double row_stochastic_error(const Tensor<float>& map) {
    const auto cols = map.dim(-1);
    const auto rows = map.size() / cols;
    double worst = 0.0;
    for (std::int64_t r = 0; r < rows; ++r) {
        double total = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) {
            const double v = map[r * cols + c];
            if (!std::isfinite(v) || v < 0.0) return -1.0;
            total += v;
        }
        worst = std::max(worst, std::abs(total - 1.0));
    }
    return worst;
}

void attention_normalization() {
    Rng rng(2024);
    double worst = 0.0;
    int extremes = 0;
    bool ok = true;
    for (int t = 0; t < 100; ++t) {
        const std::int64_t c = 8 * rng.uniform_int(1, 3);
        const Shape s{rng.uniform_int(1, 3), c, rng.uniform_int(2, 9), rng.uniform_int(2, 9)};
        // every fourth input spans +-1e4, every fourth other one holds a few 1e4 spikes
        const double scale = t % 4 == 0 ? 1e4 : std::pow(10.0, rng.uniform(-2.0, 2.0));
        auto f = random_tensor<float>(s, rng, -scale, scale);
        if (t % 4 == 2) {
            auto v = f.mutable_data();
            for (int k = 0; k < 3; ++k) v[static_cast<std::size_t>(rng.uniform_int(0, f.size()))] = rng.bernoulli(0.5) ? 1e4f : -1e4f;
        }
        extremes += t % 4 == 0 || t % 4 == 2;
        auto module = attention::SpatialSelfAttention<float>::create(c, 8, rng);
        const double es = row_stochastic_error(attention::spatial_attention_map(f, module));
        const double ec = row_stochastic_error(attention::channel_attention_map(f));
        if (es < 0 || ec < 0) ok = false;
        worst = std::max({worst, es, ec});
    }
    verdict("attention_normalization", ok && worst <= 1e-6,
            fmt("100 inputs (%d with magnitude 1e4), spatial and channel rows: max |sum - 1| = %.3e (<= 1e-6), "
                "entries finite and non-negative: %s",
                extremes, worst, ok ? "yes" : "no"));
}

void channel_equivariance() {
    Rng rng(77);
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
        const std::int64_t c = rng.uniform_int(2, 17);
        auto f = random_tensor<float>({rng.uniform_int(1, 3), c, rng.uniform_int(1, 9), rng.uniform_int(1, 9)}, rng,
                                      -1, 1);
        std::vector<std::int64_t> perm(static_cast<std::size_t>(c));
        std::iota(perm.begin(), perm.end(), 0);
        for (std::int64_t i = c - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(rng.uniform_int(0, i + 1))]);
        const auto lhs = attention::apply_channel_attention(ops::permute_channels(f, perm));
        const auto rhs = ops::permute_channels(attention::apply_channel_attention(f), perm);
        for (std::int64_t i = 0; i < lhs.size(); ++i) worst = std::max(worst, std::abs(double(lhs[i]) - double(rhs[i])));
    }
    verdict("channel_equivariance", worst <= 1e-6,
            fmt("50 (input, permutation) pairs: max |A(Pf) - P A(f)| = %.3e (<= 1e-6)", worst));
}

// ----------------------------------------------------------------- metrics

LabelMask random_mask(std::int64_t h, std::int64_t w, double p, Rng& rng) {
    LabelMask m(h, w);
    for (auto& v : m.pixels) v = rng.bernoulli(p) ? 1 : 0;
    return m;
}

void metric_oracle() {
    Rng rng(31);
    int exact = 0;
    for (int t = 0; t < 200; ++t) {
        const auto gt = random_mask(16, 16, rng.uniform(0.05, 0.6), rng);
        const auto pred = random_mask(16, 16, rng.uniform(0.05, 0.6), rng);
        double tp = 0, fp = 0, tn = 0, fn = 0;
        for (std::int64_t y = 0; y < 16; ++y) {
            for (std::int64_t x = 0; x < 16; ++x) {
                const bool p = pred.at(y, x) != 0, g = gt.at(y, x) != 0;
                tp += p && g;
                fp += p && !g;
                tn += !p && !g;
                fn += !p && g;
            }
        }
        const auto m = metrics::compute(metrics::confusion(pred, gt));
        const double acc = (tp + tn) / 256.0;
        const double se = tp + fn > 0 ? tp / (tp + fn) : 0.0;
        const double sp = tn + fp > 0 ? tn / (tn + fp) : 0.0;
        const double f1 = 2 * tp + fp + fn > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
        exact += m.acc == acc && m.se == se && m.sp == sp && m.f1 == f1;
    }
    double worst_auc = 0.0;
    for (int t = 0; t < 50; ++t) {
        auto g = random_mask(16, 16, rng.uniform(0.1, 0.5), rng);
        g.pixels[0] = 1;
        g.pixels[1] = 0;
        ProbabilityMap p(16, 16);
        // half the cases quantized to force ties
        const bool ties = t % 2 == 0;
        for (auto& v : p.pixels) v = ties ? float(std::floor(rng.uniform() * 10.0) / 10.0) : float(rng.uniform());
        double good = 0, pairs = 0;
        for (std::size_t i = 0; i < p.pixels.size(); ++i) {
            if (!g.pixels[i]) continue;
            for (std::size_t j = 0; j < p.pixels.size(); ++j) {
                if (g.pixels[j]) continue;
                pairs += 1;
                good += p.pixels[i] > p.pixels[j] ? 1.0 : p.pixels[i] == p.pixels[j] ? 0.5 : 0.0;
            }
        }
        worst_auc = std::max(worst_auc, std::abs(metrics::roc_auc(p, g).auc - good / pairs));
    }
    verdict("metric_oracle", exact == 200 && worst_auc <= 1e-9,
            fmt("%d/200 mask pairs exactly equal to the pixel loop; AUC vs pairwise U statistic max diff %.3e "
                "over 50 cases (<= 1e-9)",
                exact, worst_auc));
}

void bce_closed_forms() {
    Rng rng(5);
    const double ln2 = std::log(2.0);
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
        const auto h = rng.uniform_int(1, 33), w = rng.uniform_int(1, 33);
        const auto g = random_mask(h, w, rng.uniform(), rng);
        worst = std::max(worst, std::abs(metrics::bce_loss(ProbabilityMap(h, w, 0.5f), g) - ln2));
        std::vector<float> gv(g.pixels.begin(), g.pixels.end());
        const Tensor<float> target({1, 1, h, w}, gv);
        worst = std::max(worst, std::abs(double(ops::bce(Tensor<float>({1, 1, h, w}, std::vector<float>(gv.size(), 0.5f)), target).item()) - ln2));
        worst = std::max(worst, std::abs(double(ops::bce_with_logits(Tensor<float>::zeros({1, 1, h, w}), target).item()) - ln2));
    }
    LabelMask one(1, 1, 1);
    const double single = metrics::bce_loss(ProbabilityMap(1, 1, 0.5f), one);
    const double single_op = ops::bce(Tensor<double>({1}, {0.5}), Tensor<double>({1}, {1.0})).item();
    const bool ok = worst <= 1e-7 && std::abs(single - 0.693147) <= 1e-6 && std::abs(single_op - 0.693147) <= 1e-6;
    verdict("bce_closed_forms", ok,
            fmt("p = 0.5 everywhere: max |loss - ln 2| = %.3e (<= 1e-7); single pixel g=1 p=0.5: %.7f and %.7f "
                "(0.693147 +- 1e-6)",
                worst, single, single_op));
}

// ---------------------------------------------------------------- training

training::TrainConfig config_file(const std::string& name, const fs::path& out) {
    auto c = training::load_config(std::string(DUALSEG_CONFIG_DIR) + "/" + name);
    c.checkpoint = (out / "model.ckpt").string();
    c.log = (out / "train.log").string();
    return c;
}

void overfit() {
    const auto dir = scratch("overfit");
    const auto c = config_file("overfit.cfg", dir);
    const auto t0 = std::chrono::steady_clock::now();
    training::Trainer trainer(c, data::load_dataset(data::parse_dataset_spec(c.train_dataset)), {});
    trainer.run();
    const double elapsed = seconds_since(t0);
    const auto& losses = trainer.log().losses;
    const double final_loss = losses.back().second;
    verdict("overfit", c.steps == 500 && final_loss < 0.05 && elapsed < 600,
            fmt("4 synthetic 64x64 images, %lld Adam steps, lr %g: final BCE %.5f (< 0.05), %.0f s (< 600 s)",
                static_cast<long long>(c.steps), c.adam.learning_rate, final_loss, elapsed));
    std::vector<double> windows;
    for (std::size_t i = 0; i + 50 <= losses.size(); i += 50) {
        double s = 0;
        for (std::size_t k = i; k < i + 50; ++k) s += losses[k].second;
        windows.push_back(s / 50);
    }
    bool monotone = true;
    std::string trail;
    for (std::size_t i = 0; i < windows.size(); ++i) {
        if (i > 0 && windows[i] > windows[i - 1]) monotone = false;
        trail += fmt("%s%.4f", i ? " " : "", windows[i]);
    }
    verdict("overfit_smoothed", monotone, "50-step window means non-increasing: " + trail);
    fs::remove_all(dir);
}

void generalization() {
    const auto dir = scratch("generalization");
    const auto c = config_file("generalization.cfg", dir);
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = training::train(c);
    const double elapsed = seconds_since(t0);
    const auto& last = result.log.evals.back();
    const bool ok = last.step == 2000 && last.mean.f1 >= 0.75 && last.mean.auc >= 0.90;
    verdict("generalization", ok,
            fmt("40 train / 10 held-out synthetic images, %lld steps: F1 %.6f (>= 0.75), AUC %.6f (>= 0.90); best "
                "F1 %.6f at step %lld; %.0f s",
                static_cast<long long>(last.step), last.mean.f1, last.mean.auc, result.best ? result.best->mean.f1 : 0.0,
                static_cast<long long>(result.best ? result.best->step : 0), elapsed));
    fs::remove_all(dir);
}

constexpr std::int64_t ablation_steps = 1000;

void ablation() {
    const auto dir = scratch("ablation");
    double full_sum = 0, plain_sum = 0;
    std::vector<double> diffs;
    std::string detail;
    for (std::uint64_t seed : {1, 2, 3}) {
        double f1[2];
        for (int attention = 1; attention >= 0; --attention) {
            auto c = config_file("generalization.cfg", dir);
            c.steps = ablation_steps;
            c.eval_every = ablation_steps;
            c.seed = seed;
            c.net.attention = attention == 1;
            c.checkpoint.clear();
            c.log.clear();
            f1[attention] = training::train(c).log.evals.back().mean.f1;
        }
        full_sum += f1[1];
        plain_sum += f1[0];
        diffs.push_back(f1[1] - f1[0]);
        detail += fmt("seed %llu full %.4f plain %.4f; ", static_cast<unsigned long long>(seed), f1[1], f1[0]);
        std::printf("  ablation seed %llu: full F1 %.6f, without attention %.6f\n",
                    static_cast<unsigned long long>(seed), f1[1], f1[0]);
        std::fflush(stdout);
    }
    const double full = full_sum / 3, plain = plain_sum / 3;
    const double mean_diff = full - plain;
    double var = 0;
    for (double d : diffs) var += (d - mean_diff) * (d - mean_diff);
    const double stderr_diff = std::sqrt(var / 2.0) / std::sqrt(3.0);
    detail += fmt("mean full %.6f vs without attention %.6f (%d steps each)", full, plain,
                  static_cast<int>(ablation_steps));
    if (full >= plain) {
        verdict("ablation", true, detail);
    } else if (plain - full <= 2 * stderr_diff) {
        soft_failure("ablation", detail + fmt(", shortfall %.4f within 2 standard errors (%.4f)", plain - full,
                                               2 * stderr_diff));
    } else {
        verdict("ablation", false, detail + fmt(", shortfall %.4f beyond 2 standard errors (%.4f)", plain - full,
                                                 2 * stderr_diff));
    }
    fs::remove_all(dir);
}

// ------------------------------------------------------------- determinism

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(DUALSEG_CLI) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void determinism() {
    const auto root = scratch("determinism");
    std::vector<std::string> artifacts[2];
    bool ran = true;
    for (int run = 0; run < 2; ++run) {
        const auto d = root / ("run" + std::to_string(run));
        fs::create_directories(d);
        std::ofstream(d / "train.cfg") << "train_dataset = synthetic:" << (d / "data").string() << "\n"
                                       << "test_dataset = synth:3:64:11\nsteps = 40\neval_every = 20\nseed = 5\n"
                                       << "checkpoint = " << (d / "best.ckpt").string() << "\n"
                                       << "log = " << (d / "train.log").string() << "\n";
        ran = ran && run_cli("synth --out " + (d / "data").string() + " --count 6 --size 64 --seed 9", d / "o1") == 0;
        ran = ran && run_cli("train --config " + (d / "train.cfg").string(), d / "o2") == 0;
        ran = ran && run_cli("eval --checkpoint " + (d / "best.ckpt").string() + " --dataset synth:3:64:11 --report " +
                                 (d / "report.txt").string(),
                             d / "o3") == 0;
        for (const char* f : {"best.ckpt", "train.log", "report.txt", "report.txt.kv", "data/manifest.txt",
                              "data/images/synth_0003.pgm"}) {
            artifacts[run].push_back(slurp(d / f));
        }
    }
    bool same = ran;
    std::size_t bytes = 0;
    for (std::size_t i = 0; i < artifacts[0].size(); ++i) {
        same = same && !artifacts[0][i].empty() && artifacts[0][i] == artifacts[1][i];
        bytes += artifacts[0][i].size();
    }
    verdict("determinism", same,
            fmt("two separate process runs (synth, train 40 steps, eval): checkpoint, log, report, key-value file "
                "and data byte-identical (%zu bytes compared)%s",
                bytes, ran ? "" : "; a command failed"));
    fs::remove_all(root);
}

// -------------------------------------------------------------- checkpoint

template <typename E>
bool throws(const std::function<void()>& f) {
    try {
        f();
    } catch (const E&) {
        return true;
    } catch (...) {
        return false;
    }
    return false;
}

void checkpoint_roundtrip() {
    const auto dir = scratch("checkpoint");
    training::TrainConfig c;
    c.train_dataset = "synth:4:64:3";
    c.steps = 3;
    c.eval_every = 0;
    training::Trainer trainer(c, data::load_dataset(data::parse_dataset_spec(c.train_dataset)), {});
    trainer.run();  // moves weights and running statistics off their initial values
    const auto path = (dir / "model.ckpt").string();
    checkpoint::save(trainer.model(), path);
    auto restored = checkpoint::load(path);

    bool identical = checkpoint::serialize(restored) == slurp(path);
    Rng rng(8);
    for (auto [h, w] : {std::pair{64, 64}, std::pair{50, 57}, std::pair{96, 80}}) {
        GrayImage img(h, w);
        for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
        const auto a = training::predict(trainer.model(), img);
        const auto b = training::predict(restored, img);
        identical = identical && std::memcmp(a.pixels.data(), b.pixels.data(), a.pixels.size() * sizeof(float)) == 0;
    }

    const auto good = slurp(path);
    auto edited = [&](const std::string& from, const std::string& to) {
        auto s = good;
        s.replace(s.find(from), from.size(), to);
        return s;
    };
    auto flipped = good;
    flipped[flipped.size() - 5] ^= 0x01;
    const bool typed =
        throws<CorruptCheckpointError>([&] { checkpoint::deserialize(good.substr(0, good.size() / 2)); }) &&
        throws<CorruptCheckpointError>([&] { checkpoint::deserialize(flipped); }) &&
        throws<CorruptCheckpointError>([&] { checkpoint::deserialize("PK\x03\x04 not a checkpoint"); }) &&
        throws<UnsupportedVersionError>([&] { checkpoint::deserialize(edited("version 1", "version 7")); }) &&
        throws<CheckpointShapeError>([&] { checkpoint::deserialize(edited("f32 16,1,3,3", "f32 16,1,3,1")); }) &&
        throws<IoError>([&] { checkpoint::load((dir / "absent.ckpt").string()); });
    verdict("checkpoint_roundtrip", identical && typed,
            fmt("save -> load: eval outputs bit-identical on 3 image sizes: %s; truncated, bit-flipped, foreign, "
                "future-version, reshaped and missing files raise their typed errors: %s",
                identical ? "yes" : "no", typed ? "yes" : "no"));
    fs::remove_all(dir);
}

struct Criterion {
    const char* name;
    void (*run)();
};

const Criterion criteria[] = {
    {"gradient_suite", gradient_suite},
    {"attention_normalization", attention_normalization},
    {"channel_equivariance", channel_equivariance},
    {"metric_oracle", metric_oracle},
    {"bce_closed_forms", bce_closed_forms},
    {"overfit", overfit},
    {"generalization", generalization},
    {"ablation", ablation},
    {"determinism", determinism},
    {"checkpoint_roundtrip", checkpoint_roundtrip},
};

}  // namespace

int main(int argc, char** argv) {
    std::string only;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--list") == 0) {
            for (const auto& c : criteria) std::printf("%s\n", c.name);
            return 0;
        }
        if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
            only = argv[++i];
        } else {
            std::fprintf(stderr, "usage: %s [--list] [--only NAME]\n", argv[0]);
            return 2;
        }
    }
    bool matched = false;
    for (const auto& c : criteria) {
        if (!only.empty() && only != c.name) continue;
        matched = true;
        try {
            c.run();
        } catch (const std::exception& e) {
            verdict(c.name, false, std::string("threw: ") + e.what());
        }
    }
    if (!matched) {
        std::fprintf(stderr, "unknown criterion '%s'\n", only.c_str());
        return 2;
    }
    return failures == 0 ? 0 : 1;
}
