#include "dualseg/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <optional>

#include "dualseg/attention.hpp"
#include "dualseg/errors.hpp"
#include "dualseg/gradcheck.hpp"
#include "dualseg/network.hpp"
#include "dualseg/ops.hpp"

namespace dualseg::gradsuite {

Scope parse_scope(const std::string& name) {
    if (name == "ops") return Scope::ops;
    if (name == "attention") return Scope::attention;
    if (name == "model") return Scope::model;
    throw ConfigError("gradcheck: scope must be ops, attention or model, got '" + name + "'");
}

const char* to_string(Scope scope) {
    switch (scope) {
        case Scope::ops: return "ops";
        case Scope::attention: return "attention";
        case Scope::model: return "model";
    }
    return "?";
}

namespace {

using T = Tensor<double>;
constexpr int cases_per_target = 5;
constexpr std::size_t model_probes = 50;

T random(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return T(std::move(shape), std::move(v));
}

T binary(Shape shape, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = rng.bernoulli(0.5) ? 1.0 : 0.0;
    return T(std::move(shape), std::move(v));
}

// Shuffled grid over (-1, 1) with a little jitter: all values distinct and
// away from 0 by much more than the step, so max and ReLU stay
// differentiable at the probe.
T distinct(Shape shape, Rng& rng) {
    const auto n = numel(shape);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        v[static_cast<std::size_t>(i)] = (static_cast<double>(i) + 0.5 + rng.uniform(-0.25, 0.25)) * 2.0 / static_cast<double>(n) - 1.0;
    }
    for (std::int64_t i = n - 1; i > 0; --i) std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(rng.uniform_int(0, i + 1))]);
    return T(std::move(shape), std::move(v));
}

std::int64_t pick(Rng& rng, std::int64_t lo, std::int64_t hi) { return rng.uniform_int(lo, hi + 1); }

// Autodiff of the summed loss once, then central differences per probe.
// The difference is taken term by term before summing, which equals
// f(x+h) - f(x-h) but keeps the large partial sums out of the cancellation.
// A probe is rejected (nullopt) when the kink pattern at either side
// differs from the base.
class Sweep {
public:
    using Terms = std::function<std::vector<double>()>;

    Sweep(const std::function<T()>& loss, Terms terms, std::vector<GradProbe>& probes) : terms_(std::move(terms)) {
        for (auto& p : probes) {
            p.tensor.set_requires_grad(true);
            p.tensor.zero_grad();
        }
        ops::KinkRecorder rec;
        backward(loss());
        base_ = rec.hash();
    }

    std::optional<double> error(GradProbe probe) {
        NoGradGuard guard;
        const double analytic = probe.tensor.has_grad() ? probe.tensor.grad()[probe.index] : 0.0;
        auto v = probe.tensor.mutable_data();
        const double original = v[probe.index];
        ops::KinkRecorder rec;
        v[probe.index] = original + step;
        const auto plus = terms_();
        const bool same_plus = rec.hash() == base_;
        rec.reset();
        v[probe.index] = original - step;
        const auto minus = terms_();
        const bool same_minus = rec.hash() == base_;
        v[probe.index] = original;
        if (!same_plus || !same_minus) return std::nullopt;
        double diff = 0.0;
        for (std::size_t i = 0; i < plus.size(); ++i) diff += plus[i] - minus[i];
        return relative_error(analytic, diff / (2 * step));
    }

private:
    Terms terms_;
    std::uint64_t base_ = 0;
};

class Runner {
public:
    explicit Runner(std::uint64_t seed) : rng_(seed) {}

    Rng& rng() { return rng_; }

    // sum(W ⊙ op()) with a fixed random W, probed at every coordinate of
    // every tensor in `inputs`. Coordinates whose ±step evaluations take
    // other linear pieces of relu or max than the base point are skipped.
    void check(const std::string& target, const std::function<T()>& op, const std::vector<T>& inputs) {
        const T w = weights(op);
        std::vector<GradProbe> probes;
        for (const auto& t : inputs) {
            for (std::size_t i = 0; i < static_cast<std::size_t>(t.size()); ++i) probes.push_back({t, i});
        }
        auto loss = [&] { return ops::sum(ops::mul(w, op())); };
        auto terms = [&] {
            const auto out = op();
            std::vector<double> t(static_cast<std::size_t>(out.size()));
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = w.data()[i] * out.data()[i];
            return t;
        };
        Sweep sweep(loss, terms, probes);
        double worst = 0.0;
        std::size_t used = 0, skipped = 0;
        for (const auto& probe : probes) {
            if (auto err = sweep.error(probe)) {
                worst = std::max(worst, *err);
                ++used;
            } else {
                ++skipped;
            }
        }
        record(target, used, skipped, worst, op_tolerance, false);
    }

    // For a gradient that is exactly zero: largest |analytic| or |numeric|.
    void check_zero(const std::string& target, const std::function<T()>& op, T input) {
        const T w = weights(op);
        auto loss = [&] { return ops::sum(ops::mul(w, op())); };
        input.set_requires_grad(true);
        input.zero_grad();
        backward(loss());
        double worst = 0.0;
        NoGradGuard guard;
        for (std::size_t i = 0; i < static_cast<std::size_t>(input.size()); ++i) {
            const double analytic = input.has_grad() ? input.grad()[i] : 0.0;
            auto v = input.mutable_data();
            const double original = v[i];
            v[i] = original + step;
            const double plus = loss().item();
            v[i] = original - step;
            const double minus = loss().item();
            v[i] = original;
            worst = std::max({worst, std::abs(analytic), std::abs((plus - minus) / (2 * step))});
        }
        record(target, static_cast<std::size_t>(input.size()), 0, worst, 1e-8, true);
    }

    void record(const std::string& target, std::size_t coords, std::size_t skipped, double err, double tol,
                bool absolute) {
        auto it = index_.find(target);
        if (it == index_.end()) {
            it = index_.emplace(target, entries_.size()).first;
            entries_.push_back(Entry{target, 0, 0, 0, 0.0, tol, absolute});
        }
        auto& e = entries_[it->second];
        ++e.cases;
        e.coordinates += static_cast<std::int64_t>(coords);
        e.skipped += static_cast<std::int64_t>(skipped);
        e.max_error = std::max(e.max_error, err);
    }

    std::vector<Entry> take() { return std::move(entries_); }

private:
    // Magnitudes in [0.5, 1] so no output is weighted near zero.
    T weights(const std::function<T()>& op) {
        NoGradGuard guard;
        T w = random(op().shape(), rng_, 0.5, 1.0);
        for (auto& v : w.mutable_data()) {
            if (rng_.bernoulli(0.5)) v = -v;
        }
        return w;
    }

    Rng rng_;
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

std::vector<std::int64_t> permutation(std::int64_t n, Rng& rng) {
    std::vector<std::int64_t> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    for (std::int64_t i = n - 1; i > 0; --i) std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(rng.uniform_int(0, i + 1))]);
    return p;
}

void run_ops(Runner& run) {
    auto& rng = run.rng();
    for (int c = 0; c < cases_per_target; ++c) {
        const auto n = pick(rng, 1, 2), ci = pick(rng, 1, 3), co = pick(rng, 1, 3);
        static const std::pair<std::int64_t, std::int64_t> kernels[] = {{1, 1}, {3, 3}, {1, 3}, {3, 1}, {2, 3}};
        const auto [kh, kw] = kernels[c];
        const auto h = pick(rng, kh + 1, 6), w = pick(rng, kw + 1, 6);
        const ops::Conv2dParams p{pick(rng, 1, 2), pick(rng, 0, kh / 2), pick(rng, 0, kw / 2)};
        auto x = random({n, ci, h, w}, rng), k = random({co, ci, kh, kw}, rng);
        auto b = c % 2 == 0 ? random({co}, rng) : T();
        std::vector<T> inputs{x, k};
        if (b.defined()) inputs.push_back(b);
        run.check("conv2d", [=] { return ops::conv2d(x, k, b, p); }, inputs);
    }
    for (int c = 0; c < cases_per_target; ++c) {
        const auto ch = pick(rng, 1, 3);
        // at least 8 values per channel; with two the normalized output is
        // nearly constant and the gradient is rounding noise
        auto x = random({pick(rng, 2, 3), ch, pick(rng, 2, 4), pick(rng, 2, 4)}, rng, -2, 2);
        auto g = random({ch}, rng, 0.5, 1.5), be = random({ch}, rng);
        run.check("batch_norm", [=] {
            ops::BatchNormStats<double> stats(ch);
            return ops::batch_norm(x, g, be, stats, Mode::train);
        }, {x, g, be});
    }
    for (int c = 0; c < cases_per_target; ++c) {
        auto x = random({pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 5), pick(rng, 1, 5)}, rng);
        const double prob = rng.uniform(0.1, 0.6);
        const Rng masks = rng.split(static_cast<std::uint64_t>(c));
        run.check("dropout", [=] {
            Rng r = masks;
            return ops::dropout(x, prob, Mode::train, r);
        }, {x});
    }
    for (int c = 0; c < cases_per_target; ++c) {
        const Shape s{pick(rng, 1, 2), pick(rng, 1, 3), 2 * pick(rng, 1, 3), 2 * pick(rng, 1, 3)};
        auto x = distinct(s, rng), y = random(s, rng), z = random(s, rng);
        run.check("max_pool2d", [=] { return ops::max_pool2d(x); }, {x});
        run.check("avg_pool2d", [=] { return ops::avg_pool2d(y); }, {y});
        run.check("upsample_nearest", [=] { return ops::upsample_nearest(z); }, {z});
    }
    for (int c = 0; c < cases_per_target; ++c) {
        const auto m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
        const bool batched = c % 2 == 1;
        const auto bsz = pick(rng, 2, 3);
        auto a = batched ? random({bsz, m, k}, rng) : random({m, k}, rng);
        auto b = batched ? random({bsz, k, n}, rng) : random({k, n}, rng);
        run.check("matmul", [=] { return ops::matmul(a, b); }, {a, b});
        auto t = random({bsz, m, n}, rng);
        run.check("transpose", [=] { return ops::transpose(t); }, {t});
    }
    for (int c = 0; c < cases_per_target; ++c) {
        const Shape s{pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 2, 5)};
        auto x = random(s, rng, -3, 3);
        const int axis = static_cast<int>(c % 3);
        run.check("softmax", [=] { return ops::softmax(x, axis); }, {x});
    }
    for (int c = 0; c < cases_per_target; ++c) {
        const Shape s{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
        auto a = random(s, rng, -3, 3), b = distinct(s, rng), d = random(s, rng);
        run.check("sigmoid", [=] { return ops::sigmoid(a); }, {a});
        run.check("relu", [=] { return ops::relu(b); }, {b});
        run.check("add", [=] { return ops::add(a, b); }, {a, b});
        run.check("sub", [=] { return ops::sub(a, b); }, {a, b});
        run.check("mul", [=] { return ops::mul(a, d); }, {a, d});
        const double f = rng.uniform(-2, 2);
        run.check("scale", [=] { return ops::scale(d, f); }, {d});
        run.check("add_scalar", [=] { return ops::add_scalar(d, f); }, {d});
        run.check("sum", [=] { return ops::sum(a); }, {a});
        run.check("mean", [=] { return ops::mean(b); }, {b});
        const Shape flat{numel(s)};
        run.check("reshape", [=] { return ops::reshape(d, flat); }, {d});
    }
    for (int c = 0; c < cases_per_target; ++c) {
        const auto n = pick(rng, 1, 2), h = pick(rng, 1, 4), w = pick(rng, 1, 4), ch = pick(rng, 1, 4);
        auto a = distinct({n, ch, h, w}, rng), b = random({n, pick(rng, 1, 3), h, w}, rng);
        auto gate = random({n, 1, h, w}, rng);
        run.check("concat_channels", [=] { return ops::concat_channels(a, b); }, {a, b});
        run.check("channel_max", [=] { return ops::channel_max(a); }, {a});
        run.check("channel_mean", [=] { return ops::channel_mean(a); }, {a});
        run.check("mul_channel_broadcast", [=] { return ops::mul_channel_broadcast(a, gate); }, {a, gate});
        const auto perm = permutation(ch, rng);
        run.check("permute_channels", [=] { return ops::permute_channels(a, perm); }, {a});
    }
    for (int c = 0; c < cases_per_target; ++c) {
        const Shape s{pick(rng, 1, 2), 1, pick(rng, 1, 5), pick(rng, 1, 5)};
        auto z = random(s, rng, -3, 3), p = random(s, rng, 0.05, 0.95);
        auto g = binary(s, rng);
        run.check("bce_with_logits", [=] { return ops::bce_with_logits(z, g); }, {z});
        run.check("bce", [=] { return ops::bce(p, g); }, {p});
    }
}

void run_attention(Runner& run) {
    auto& rng = run.rng();
    for (int c = 0; c < cases_per_target; ++c) {
        const auto ch = 2 * pick(rng, 1, 3), r = pick(rng, 1, 2);
        const Shape s{pick(rng, 1, 2), ch, pick(rng, 2, 4), pick(rng, 2, 4)};
        auto sa = attention::SpatialSelfAttention<double>::create(ch, r, rng);
        auto f = random(s, rng);
        run.check("spatial_attention_map", [=] { return attention::spatial_attention_map(f, sa); },
                  {f, sa.query_weight, sa.query_bias, sa.key_weight});
        run.check("apply_spatial_attention", [=] { return attention::apply_spatial_attention(f, sa); },
                  {f, sa.query_weight, sa.query_bias, sa.key_weight, sa.value_weight, sa.value_bias});
        // q·(k + b) shifts every logit of a row by q·b, which softmax ignores.
        run.check_zero("spatial key bias (zero)", [=] { return attention::apply_spatial_attention(f, sa); },
                       sa.key_bias);

        auto g = random(s, rng, -0.5, 0.5);
        run.check("channel_attention_map", [=] { return attention::channel_attention_map(g); }, {g});
        run.check("apply_channel_attention", [=] { return attention::apply_channel_attention(g); }, {g});

        auto fu = attention::DualAttentionFusion<double>::create(ch, r, rng);
        // same scale as above: keeps the channel softmax out of saturation
        auto h = random(s, rng, -0.5, 0.5);
        run.check("fuse_dual", [=] { return attention::fuse_dual(h, fu); },
                  {h, fu.fusion_weight, fu.fusion_bias, fu.spatial.query_weight, fu.spatial.key_weight,
                   fu.spatial.value_weight, fu.spatial.value_bias});

        // small weights keep the sigmoid away from 0 and 1, where its output
        // cannot resolve a step of 1e-5
        auto gate = attention::SkipSpatialGate<double>::create(rng);
        for (auto& v : gate.weight.mutable_data()) v = rng.uniform(-0.2, 0.2);
        auto x = distinct({s[0], s[1], s[2] + 2, s[3] + 2}, rng);
        run.check("skip_gate_map", [=] { return attention::skip_gate_map(x, gate); }, {x, gate.weight});
        run.check("skip_gate", [=] { return attention::skip_gate(x, gate); }, {x, gate.weight});
    }
}

void run_model(Runner& run) {
    auto& rng = run.rng();
    network::NetConfig c;
    c.base_channels = 4;
    c.input_size = 16;
    c.dropout = 0.0;
    auto m = network::Model<double>::build(c, rng.next_u64());
    auto x = random({2, 1, 16, 16}, rng, 0.0, 1.0);
    std::vector<double> t(2 * 16 * 16);
    for (auto& v : t) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
    const T target({2, 1, 16, 16}, t);

    // Uniform over parameter scalars, skipping the key bias whose gradient
    // is identically zero (checked in the attention scope).
    std::int64_t total = 0;
    std::vector<NamedParameter<double>> params;
    for (auto& p : m.parameters()) {
        if (p.name == "bottleneck.spatial.key.bias") continue;
        params.push_back(p);
        total += p.tensor->size();
    }
    auto draw = [&] {
        auto flat = rng.uniform_int(0, total);
        for (auto& p : params) {
            if (flat < p.tensor->size()) return GradProbe{*p.tensor, static_cast<std::size_t>(flat)};
            flat -= p.tensor->size();
        }
        throw ContractError("gradcheck: parameter draw out of range");
    };
    std::vector<GradProbe> all;
    for (auto& p : params) all.push_back({*p.tensor, 0});
    Rng unused(0);
    auto logits = [&] { return m.forward_logits(x, Mode::train, unused); };
    // per-pixel terms of the mean, in the same stable form as the op
    auto terms = [&] {
        const auto z = logits();
        std::vector<double> t(static_cast<std::size_t>(z.size()));
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double v = z.data()[i], g = target.data()[i];
            t[i] = (std::max(v, 0.0) - v * g + std::log1p(std::exp(-std::abs(v)))) / static_cast<double>(t.size());
        }
        return t;
    };
    Sweep sweep([&] { return ops::bce_with_logits(logits(), target); }, terms, all);
    // Probes straddling a relu or max kink are redrawn.
    double worst = 0.0;
    std::size_t used = 0, redrawn = 0;
    while (used < model_probes) {
        if (redrawn > 20 * model_probes) throw NumericError("gradcheck: too many probes straddle a kink");
        if (auto err = sweep.error(draw())) {
            worst = std::max(worst, *err);
            ++used;
        } else {
            ++redrawn;
        }
    }
    run.record("model (50 sampled parameters)", used, redrawn, worst, model_tolerance, false);
}

}  // namespace

std::vector<Entry> run(Scope scope, std::uint64_t seed) {
    Runner runner(seed);
    switch (scope) {
        case Scope::ops: run_ops(runner); break;
        case Scope::attention: run_attention(runner); break;
        case Scope::model: run_model(runner); break;
    }
    return runner.take();
}

bool all_passed(const std::vector<Entry>& entries) {
    for (const auto& e : entries) {
        if (!e.passed()) return false;
    }
    return !entries.empty();
}

std::string format(const std::vector<Entry>& entries) {
    std::string out;
    char line[256];
    std::snprintf(line, sizeof line, "%-30s %5s %7s %7s %-9s %10s %8s  %s\n", "target", "cases", "coords",
                  "skipped", "error", "max", "tol", "result");
    out += line;
    for (const auto& e : entries) {
        std::snprintf(line, sizeof line, "%-30s %5lld %7lld %7lld %-9s %10.3e %8.0e  %s\n", e.target.c_str(),
                      static_cast<long long>(e.cases), static_cast<long long>(e.coordinates),
                      static_cast<long long>(e.skipped),
                      e.absolute ? "absolute" : "relative", e.max_error, e.tolerance, e.passed() ? "PASS" : "FAIL");
        out += line;
    }
    return out;
}

}  // namespace dualseg::gradsuite
