#include "dualseg/training.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "dualseg/checkpoint.hpp"
#include "dualseg/errors.hpp"

namespace dualseg::training {

// ------------------------------------------------------------------ Adam

template <typename T>
Adam<T>::Adam(ParameterList<T> parameters, AdamConfig config)
    : params_(std::move(parameters)), config_(config) {
    for (const auto& p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p.tensor->size()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.tensor->size()), 0.0);
    }
}

template <typename T>
void Adam<T>::step() {
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& tensor = *params_[k].tensor;
        auto values = tensor.mutable_data();
        const auto grad = tensor.grad();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            const double update = config_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.epsilon);
            values[i] = static_cast<T>(static_cast<double>(values[i]) - update);
        }
    }
}

template <typename T>
void Adam<T>::zero_grad() {
    for (auto& p : params_) p.tensor->zero_grad();
}

template class Adam<float>;
template class Adam<double>;

// ---------------------------------------------------------------- config

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& value, const char* kind) {
    N out{};
    const auto* end = value.data() + value.size();
    const auto r = std::from_chars(value.data(), end, out);
    if (value.empty() || r.ec != std::errc() || r.ptr != end) {
        throw ConfigError("config field '" + key + "': expected " + kind + ", got '" + value + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config field '" + key + "': expected true or false, got '" + value + "'");
}

}  // namespace

const std::vector<std::pair<std::string, std::string>>& config_keys() {
    static const std::vector<std::pair<std::string, std::string>> keys = {
        {"train_dataset", "dataset spec used for training (required)"},
        {"test_dataset", "dataset spec for periodic evaluation (optional)"},
        {"steps", "optimizer steps (default 2000)"},
        {"batch_size", "patches per step (default 4)"},
        {"patch_size", "square patch side, a multiple of 16 (default 64)"},
        {"learning_rate", "Adam step size (default 0.001)"},
        {"beta1", "Adam first-moment decay (default 0.9)"},
        {"beta2", "Adam second-moment decay (default 0.999)"},
        {"epsilon", "Adam denominator offset (default 1e-8)"},
        {"eval_every", "steps between evaluations, 0 disables (default 500)"},
        {"seed", "seed for initialization, sampling and dropout (default 1)"},
        {"augment", "random flips and quarter turns (default true)"},
        {"checkpoint", "path of the best-F1 checkpoint"},
        {"log", "path of the training log"},
        {"base_channels", "channels of the first encoder level (default 16)"},
        {"levels", "encoder depth (default 4)"},
        {"dropout", "dropout probability in the conv blocks (default 0.2)"},
        {"reduction", "channel reduction of the spatial attention (default 8)"},
        {"attention", "dual attention and skip gates (default true)"},
    };
    return keys;
}

void set_field(TrainConfig& c, const std::string& key, const std::string& raw) {
    const auto value = trim(raw);
    auto count = [&] { return parse_number<std::int64_t>(key, value, "an integer"); };
    auto real = [&] { return parse_number<double>(key, value, "a number"); };
    if (key == "train_dataset") c.train_dataset = value;
    else if (key == "test_dataset") c.test_dataset = value;
    else if (key == "steps") c.steps = count();
    else if (key == "batch_size") c.batch_size = count();
    else if (key == "patch_size") c.patch_size = count();
    else if (key == "learning_rate") c.adam.learning_rate = real();
    else if (key == "beta1") c.adam.beta1 = real();
    else if (key == "beta2") c.adam.beta2 = real();
    else if (key == "epsilon") c.adam.epsilon = real();
    else if (key == "eval_every") c.eval_every = count();
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value, "a non-negative integer");
    else if (key == "augment") c.augment = parse_bool(key, value);
    else if (key == "checkpoint") c.checkpoint = value;
    else if (key == "log") c.log = value;
    else if (key == "base_channels") c.net.base_channels = count();
    else if (key == "levels") c.net.levels = count();
    else if (key == "dropout") c.net.dropout = real();
    else if (key == "reduction") c.net.reduction = count();
    else if (key == "attention") c.net.attention = parse_bool(key, value);
    else throw ConfigError("config: unknown field '" + key + "'");
}

TrainConfig parse_config(const std::string& text, TrainConfig base) {
    std::istringstream in(text);
    std::int64_t number = 0;
    for (std::string line; std::getline(in, line);) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(number) + ": expected 'key = value', got '" + line + "'");
        }
        set_field(base, trim(line.substr(0, eq)), line.substr(eq + 1));
    }
    return base;
}

TrainConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

void TrainConfig::validate() const {
    auto require = [](bool ok, const char* field, const std::string& rule) {
        if (!ok) throw ConfigError(std::string("config field '") + field + "': " + rule);
    };
    require(!train_dataset.empty(), "train_dataset", "is required");
    require(steps > 0, "steps", "must be positive");
    require(batch_size > 0, "batch_size", "must be positive");
    require(patch_size > 0 && patch_size % 16 == 0, "patch_size", "must be a positive multiple of 16");
    require(adam.learning_rate >= 0 && std::isfinite(adam.learning_rate), "learning_rate",
            "must be finite and non-negative");
    require(adam.beta1 >= 0 && adam.beta1 < 1, "beta1", "must lie in [0, 1)");
    require(adam.beta2 >= 0 && adam.beta2 < 1, "beta2", "must lie in [0, 1)");
    require(adam.epsilon > 0, "epsilon", "must be positive");
    require(eval_every >= 0, "eval_every", "must be non-negative");
    if (net.levels >= 1 && net.levels <= 8) {
        require(patch_size % net.alignment() == 0, "patch_size", "must be a multiple of 2^levels");
    }
    auto n = net;
    n.input_size = patch_size;
    try {
        n.validate();
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }
}

// ------------------------------------------------------------------- log

std::string TrainLog::loss_line(std::int64_t step, double loss) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "step %lld loss %.9g", static_cast<long long>(step), loss);
    return buf;
}

std::string TrainLog::eval_line(const EvalRecord& e) {
    char buf[192];
    std::snprintf(buf, sizeof buf, "eval %lld ACC %.6f SE %.6f SP %.6f F1 %.6f AUC %.6f",
                  static_cast<long long>(e.step), e.mean.acc, e.mean.se, e.mean.sp, e.mean.f1, e.mean.auc);
    return buf;
}

std::string TrainLog::to_text() const {
    // Interleave by step; an eval at step n follows the loss of step n.
    std::string out;
    std::size_t e = 0;
    for (const auto& [step, loss] : losses) {
        out += loss_line(step, loss) + "\n";
        while (e < evals.size() && evals[e].step <= step) out += eval_line(evals[e++]) + "\n";
    }
    while (e < evals.size()) out += eval_line(evals[e++]) + "\n";
    return out;
}

// ------------------------------------------------------------ evaluation

metrics::Report evaluate(const std::function<ProbabilityMap(const data::Sample&)>& predict,
                         const std::vector<data::Sample>& samples) {
    if (samples.empty()) throw ContractError("evaluate: empty dataset");
    std::vector<metrics::ImageRow> rows;
    for (const auto& s : samples) {
        const auto p = predict(s);
        if (!p.same_shape(s.label)) throw DimensionError("evaluate: prediction size differs for '" + s.id + "'");
        rows.push_back(metrics::evaluate_image(s.id, p, s.label, s.fov ? &*s.fov : nullptr));
    }
    return metrics::summarize(std::move(rows));
}

ProbabilityMap predict(const network::Model<float>& model, const GrayImage& image) {
    const auto multiple = std::max<std::int64_t>(16, model.config().alignment());
    const auto h = (image.height + multiple - 1) / multiple * multiple;
    const auto w = (image.width + multiple - 1) / multiple * multiple;
    return data::unpad(model.infer(data::pad_plane(image, h, w)), image.height, image.width);
}

metrics::Report evaluate(const network::Model<float>& model, const std::vector<data::Sample>& samples) {
    return evaluate([&](const data::Sample& s) { return predict(model, s.image); }, samples);
}

// --------------------------------------------------------------- trainer

namespace {

network::NetConfig net_for(const TrainConfig& c) {
    c.validate();
    auto n = c.net;
    n.input_size = c.patch_size;
    return n;
}

}  // namespace

Trainer::Trainer(TrainConfig config, std::vector<data::Sample> train, std::vector<data::Sample> test)
    : config_(std::move(config)),
      train_(std::move(train)),
      test_(std::move(test)),
      model_(network::Model<float>::build(net_for(config_), config_.seed)),
      adam_(model_.parameters(), config_.adam),
      data_rng_(Rng(config_.seed).split(1)),
      dropout_rng_(Rng(config_.seed).split(2)) {
    if (train_.empty()) throw DatasetError("training set is empty");
    for (const auto& s : train_) {
        if (s.image.height < config_.patch_size || s.image.width < config_.patch_size) {
            throw ConfigError("config field 'patch_size': " + std::to_string(config_.patch_size) +
                              " exceeds training image '" + s.id + "'");
        }
    }
    if (!config_.log.empty()) {
        log_file_.open(config_.log, std::ios::binary | std::ios::trunc);
        if (!log_file_) throw IoError("cannot write log '" + config_.log + "'");
    }
}

void Trainer::append(const std::string& line) {
    if (log_file_.is_open()) {
        log_file_ << line << '\n';
        log_file_.flush();
        if (!log_file_) throw IoError("failed writing log '" + config_.log + "'");
    }
}

// Epoch-wise reshuffled order (Fisher-Yates).
std::vector<std::int64_t> Trainer::next_indices() {
    std::vector<std::int64_t> out;
    while (static_cast<std::int64_t>(out.size()) < config_.batch_size) {
        if (cursor_ == order_.size()) {
            order_.resize(train_.size());
            for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<std::int64_t>(i);
            for (std::size_t i = order_.size(); i > 1; --i) {
                std::swap(order_[i - 1], order_[static_cast<std::size_t>(data_rng_.uniform_int(0, static_cast<std::int64_t>(i)))]);
            }
            cursor_ = 0;
        }
        out.push_back(order_[cursor_++]);
    }
    return out;
}

double Trainer::step() {
    const auto started = std::chrono::steady_clock::now();
    const auto p = config_.patch_size;
    const auto b = config_.batch_size;
    const auto plane = static_cast<std::size_t>(p * p);
    std::vector<float> images(static_cast<std::size_t>(b) * plane), labels(images.size());
    const auto indices = next_indices();
    for (std::int64_t k = 0; k < b; ++k) {
        auto patch = data::sample_patches(train_[static_cast<std::size_t>(indices[static_cast<std::size_t>(k)])], p, 1, data_rng_)[0];
        if (config_.augment) data::augment(patch, data_rng_);
        std::copy(patch.image.pixels.begin(), patch.image.pixels.end(), images.begin() + static_cast<std::ptrdiff_t>(k * p * p));
        for (std::size_t i = 0; i < plane; ++i) labels[static_cast<std::size_t>(k) * plane + i] = patch.label.pixels[i];
    }
    const Tensor<float> x({b, 1, p, p}, std::move(images));
    const Tensor<float> y({b, 1, p, p}, std::move(labels));

    const auto current = step_ + 1;
    auto diagnose = [&](const std::string& what) {
        std::ostringstream msg;
        msg << "training aborted at step " << current << ": " << what << " (learning rate "
            << config_.adam.learning_rate << ", previous step gradient norm " << grad_norm_;
        // the three largest per-parameter norms
        auto norms = param_norms_;
        std::sort(norms.begin(), norms.end(), [](const auto& a, const auto& c) { return a.second > c.second; });
        for (std::size_t i = 0; i < std::min<std::size_t>(3, norms.size()); ++i) {
            msg << (i == 0 ? "; largest: " : ", ") << norms[i].first << " " << norms[i].second;
        }
        msg << ")";
        return NumericError(msg.str());
    };

    double loss_value = 0.0;
    adam_.zero_grad();
    try {
        const auto logits = model_.forward_logits(x, Mode::train, dropout_rng_);
        const auto loss = ops::bce_with_logits(logits, y);
        loss_value = static_cast<double>(loss.item());
        backward(loss);
    } catch (const NumericError& e) {
        throw diagnose(e.what());
    }
    if (!std::isfinite(loss_value)) throw diagnose("non-finite loss");

    double total = 0.0;
    std::vector<std::pair<std::string, double>> norms;
    for (const auto& np : model_.parameters()) {
        double sq = 0.0;
        for (float g : np.tensor->grad()) sq += static_cast<double>(g) * static_cast<double>(g);
        norms.emplace_back(np.name, std::sqrt(sq));
        total += sq;
    }
    if (!std::isfinite(total)) throw diagnose("non-finite gradient");
    grad_norm_ = std::sqrt(total);
    param_norms_ = std::move(norms);

    adam_.step();
    step_ = current;
    log_.losses.emplace_back(step_, loss_value);
    log_.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
    append(TrainLog::loss_line(step_, loss_value));
    return loss_value;
}

EvalRecord Trainer::evaluate_now() {
    if (test_.empty()) throw ContractError("evaluate: empty dataset");
    EvalRecord rec{step_, training::evaluate(model_, test_).mean};
    log_.evals.push_back(rec);
    append(TrainLog::eval_line(rec));
    if (!best_ || rec.mean.f1 > best_->mean.f1) {
        best_ = rec;
        if (!config_.checkpoint.empty()) checkpoint::save(model_, config_.checkpoint);
    }
    return rec;
}

void Trainer::run() {
    const bool evaluating = config_.eval_every > 0 && !test_.empty();
    while (step_ < config_.steps) {
        step();
        if (evaluating && (step_ % config_.eval_every == 0 || step_ == config_.steps)) evaluate_now();
    }
    if (!evaluating && !config_.checkpoint.empty()) checkpoint::save(model_, config_.checkpoint);
}

TrainResult train(const TrainConfig& config) {
    config.validate();
    auto train_set = data::load_dataset(data::parse_dataset_spec(config.train_dataset));
    std::vector<data::Sample> test_set;
    if (!config.test_dataset.empty()) test_set = data::load_dataset(data::parse_dataset_spec(config.test_dataset));
    Trainer trainer(config, std::move(train_set), std::move(test_set));
    trainer.run();
    return {trainer.log(), trainer.best()};
}

}  // namespace dualseg::training
