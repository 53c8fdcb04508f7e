#pragma once

#include <cstdint>
#include <functional>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "dualseg/data_io.hpp"
#include "dualseg/network.hpp"
#include "dualseg/parameters.hpp"
#include "dualseg/report.hpp"

namespace dualseg::training {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Adam with bias correction. Parameters that received no gradient in a
// step are treated as having a zero gradient.
template <typename T>
class Adam {
public:
    Adam(ParameterList<T> parameters, AdamConfig config);

    void step();
    void zero_grad();
    std::int64_t steps_taken() const { return t_; }
    const AdamConfig& config() const { return config_; }

private:
    ParameterList<T> params_;
    AdamConfig config_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

struct TrainConfig {
    std::int64_t steps = 2000;
    std::int64_t batch_size = 4;
    std::int64_t patch_size = 64;
    AdamConfig adam;
    // 0 disables evaluation; the final model is then the saved checkpoint.
    std::int64_t eval_every = 500;
    std::uint64_t seed = 1;
    bool augment = true;
    std::string train_dataset;  // dataset spec, see data::parse_dataset_spec
    std::string test_dataset;   // may be empty
    std::string checkpoint;     // best-F1 checkpoint path; empty: not written
    std::string log;            // TrainLog path; empty: not written
    network::NetConfig net;     // input_size is forced to patch_size

    // ConfigError naming the offending field.
    void validate() const;
};

// Flat "key = value" text; '#' starts a comment. Keys are the field names
// above, with the Adam and network fields flattened (learning_rate, beta1,
// base_channels, attention, ...). Unknown keys are errors.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::string& path);
void set_field(TrainConfig& config, const std::string& key, const std::string& value);
// Every accepted key with a one-line description, in documentation order.
const std::vector<std::pair<std::string, std::string>>& config_keys();

struct EvalRecord {
    std::int64_t step = 0;
    metrics::ImageRow mean;
};

// Persisted one line per event, without timestamps so that reruns are
// byte-identical:
//   step <n> loss <v>                                  (v: %.9g)
//   eval <n> ACC <v> SE <v> SP <v> F1 <v> AUC <v>      (v: %.6f)
struct TrainLog {
    std::vector<std::pair<std::int64_t, double>> losses;
    std::vector<EvalRecord> evals;
    std::vector<double> seconds;  // wall-clock per step, in memory only

    static std::string loss_line(std::int64_t step, double loss);
    static std::string eval_line(const EvalRecord& e);
    std::string to_text() const;
};

// Pads to a multiple of max(16, 2^levels), runs eval-mode inference and
// crops back: the map has the image's size.
ProbabilityMap predict(const network::Model<float>& model, const GrayImage& image);

// Full-image evaluation: pad to a multiple of max(16, 2^levels), eval-mode
// inference, un-pad, metrics inside the fov when present.
metrics::Report evaluate(const network::Model<float>& model, const std::vector<data::Sample>& samples);
// Same with an arbitrary predictor (e.g. ground truth for pipeline checks).
metrics::Report evaluate(const std::function<ProbabilityMap(const data::Sample&)>& predict,
                         const std::vector<data::Sample>& samples);

class Trainer {
public:
    Trainer(TrainConfig config, std::vector<data::Sample> train, std::vector<data::Sample> test);
    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    // One optimizer step; returns the batch loss. A non-finite loss or
    // gradient throws NumericError with the step, learning rate and the
    // gradient norms of the last completed step.
    double step();
    // Evaluates on the test split, updates the best checkpoint.
    EvalRecord evaluate_now();
    // Runs the remaining steps with periodic evaluation.
    void run();

    network::Model<float>& model() { return model_; }
    const TrainLog& log() const { return log_; }
    std::int64_t steps_done() const { return step_; }
    std::optional<EvalRecord> best() const { return best_; }
    // Global gradient L2 norm of the last step.
    double last_grad_norm() const { return grad_norm_; }

private:
    void append(const std::string& line);
    std::vector<std::int64_t> next_indices();

    TrainConfig config_;
    std::vector<data::Sample> train_, test_;
    network::Model<float> model_;
    Adam<float> adam_;
    Rng data_rng_, dropout_rng_;
    std::vector<std::int64_t> order_;
    std::size_t cursor_ = 0;
    std::int64_t step_ = 0;
    double grad_norm_ = 0.0;
    std::vector<std::pair<std::string, double>> param_norms_;
    std::optional<EvalRecord> best_;
    TrainLog log_;
    std::ofstream log_file_;
};

struct TrainResult {
    TrainLog log;
    std::optional<EvalRecord> best;
};

// Loads the datasets named in the config, trains, writes log and checkpoint.
TrainResult train(const TrainConfig& config);

}  // namespace dualseg::training
