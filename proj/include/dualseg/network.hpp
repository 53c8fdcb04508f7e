#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dualseg/attention.hpp"
#include "dualseg/image.hpp"
#include "dualseg/ops.hpp"
#include "dualseg/parameters.hpp"
#include "dualseg/rng.hpp"
#include "dualseg/tensor.hpp"

namespace dualseg::network {

struct NetConfig {
    std::int64_t in_channels = 1;
    std::int64_t base_channels = 16;
    std::int64_t levels = 4;
    double dropout = 0.2;
    std::int64_t reduction = 8;
    std::int64_t input_size = 64;
    // false replaces the bottleneck fusion and the skip gates by identity.
    bool attention = true;

    // Throws ParameterError naming the first violated invariant.
    void validate() const;
    std::int64_t alignment() const { return std::int64_t{1} << levels; }
    std::int64_t channels_at(std::int64_t level) const { return base_channels << level; }
    bool operator==(const NetConfig&) const = default;
};

// conv3x3 -> BN -> dropout -> ReLU, twice. The convolutions carry no bias;
// BN's beta takes its place.
template <typename T>
struct ConvBlock {
    Tensor<T> conv1_weight, bn1_gamma, bn1_beta;
    Tensor<T> conv2_weight, bn2_gamma, bn2_beta;
    ops::BatchNormStats<T> bn1, bn2;

    static ConvBlock create(std::int64_t in, std::int64_t out, Rng& rng);
};

template <typename T>
struct DecoderLevel {
    Tensor<T> up_weight, up_bias;  // 1x1, halves the channels after upsampling
    attention::SkipSpatialGate<T> gate;
    ConvBlock<T> block;
};

template <typename T>
class Model {
public:
    // Deterministic in (config, seed).
    static Model build(const NetConfig& config, std::uint64_t seed);

    const NetConfig& config() const { return config_; }
    std::uint64_t init_seed() const { return init_seed_; }

    // images [N, in_channels, S, S] with S = config.input_size. Returns the
    // pre-sigmoid [N, 1, S, S] map. Train mode updates the BN running stats
    // and draws dropout masks from `rng`.
    Tensor<T> forward_logits(const Tensor<T>& images, Mode mode, Rng& rng);
    // sigmoid(forward_logits).
    Tensor<T> forward(const Tensor<T>& images, Mode mode, Rng& rng);

    // Eval-mode probabilities for any spatial size that is a multiple of
    // 2^levels (padded full images). Never records a graph.
    Tensor<T> infer(const Tensor<T>& images) const;
    ProbabilityMap infer(const GrayImage& image) const;

    // Trainable tensors in checkpoint order.
    ParameterList<T> parameters();
    // BN running statistics in checkpoint order.
    BufferList<T> buffers();
    std::int64_t parameter_count() const;

    // Momentum for BN running stats in train mode (not persisted).
    double bn_momentum = ops::bn_momentum;

    template <typename U>
    Model<U> cast() const;

private:
    template <typename>
    friend class Model;

    Tensor<T> run(const Tensor<T>& x, Mode mode, Rng& rng);

    NetConfig config_;
    std::uint64_t init_seed_ = 0;
    std::vector<ConvBlock<T>> encoder_;
    attention::DualAttentionFusion<T> bottleneck_;
    std::vector<DecoderLevel<T>> decoder_;
    Tensor<T> head_weight_, head_bias_;
};

}  // namespace dualseg::network
