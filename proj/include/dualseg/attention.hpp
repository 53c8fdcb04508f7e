#pragma once

#include <cstdint>
#include <string>

#include "dualseg/parameters.hpp"
#include "dualseg/rng.hpp"
#include "dualseg/tensor.hpp"

namespace dualseg::attention {

inline constexpr std::int64_t default_position_cap = 4096;

// Position self-attention. Queries come from a 1×3 convolution, keys from a
// 3×1 convolution (both C -> C/r), values from a 1×1 convolution (C -> C).
template <typename T>
struct SpatialSelfAttention {
    std::int64_t channels = 0;
    std::int64_t reduced = 0;
    std::int64_t position_cap = default_position_cap;
    Tensor<T> query_weight;  // [C/r, C, 1, 3]
    Tensor<T> query_bias;    // [C/r]
    Tensor<T> key_weight;    // [C/r, C, 3, 1]
    Tensor<T> key_bias;      // [C/r]
    Tensor<T> value_weight;  // [C, C, 1, 1]
    Tensor<T> value_bias;    // [C]

    static SpatialSelfAttention create(std::int64_t channels, std::int64_t reduction, Rng& rng);
    void collect(const std::string& prefix, ParameterList<T>& out);
};

// Fusion of the position and channel branches, both fed the same input.
template <typename T>
struct DualAttentionFusion {
    SpatialSelfAttention<T> spatial;
    Tensor<T> fusion_weight;  // [C, 2C, 1, 1]
    Tensor<T> fusion_bias;    // [C]

    static DualAttentionFusion create(std::int64_t channels, std::int64_t reduction, Rng& rng);
    void collect(const std::string& prefix, ParameterList<T>& out);
};

// Spatial gate for skip connections: channel-wise max and mean maps, a 7×7
// convolution (2 -> 1, padding 3, no bias) and a sigmoid.
template <typename T>
struct SkipSpatialGate {
    static constexpr std::int64_t kernel_size = 7;
    Tensor<T> weight;  // [1, 2, 7, 7]

    static SkipSpatialGate create(Rng& rng);
    void collect(const std::string& prefix, ParameterList<T>& out);
};

// Row-stochastic [N, HW, HW] map: row i is the softmax over key positions j
// of q_i · k_j. Throws ResourceError when H·W exceeds the module's cap.
template <typename T>
Tensor<T> spatial_attention_map(const Tensor<T>& features, const SpatialSelfAttention<T>& module);

// F + V·Sᵀ, reshaped back to [N, C, H, W].
template <typename T>
Tensor<T> apply_spatial_attention(const Tensor<T>& features,
                                  const SpatialSelfAttention<T>& module);

// Row-stochastic [N, C, C] map: softmax over the last axis of the channel
// Gram matrix F·Fᵀ (F reshaped to C × HW).
template <typename T>
Tensor<T> channel_attention_map(const Tensor<T>& features);

// F + map·F.
template <typename T>
Tensor<T> apply_channel_attention(const Tensor<T>& features);

// conv1x1(concat(spatial(F), channel(F))).
template <typename T>
Tensor<T> fuse_dual(const Tensor<T>& features, const DualAttentionFusion<T>& module);

// The [N, 1, H, W] gate in (0, 1).
template <typename T>
Tensor<T> skip_gate_map(const Tensor<T>& features, const SkipSpatialGate<T>& module);

// F ⊙ gate, broadcast over channels.
template <typename T>
Tensor<T> skip_gate(const Tensor<T>& features, const SkipSpatialGate<T>& module);

}  // namespace dualseg::attention
