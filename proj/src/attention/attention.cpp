#include "dualseg/attention.hpp"

#include "dualseg/ops.hpp"

namespace dualseg::attention {

namespace {

template <typename T>
void require_feature_map(const Tensor<T>& f, const char* op) {
    if (!f.defined() || f.rank() != 4) {
        throw DimensionError(std::string(op) + ": expected [N, C, H, W] features");
    }
}

}  // namespace

template <typename T>
SpatialSelfAttention<T> SpatialSelfAttention<T>::create(std::int64_t channels,
                                                        std::int64_t reduction, Rng& rng) {
    if (reduction <= 0 || channels <= 0 || channels % reduction != 0) {
        throw ParameterError("spatial attention: channels (" + std::to_string(channels) +
                             ") must be divisible by the reduction ratio (" +
                             std::to_string(reduction) + ")");
    }
    SpatialSelfAttention m;
    m.channels = channels;
    m.reduced = channels / reduction;
    m.query_weight = kaiming_conv_weight<T>({m.reduced, channels, 1, 3}, rng);
    m.query_bias = Tensor<T>::zeros({m.reduced}, true);
    m.key_weight = kaiming_conv_weight<T>({m.reduced, channels, 3, 1}, rng);
    m.key_bias = Tensor<T>::zeros({m.reduced}, true);
    m.value_weight = kaiming_conv_weight<T>({channels, channels, 1, 1}, rng);
    m.value_bias = Tensor<T>::zeros({channels}, true);
    return m;
}

template <typename T>
void SpatialSelfAttention<T>::collect(const std::string& prefix, ParameterList<T>& out) {
    out.push_back({prefix + ".query.weight", &query_weight});
    out.push_back({prefix + ".query.bias", &query_bias});
    out.push_back({prefix + ".key.weight", &key_weight});
    out.push_back({prefix + ".key.bias", &key_bias});
    out.push_back({prefix + ".value.weight", &value_weight});
    out.push_back({prefix + ".value.bias", &value_bias});
}

template <typename T>
DualAttentionFusion<T> DualAttentionFusion<T>::create(std::int64_t channels,
                                                      std::int64_t reduction, Rng& rng) {
    DualAttentionFusion m;
    m.spatial = SpatialSelfAttention<T>::create(channels, reduction, rng);
    m.fusion_weight = kaiming_conv_weight<T>({channels, 2 * channels, 1, 1}, rng);
    m.fusion_bias = Tensor<T>::zeros({channels}, true);
    return m;
}

template <typename T>
void DualAttentionFusion<T>::collect(const std::string& prefix, ParameterList<T>& out) {
    spatial.collect(prefix + ".spatial", out);
    out.push_back({prefix + ".fusion.weight", &fusion_weight});
    out.push_back({prefix + ".fusion.bias", &fusion_bias});
}

template <typename T>
SkipSpatialGate<T> SkipSpatialGate<T>::create(Rng& rng) {
    SkipSpatialGate m;
    m.weight = kaiming_conv_weight<T>({1, 2, kernel_size, kernel_size}, rng);
    return m;
}

template <typename T>
void SkipSpatialGate<T>::collect(const std::string& prefix, ParameterList<T>& out) {
    out.push_back({prefix + ".weight", &weight});
}

template <typename T>
Tensor<T> spatial_attention_map(const Tensor<T>& features, const SpatialSelfAttention<T>& module) {
    require_feature_map(features, "spatial_attention_map");
    const std::int64_t n = features.dim(0), c = features.dim(1);
    const std::int64_t positions = features.dim(2) * features.dim(3);
    if (c != module.channels) {
        throw DimensionError("spatial_attention_map: module built for " +
                             std::to_string(module.channels) + " channels, got " +
                             std::to_string(c));
    }
    if (positions > module.position_cap) {
        throw ResourceError("spatial_attention_map: " + std::to_string(positions) +
                            " positions exceed the dense-map cap of " +
                            std::to_string(module.position_cap));
    }
    auto q = ops::conv2d(features, module.query_weight, module.query_bias,
                         ops::Conv2dParams::same(1, 3));
    auto k = ops::conv2d(features, module.key_weight, module.key_bias,
                         ops::Conv2dParams::same(3, 1));
    q = ops::reshape(q, {n, module.reduced, positions});
    k = ops::reshape(k, {n, module.reduced, positions});
    // energy[i, j] = q_i · k_j
    auto energy = ops::matmul(ops::transpose(q), k);
    return ops::softmax(energy, -1);
}

template <typename T>
Tensor<T> apply_spatial_attention(const Tensor<T>& features,
                                  const SpatialSelfAttention<T>& module) {
    auto map = spatial_attention_map(features, module);
    const std::int64_t n = features.dim(0), c = features.dim(1);
    const std::int64_t positions = features.dim(2) * features.dim(3);
    auto v = ops::conv2d(features, module.value_weight, module.value_bias);
    v = ops::reshape(v, {n, c, positions});
    // out[c, i] = sum_j v[c, j] * map[i, j]
    auto attended = ops::matmul(v, ops::transpose(map));
    return ops::add(features, ops::reshape(attended, features.shape()));
}

template <typename T>
Tensor<T> channel_attention_map(const Tensor<T>& features) {
    require_feature_map(features, "channel_attention_map");
    const std::int64_t n = features.dim(0), c = features.dim(1);
    auto flat = ops::reshape(features, {n, c, features.dim(2) * features.dim(3)});
    auto gram = ops::matmul(flat, ops::transpose(flat));
    return ops::softmax(gram, -1);
}

template <typename T>
Tensor<T> apply_channel_attention(const Tensor<T>& features) {
    auto map = channel_attention_map(features);
    auto flat = ops::reshape(features, {features.dim(0), features.dim(1),
                                        features.dim(2) * features.dim(3)});
    auto attended = ops::matmul(map, flat);
    return ops::add(features, ops::reshape(attended, features.shape()));
}

template <typename T>
Tensor<T> fuse_dual(const Tensor<T>& features, const DualAttentionFusion<T>& module) {
    auto spatial = apply_spatial_attention(features, module.spatial);
    auto channel = apply_channel_attention(features);
    return ops::conv2d(ops::concat_channels(spatial, channel), module.fusion_weight,
                       module.fusion_bias);
}

template <typename T>
Tensor<T> skip_gate_map(const Tensor<T>& features, const SkipSpatialGate<T>& module) {
    require_feature_map(features, "skip_gate");
    auto pooled = ops::concat_channels(ops::channel_max(features), ops::channel_mean(features));
    const std::int64_t pad = SkipSpatialGate<T>::kernel_size / 2;
    return ops::sigmoid(ops::conv2d(pooled, module.weight, Tensor<T>(), {1, pad, pad}));
}

template <typename T>
Tensor<T> skip_gate(const Tensor<T>& features, const SkipSpatialGate<T>& module) {
    return ops::mul_channel_broadcast(features, skip_gate_map(features, module));
}

#define DUALSEG_INSTANTIATE_ATTENTION(T)                                                       \
    template struct SpatialSelfAttention<T>;                                                   \
    template struct DualAttentionFusion<T>;                                                    \
    template struct SkipSpatialGate<T>;                                                        \
    template Tensor<T> spatial_attention_map<T>(const Tensor<T>&, const SpatialSelfAttention<T>&); \
    template Tensor<T> apply_spatial_attention<T>(const Tensor<T>&,                            \
                                                  const SpatialSelfAttention<T>&);             \
    template Tensor<T> channel_attention_map<T>(const Tensor<T>&);                             \
    template Tensor<T> apply_channel_attention<T>(const Tensor<T>&);                           \
    template Tensor<T> fuse_dual<T>(const Tensor<T>&, const DualAttentionFusion<T>&);          \
    template Tensor<T> skip_gate_map<T>(const Tensor<T>&, const SkipSpatialGate<T>&);          \
    template Tensor<T> skip_gate<T>(const Tensor<T>&, const SkipSpatialGate<T>&);

DUALSEG_INSTANTIATE_ATTENTION(float)
DUALSEG_INSTANTIATE_ATTENTION(double)

}  // namespace dualseg::attention
