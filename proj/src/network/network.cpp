#include "dualseg/network.hpp"

#include <string>

namespace dualseg::network {

void NetConfig::validate() const {
    auto fail = [](const std::string& what) { throw ParameterError("network config: " + what); };
    if (in_channels < 1) fail("in_channels must be >= 1");
    if (base_channels < 2) fail("base_channels must be >= 2");
    if (levels < 1 || levels > 8) fail("levels must lie in [1, 8]");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
    if (reduction < 1) fail("reduction must be >= 1");
    if (input_size < 1 || input_size % alignment() != 0) {
        fail("input_size (" + std::to_string(input_size) + ") must be a positive multiple of 2^levels (" +
             std::to_string(alignment()) + ")");
    }
    if (attention && channels_at(levels - 1) % reduction != 0) {
        fail("base_channels * 2^(levels-1) (" + std::to_string(channels_at(levels - 1)) +
             ") must be divisible by reduction (" + std::to_string(reduction) + ")");
    }
}

namespace {

template <typename T>
Tensor<T> conv3x3_weight(std::int64_t out, std::int64_t in, Rng& rng) {
    return kaiming_conv_weight<T>({out, in, 3, 3}, rng);
}

template <typename T>
void collect_block(const std::string& prefix, ConvBlock<T>& b, ParameterList<T>& out) {
    out.push_back({prefix + ".conv1.weight", &b.conv1_weight});
    out.push_back({prefix + ".bn1.gamma", &b.bn1_gamma});
    out.push_back({prefix + ".bn1.beta", &b.bn1_beta});
    out.push_back({prefix + ".conv2.weight", &b.conv2_weight});
    out.push_back({prefix + ".bn2.gamma", &b.bn2_gamma});
    out.push_back({prefix + ".bn2.beta", &b.bn2_beta});
}

template <typename T>
void collect_block_buffers(const std::string& prefix, ConvBlock<T>& b, BufferList<T>& out) {
    out.push_back({prefix + ".bn1.running_mean", &b.bn1.running_mean});
    out.push_back({prefix + ".bn1.running_var", &b.bn1.running_var});
    out.push_back({prefix + ".bn2.running_mean", &b.bn2.running_mean});
    out.push_back({prefix + ".bn2.running_var", &b.bn2.running_var});
}

template <typename T>
Tensor<T> apply_block(ConvBlock<T>& b, Tensor<T> x, Mode mode, Rng& rng, double p,
                      double momentum) {
    const auto same = ops::Conv2dParams::same(3, 3);
    x = ops::conv2d(x, b.conv1_weight, Tensor<T>(), same);
    x = ops::batch_norm(x, b.bn1_gamma, b.bn1_beta, b.bn1, mode, ops::bn_epsilon, momentum);
    x = ops::relu(ops::dropout(x, p, mode, rng));
    x = ops::conv2d(x, b.conv2_weight, Tensor<T>(), same);
    x = ops::batch_norm(x, b.bn2_gamma, b.bn2_beta, b.bn2, mode, ops::bn_epsilon, momentum);
    return ops::relu(ops::dropout(x, p, mode, rng));
}

std::string level_name(const char* part, std::int64_t level) {
    return std::string(part) + "." + std::to_string(level);
}

}  // namespace

template <typename T>
ConvBlock<T> ConvBlock<T>::create(std::int64_t in, std::int64_t out, Rng& rng) {
    ConvBlock b;
    b.conv1_weight = conv3x3_weight<T>(out, in, rng);
    b.bn1_gamma = Tensor<T>::full({out}, T(1), true);
    b.bn1_beta = Tensor<T>::zeros({out}, true);
    b.conv2_weight = conv3x3_weight<T>(out, out, rng);
    b.bn2_gamma = Tensor<T>::full({out}, T(1), true);
    b.bn2_beta = Tensor<T>::zeros({out}, true);
    b.bn1 = ops::BatchNormStats<T>(out);
    b.bn2 = ops::BatchNormStats<T>(out);
    return b;
}

template <typename T>
Model<T> Model<T>::build(const NetConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config_ = config;
    m.init_seed_ = seed;
    Rng rng(seed);
    const std::int64_t levels = config.levels;

    std::int64_t in = config.in_channels;
    for (std::int64_t l = 0; l < levels; ++l) {
        m.encoder_.push_back(ConvBlock<T>::create(in, config.channels_at(l), rng));
        in = config.channels_at(l);
    }
    if (config.attention) {
        m.bottleneck_ = attention::DualAttentionFusion<T>::create(in, config.reduction, rng);
    }
    // Decoder levels are created deepest first, the order they run in.
    m.decoder_.resize(static_cast<std::size_t>(levels));
    for (std::int64_t l = levels - 1; l >= 0; --l) {
        auto& d = m.decoder_[static_cast<std::size_t>(l)];
        const std::int64_t up = in / 2;
        d.up_weight = kaiming_conv_weight<T>({up, in, 1, 1}, rng);
        d.up_bias = Tensor<T>::zeros({up}, true);
        if (config.attention) {
            d.gate = attention::SkipSpatialGate<T>::create(rng);
        }
        d.block = ConvBlock<T>::create(up + config.channels_at(l), config.channels_at(l), rng);
        in = config.channels_at(l);
    }
    m.head_weight_ = kaiming_conv_weight<T>({1, in, 1, 1}, rng);
    m.head_bias_ = Tensor<T>::zeros({1}, true);
    return m;
}

template <typename T>
Tensor<T> Model<T>::run(const Tensor<T>& images, Mode mode, Rng& rng) {
    const double p = config_.dropout;
    std::vector<Tensor<T>> skips;
    Tensor<T> x = images;
    for (auto& block : encoder_) {
        x = apply_block(block, x, mode, rng, p, bn_momentum);
        skips.push_back(x);
        x = ops::max_pool2d(x);
    }
    if (config_.attention) {
        x = attention::fuse_dual(x, bottleneck_);
    }
    for (std::int64_t l = config_.levels - 1; l >= 0; --l) {
        auto& d = decoder_[static_cast<std::size_t>(l)];
        x = ops::conv2d(ops::upsample_nearest(x), d.up_weight, d.up_bias);
        auto skip = skips[static_cast<std::size_t>(l)];
        if (config_.attention) {
            skip = attention::skip_gate(skip, d.gate);
        }
        x = apply_block(d.block, ops::concat_channels(skip, x), mode, rng, p, bn_momentum);
    }
    return ops::conv2d(x, head_weight_, head_bias_);
}

template <typename T>
Tensor<T> Model<T>::forward_logits(const Tensor<T>& images, Mode mode, Rng& rng) {
    const std::int64_t s = config_.input_size;
    if (!images.defined() || images.rank() != 4 || images.dim(1) != config_.in_channels ||
        images.dim(2) != s || images.dim(3) != s) {
        throw DimensionError("forward: expected [N, " + std::to_string(config_.in_channels) + ", " +
                             std::to_string(s) + ", " + std::to_string(s) + "] input, got " +
                             (images.defined() ? to_string(images.shape()) : "undefined"));
    }
    return run(images, mode, rng);
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& images, Mode mode, Rng& rng) {
    return ops::sigmoid(forward_logits(images, mode, rng));
}

template <typename T>
Tensor<T> Model<T>::infer(const Tensor<T>& images) const {
    const std::int64_t a = config_.alignment();
    if (!images.defined() || images.rank() != 4 || images.dim(1) != config_.in_channels ||
        images.dim(2) % a != 0 || images.dim(3) % a != 0) {
        throw DimensionError("infer: expected [N, " + std::to_string(config_.in_channels) +
                             ", H, W] with H and W multiples of " + std::to_string(a) + ", got " +
                             (images.defined() ? to_string(images.shape()) : "undefined"));
    }
    NoGradGuard no_grad;
    Rng unused(0);
    // Eval mode only reads the BN statistics and never draws from the rng.
    return ops::sigmoid(const_cast<Model*>(this)->run(images, Mode::eval, unused));
}

template <typename T>
ProbabilityMap Model<T>::infer(const GrayImage& image) const {
    if (config_.in_channels != 1) {
        throw DimensionError("infer: model expects " + std::to_string(config_.in_channels) +
                             " input channels, got a grayscale image");
    }
    std::vector<T> values(image.pixels.begin(), image.pixels.end());
    auto out = infer(Tensor<T>({1, 1, image.height, image.width}, std::move(values)));
    ProbabilityMap p(image.height, image.width);
    for (std::size_t i = 0; i < p.pixels.size(); ++i) {
        p.pixels[i] = static_cast<float>(out[static_cast<std::int64_t>(i)]);
    }
    return p;
}

template <typename T>
ParameterList<T> Model<T>::parameters() {
    ParameterList<T> out;
    for (std::int64_t l = 0; l < config_.levels; ++l) {
        collect_block(level_name("encoder", l), encoder_[static_cast<std::size_t>(l)], out);
    }
    if (config_.attention) {
        bottleneck_.collect("bottleneck", out);
    }
    for (std::int64_t l = config_.levels - 1; l >= 0; --l) {
        auto& d = decoder_[static_cast<std::size_t>(l)];
        const auto prefix = level_name("decoder", l);
        out.push_back({prefix + ".up.weight", &d.up_weight});
        out.push_back({prefix + ".up.bias", &d.up_bias});
        if (config_.attention) {
            d.gate.collect(prefix + ".gate", out);
        }
        collect_block(prefix + ".block", d.block, out);
    }
    out.push_back({"head.weight", &head_weight_});
    out.push_back({"head.bias", &head_bias_});
    return out;
}

template <typename T>
BufferList<T> Model<T>::buffers() {
    BufferList<T> out;
    for (std::int64_t l = 0; l < config_.levels; ++l) {
        collect_block_buffers(level_name("encoder", l), encoder_[static_cast<std::size_t>(l)], out);
    }
    for (std::int64_t l = config_.levels - 1; l >= 0; --l) {
        collect_block_buffers(level_name("decoder", l) + ".block",
                              decoder_[static_cast<std::size_t>(l)].block, out);
    }
    return out;
}

template <typename T>
std::int64_t Model<T>::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : const_cast<Model*>(this)->parameters()) {
        n += p.tensor->size();
    }
    return n;
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
    auto out = Model<U>::build(config_, init_seed_);
    out.bn_momentum = bn_momentum;
    auto& self = const_cast<Model&>(*this);
    auto src = self.parameters();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
        *dst[i].tensor = src[i].tensor->template cast<U>();
    }
    auto src_buf = self.buffers();
    auto dst_buf = out.buffers();
    for (std::size_t i = 0; i < src_buf.size(); ++i) {
        dst_buf[i].values->assign(src_buf[i].values->begin(), src_buf[i].values->end());
    }
    return out;
}

template struct ConvBlock<float>;
template struct ConvBlock<double>;
template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;

}  // namespace dualseg::network
