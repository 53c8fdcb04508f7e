#pragma once

#include <cstdint>
#include <vector>

#include "dualseg/rng.hpp"
#include "dualseg/tensor.hpp"

// Differentiable primitives. Feature maps are rank-4 [N, C, H, W]; a single
// C×H×W map is the N = 1 case. Every op checks its output for NaN/Inf.
namespace dualseg::ops {

struct Conv2dParams {
    std::int64_t stride = 1;
    std::int64_t pad_h = 0;
    std::int64_t pad_w = 0;

    static Conv2dParams same(std::int64_t kh, std::int64_t kw) { return {1, kh / 2, kw / 2}; }
};

// x [N,Ci,H,W], kernel [Co,Ci,kH,kW], bias [Co] or undefined. Zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 Conv2dParams params = {});

template <typename T>
struct BatchNormStats {
    std::vector<T> running_mean;
    std::vector<T> running_var;

    explicit BatchNormStats(std::int64_t channels = 0)
        : running_mean(static_cast<std::size_t>(channels), T(0)),
          running_var(static_cast<std::size_t>(channels), T(1)) {}
};

inline constexpr double bn_epsilon = 1e-5;
inline constexpr double bn_momentum = 0.9;

// Train mode normalizes each channel over N×H×W with the biased variance and
// folds the batch statistics into `stats` as
//   running = momentum * running + (1 - momentum) * batch.
// Eval mode normalizes with the running statistics.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormStats<T>& stats, Mode mode, double epsilon = bn_epsilon,
                     double momentum = bn_momentum);

// Inverted dropout: survivors are scaled by 1/(1-p) so eval is the identity.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Mode mode, Rng& rng);

// 2×2 window, stride 2. Max routes the gradient to the first maximum in
// row-major window order.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x);
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x);

// Nearest-neighbour ×2.
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x);

// [m,k]·[k,n] or batched [B,m,k]·[B,k,n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// Concatenation of two [N,*,H,W] maps along the channel axis.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

// Per-pixel max / mean across channels: [N,C,H,W] -> [N,1,H,W]. Max ties
// go to the lowest channel index.
template <typename T>
Tensor<T> channel_max(const Tensor<T>& x);
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x);

// x [N,C,H,W] scaled per pixel by gate [N,1,H,W].
template <typename T>
Tensor<T> mul_channel_broadcast(const Tensor<T>& x, const Tensor<T>& gate);

// Reorders channels: out channel c = x channel perm[c].
template <typename T>
Tensor<T> permute_channels(const Tensor<T>& x, const std::vector<std::int64_t>& perm);

inline constexpr double probability_clamp = 1e-7;

// Mean binary cross-entropy from pre-sigmoid logits, in the stable form
//   max(z,0) - z*g + log(1 + exp(-|z|)).
// `target` is a constant (no gradient flows to it).
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& target);

// Mean binary cross-entropy from probabilities clamped to
// [probability_clamp, 1 - probability_clamp].
template <typename T>
Tensor<T> bce(const Tensor<T>& probs, const Tensor<T>& target);

// While alive, folds the discrete choices made by relu, max_pool2d and
// channel_max on this thread (sign bits, argmax indices) into a hash. Two
// evaluations with equal hashes ran through the same linear pieces.
class KinkRecorder {
public:
    KinkRecorder();
    ~KinkRecorder();
    KinkRecorder(const KinkRecorder&) = delete;
    KinkRecorder& operator=(const KinkRecorder&) = delete;

    std::uint64_t hash() const { return hash_; }
    void reset() { hash_ = 0; }

private:
    std::uint64_t hash_ = 0;
    KinkRecorder* previous_;
};

}  // namespace dualseg::ops
