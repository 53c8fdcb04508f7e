#include "dualseg/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dualseg::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_rank(const Tensor<T>& x, int rank, const char* op) {
    if (!x.defined() || x.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected a rank-" + std::to_string(rank) +
                             " tensor, got " +
                             (x.defined() ? to_string(x.shape()) : std::string("undefined")));
    }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                             " vs " + to_string(b.shape()));
    }
}

struct ConvGeometry {
    std::int64_t channels, height, width;
    std::int64_t kh, kw;
    std::int64_t stride, pad_h, pad_w;
    std::int64_t out_h, out_w;

    std::int64_t rows() const { return channels * kh * kw; }
    std::int64_t cols() const { return out_h * out_w; }
    bool is_pointwise() const {
        return kh == 1 && kw == 1 && stride == 1 && pad_h == 0 && pad_w == 0;
    }
};

// Output columns [lo, hi) whose input column ox*stride + offset is in range.
inline void valid_range(std::int64_t offset, std::int64_t stride, std::int64_t extent,
                        std::int64_t out, std::int64_t& lo, std::int64_t& hi) {
    lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
    hi = extent - offset <= 0 ? 0 : (extent - offset + stride - 1) / stride;
    hi = std::min(hi, out);
    lo = std::min(lo, hi);
}

// col[(c*kh + i)*kw + j, oy*out_w + ox] = x[c, oy*s + i - ph, ox*s + j - pw]
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
    for (std::int64_t c = 0; c < g.channels; ++c) {
        for (std::int64_t i = 0; i < g.kh; ++i) {
            for (std::int64_t j = 0; j < g.kw; ++j) {
                T* row = col + ((c * g.kh + i) * g.kw + j) * g.cols();
                std::int64_t lo, hi;
                valid_range(j - g.pad_w, g.stride, g.width, g.out_w, lo, hi);
                for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
                    const std::int64_t y = oy * g.stride + i - g.pad_h;
                    T* dst = row + oy * g.out_w;
                    if (y < 0 || y >= g.height) {
                        std::fill(dst, dst + g.out_w, T(0));
                        continue;
                    }
                    const T* src = x + (c * g.height + y) * g.width;
                    const std::int64_t off = j - g.pad_w;
                    std::fill(dst, dst + lo, T(0));
                    if (g.stride == 1) {
                        std::copy(src + lo + off, src + hi + off, dst + lo);
                    } else {
                        for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + off];
                    }
                    std::fill(dst + hi, dst + g.out_w, T(0));
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* x) {
    for (std::int64_t c = 0; c < g.channels; ++c) {
        for (std::int64_t i = 0; i < g.kh; ++i) {
            for (std::int64_t j = 0; j < g.kw; ++j) {
                const T* row = col + ((c * g.kh + i) * g.kw + j) * g.cols();
                std::int64_t lo, hi;
                valid_range(j - g.pad_w, g.stride, g.width, g.out_w, lo, hi);
                for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
                    const std::int64_t y = oy * g.stride + i - g.pad_h;
                    if (y < 0 || y >= g.height) {
                        continue;
                    }
                    const T* src = row + oy * g.out_w;
                    T* dst = x + (c * g.height + y) * g.width;
                    const std::int64_t off = j - g.pad_w;
                    for (std::int64_t ox = lo; ox < hi; ++ox) {
                        dst[ox * g.stride + off] += src[ox];
                    }
                }
            }
        }
    }
}

template <typename T>
Tensor<T> elementwise_unary(const char* op, const Tensor<T>& x, std::vector<T> out,
                            std::vector<T> local_grad) {
    auto shared = std::make_shared<std::vector<T>>(std::move(local_grad));
    return make_result<T>(op, x.shape(), std::move(out), {&x}, [shared](Node<T>& self) {
        std::vector<T> g(self.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] = self.grad[i] * (*shared)[i];
        }
        accumulate_grad<T>(*self.inputs[0], g);
    });
}

int normalize_axis(int axis, int rank, const char* op) {
    if (axis < 0) {
        axis += rank;
    }
    if (axis < 0 || axis >= rank) {
        throw DimensionError(std::string(op) + ": axis out of range");
    }
    return axis;
}

}  // namespace

// ---------------------------------------------------------------- conv2d

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 Conv2dParams params) {
    require_rank(x, 4, "conv2d");
    require_rank(kernel, 4, "conv2d kernel");
    const std::int64_t n = x.dim(0);
    const std::int64_t co = kernel.dim(0);
    ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), kernel.dim(2), kernel.dim(3),
                   params.stride, params.pad_h, params.pad_w, 0, 0};
    if (kernel.dim(1) != g.channels) {
        throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                             " input channels, input has " + std::to_string(g.channels));
    }
    if (params.stride <= 0 || params.pad_h < 0 || params.pad_w < 0) {
        throw ParameterError("conv2d: stride must be positive and padding non-negative");
    }
    if (g.kh > g.height + 2 * g.pad_h || g.kw > g.width + 2 * g.pad_w) {
        throw DimensionError("conv2d: kernel " + to_string(kernel.shape()) +
                             " larger than padded input " + to_string(x.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co)) {
        throw DimensionError("conv2d: bias must have shape [" + std::to_string(co) + "]");
    }
    g.out_h = (g.height + 2 * g.pad_h - g.kh) / g.stride + 1;
    g.out_w = (g.width + 2 * g.pad_w - g.kw) / g.stride + 1;

    const std::int64_t k = g.rows();
    const std::int64_t p = g.cols();
    const std::int64_t in_plane = g.channels * g.height * g.width;
    std::vector<T> out(static_cast<std::size_t>(n * co * p));

    // The im2col buffers are kept for the weight gradient.
    auto cols = std::make_shared<std::vector<T>>();
    if (!g.is_pointwise()) {
        cols->resize(static_cast<std::size_t>(n * k * p));
    }
    ConstMatMap<T> w(kernel.data().data(), co, k);
    for (std::int64_t s = 0; s < n; ++s) {
        const T* col = x.data().data() + s * in_plane;
        if (!g.is_pointwise()) {
            T* buf = cols->data() + s * k * p;
            im2col(col, g, buf);
            col = buf;
        }
        MatMap<T> y(out.data() + s * co * p, co, p);
        y.noalias() = w * ConstMatMap<T>(col, k, p);
        if (bias.defined()) {
            for (std::int64_t c = 0; c < co; ++c) {
                y.row(c).array() += bias[c];
            }
        }
    }

    const bool has_bias = bias.defined();
    return make_result<T>(
        "conv2d", Shape{n, co, g.out_h, g.out_w}, std::move(out), {&x, &kernel, &bias},
        [g, n, co, k, p, in_plane, cols, has_bias](Node<T>& self) {
            Node<T>& xin = *self.inputs[0];
            Node<T>& win = *self.inputs[1];
            ConstMatMap<T> w(win.value.data(), co, k);
            if (win.requires_grad) {
                MatMap<T> dw(win.grad_buffer().data(), co, k);
                for (std::int64_t s = 0; s < n; ++s) {
                    const T* col = g.is_pointwise() ? xin.value.data() + s * in_plane
                                                    : cols->data() + s * k * p;
                    dw.noalias() += ConstMatMap<T>(self.grad.data() + s * co * p, co, p) *
                                    ConstMatMap<T>(col, k, p).transpose();
                }
            }
            if (has_bias && self.inputs[2]->requires_grad) {
                auto& db = self.inputs[2]->grad_buffer();
                // Sequential sums: Eigen's vectorized redux peels by address,
                // which would make the low bits depend on the allocation.
                for (std::int64_t s = 0; s < n; ++s) {
                    const T* dy = self.grad.data() + s * co * p;
                    for (std::int64_t c = 0; c < co; ++c) {
                        T acc = 0;
                        for (std::int64_t i = 0; i < p; ++i) acc += dy[c * p + i];
                        db[static_cast<std::size_t>(c)] += acc;
                    }
                }
            }
            if (xin.requires_grad) {
                auto& dx = xin.grad_buffer();
                RowMat<T> dcol(k, p);
                for (std::int64_t s = 0; s < n; ++s) {
                    ConstMatMap<T> dy(self.grad.data() + s * co * p, co, p);
                    if (g.is_pointwise()) {
                        MatMap<T>(dx.data() + s * in_plane, k, p).noalias() += w.transpose() * dy;
                    } else {
                        dcol.noalias() = w.transpose() * dy;
                        col2im_add(dcol.data(), g, dx.data() + s * in_plane);
                    }
                }
            }
        });
}

// ------------------------------------------------------------ batch_norm

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormStats<T>& stats, Mode mode, double epsilon, double momentum) {
    require_rank(x, 4, "batch_norm");
    if (!(epsilon > 0.0)) {
        throw ParameterError("batch_norm: epsilon must be positive");
    }
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (gamma.size() != c || beta.size() != c) {
        throw DimensionError("batch_norm: gamma/beta must have " + std::to_string(c) + " entries");
    }
    if (static_cast<std::int64_t>(stats.running_mean.size()) != c ||
        static_cast<std::int64_t>(stats.running_var.size()) != c) {
        throw DimensionError("batch_norm: running statistics sized for a different channel count");
    }
    const std::int64_t count = n * hw;
    auto xhat = std::make_shared<std::vector<T>>(x.data().size());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
    std::vector<T> out(x.data().size());
    const T* xs = x.data().data();

    for (std::int64_t ch = 0; ch < c; ++ch) {
        double mu = 0.0, var = 0.0;
        if (mode == Mode::train) {
            for (std::int64_t s = 0; s < n; ++s) {
                const T* p = xs + (s * c + ch) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    mu += p[i];
                }
            }
            mu /= static_cast<double>(count);
            for (std::int64_t s = 0; s < n; ++s) {
                const T* p = xs + (s * c + ch) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    const double d = p[i] - mu;
                    var += d * d;
                }
            }
            var /= static_cast<double>(count);
            auto& rm = stats.running_mean[static_cast<std::size_t>(ch)];
            auto& rv = stats.running_var[static_cast<std::size_t>(ch)];
            rm = static_cast<T>(momentum * rm + (1.0 - momentum) * mu);
            rv = static_cast<T>(momentum * rv + (1.0 - momentum) * var);
        } else {
            mu = stats.running_mean[static_cast<std::size_t>(ch)];
            var = stats.running_var[static_cast<std::size_t>(ch)];
        }
        const T is = static_cast<T>(1.0 / std::sqrt(var + epsilon));
        (*inv_std)[static_cast<std::size_t>(ch)] = is;
        const T gm = gamma[ch], bt = beta[ch];
        const T m = static_cast<T>(mu);
        for (std::int64_t s = 0; s < n; ++s) {
            const std::int64_t base = (s * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                const T h = (xs[base + i] - m) * is;
                (*xhat)[static_cast<std::size_t>(base + i)] = h;
                out[static_cast<std::size_t>(base + i)] = gm * h + bt;
            }
        }
    }

    const bool training = mode == Mode::train;
    return make_result<T>(
        "batch_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
        [n, c, hw, count, xhat, inv_std, training](Node<T>& self) {
            Node<T>& xin = *self.inputs[0];
            Node<T>& gin = *self.inputs[1];
            Node<T>& bin = *self.inputs[2];
            const auto& dy = self.grad;
            for (std::int64_t ch = 0; ch < c; ++ch) {
                T sum_dy = 0, sum_dy_xhat = 0;
                for (std::int64_t s = 0; s < n; ++s) {
                    const std::int64_t base = (s * c + ch) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        const auto idx = static_cast<std::size_t>(base + i);
                        sum_dy += dy[idx];
                        sum_dy_xhat += dy[idx] * (*xhat)[idx];
                    }
                }
                const auto cc = static_cast<std::size_t>(ch);
                if (gin.requires_grad) {
                    gin.grad_buffer()[cc] += sum_dy_xhat;
                }
                if (bin.requires_grad) {
                    bin.grad_buffer()[cc] += sum_dy;
                }
                if (!xin.requires_grad) {
                    continue;
                }
                auto& dx = xin.grad_buffer();
                const T gm = gin.value[cc];
                const T is = (*inv_std)[cc];
                const T inv_count = T(1) / static_cast<T>(count);
                for (std::int64_t s = 0; s < n; ++s) {
                    const std::int64_t base = (s * c + ch) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        const auto idx = static_cast<std::size_t>(base + i);
                        if (training) {
                            dx[idx] += gm * is *
                                       (dy[idx] - inv_count * sum_dy -
                                        (*xhat)[idx] * inv_count * sum_dy_xhat);
                        } else {
                            dx[idx] += gm * is * dy[idx];
                        }
                    }
                }
            }
        });
}

// --------------------------------------------------------------- dropout

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Mode mode, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) {
        throw ParameterError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
    }
    if (mode == Mode::eval || p == 0.0) {
        return x;
    }
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(x.data().size());
    std::vector<T> out(x.data().size());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = rng.uniform() < p ? T(0) : keep_scale;
        out[i] = x.data()[i] * mask[i];
    }
    return elementwise_unary<T>("dropout", x, std::move(out), std::move(mask));
}

// --------------------------------------------------------------- kinks

namespace {
thread_local KinkRecorder* active_recorder = nullptr;
thread_local std::uint64_t* active_hash = nullptr;

void fold(std::uint64_t v) {
    std::uint64_t& h = *active_hash;
    h = (h ^ (v + 0x9e3779b97f4a7c15ULL)) * 0x100000001b3ULL;
    h ^= h >> 29;
}
}  // namespace

KinkRecorder::KinkRecorder() : previous_(active_recorder) {
    active_recorder = this;
    active_hash = &hash_;
}

KinkRecorder::~KinkRecorder() {
    active_recorder = previous_;
    active_hash = previous_ ? &previous_->hash_ : nullptr;
}

// --------------------------------------------------------------- pooling

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x) {
    require_rank(x, 4, "max_pool2d");
    const std::int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) {
        throw DimensionError("max_pool2d: spatial dims must be even, got " + to_string(x.shape()));
    }
    const std::int64_t oh = h / 2, ow = w / 2;
    std::vector<T> out(static_cast<std::size_t>(nc * oh * ow));
    auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
    const T* xs = x.data().data();
    for (std::int64_t p = 0; p < nc; ++p) {
        for (std::int64_t oy = 0; oy < oh; ++oy) {
            for (std::int64_t ox = 0; ox < ow; ++ox) {
                std::int64_t best = (p * h + 2 * oy) * w + 2 * ox;
                for (std::int64_t dy = 0; dy < 2; ++dy) {
                    for (std::int64_t dx = 0; dx < 2; ++dx) {
                        const std::int64_t idx = (p * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if (xs[idx] > xs[best]) {
                            best = idx;
                        }
                    }
                }
                const auto o = static_cast<std::size_t>((p * oh + oy) * ow + ox);
                out[o] = xs[best];
                (*argmax)[o] = best;
            }
        }
    }
    if (active_hash) {
        for (auto i : *argmax) fold(static_cast<std::uint64_t>(i));
    }
    return make_result<T>("max_pool2d", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {&x},
                          [argmax](Node<T>& self) {
                              auto& dx = self.inputs[0]->grad_buffer();
                              for (std::size_t o = 0; o < argmax->size(); ++o) {
                                  dx[static_cast<std::size_t>((*argmax)[o])] += self.grad[o];
                              }
                          });
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x) {
    require_rank(x, 4, "avg_pool2d");
    const std::int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) {
        throw DimensionError("avg_pool2d: spatial dims must be even, got " + to_string(x.shape()));
    }
    const std::int64_t oh = h / 2, ow = w / 2;
    std::vector<T> out(static_cast<std::size_t>(nc * oh * ow));
    const T* xs = x.data().data();
    for (std::int64_t p = 0; p < nc; ++p) {
        for (std::int64_t oy = 0; oy < oh; ++oy) {
            for (std::int64_t ox = 0; ox < ow; ++ox) {
                const T* r0 = xs + (p * h + 2 * oy) * w + 2 * ox;
                const T* r1 = r0 + w;
                out[static_cast<std::size_t>((p * oh + oy) * ow + ox)] =
                    (r0[0] + r0[1] + r1[0] + r1[1]) * T(0.25);
            }
        }
    }
    return make_result<T>("avg_pool2d", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {&x},
                          [nc, h, w, oh, ow](Node<T>& self) {
                              auto& dx = self.inputs[0]->grad_buffer();
                              for (std::int64_t p = 0; p < nc; ++p) {
                                  for (std::int64_t y = 0; y < h; ++y) {
                                      for (std::int64_t xx = 0; xx < w; ++xx) {
                                          dx[static_cast<std::size_t>((p * h + y) * w + xx)] +=
                                              T(0.25) *
                                              self.grad[static_cast<std::size_t>(
                                                  (p * oh + y / 2) * ow + xx / 2)];
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x) {
    require_rank(x, 4, "upsample_nearest");
    const std::int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t oh = 2 * h, ow = 2 * w;
    std::vector<T> out(static_cast<std::size_t>(nc * oh * ow));
    const T* xs = x.data().data();
    for (std::int64_t p = 0; p < nc; ++p) {
        for (std::int64_t y = 0; y < oh; ++y) {
            for (std::int64_t xx = 0; xx < ow; ++xx) {
                out[static_cast<std::size_t>((p * oh + y) * ow + xx)] =
                    xs[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    return make_result<T>("upsample_nearest", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out),
                          {&x}, [nc, h, w, oh, ow](Node<T>& self) {
                              auto& dx = self.inputs[0]->grad_buffer();
                              for (std::int64_t p = 0; p < nc; ++p) {
                                  for (std::int64_t y = 0; y < oh; ++y) {
                                      for (std::int64_t xx = 0; xx < ow; ++xx) {
                                          dx[static_cast<std::size_t>((p * h + y / 2) * w + xx / 2)] +=
                                              self.grad[static_cast<std::size_t>((p * oh + y) * ow + xx)];
                                      }
                                  }
                              }
                          });
}

// ------------------------------------------------------- matmul/transpose

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.defined() || !b.defined() || a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3)) {
        throw DimensionError("matmul: operands must both be rank 2 or both rank 3");
    }
    const bool batched = a.rank() == 3;
    const std::int64_t batch = batched ? a.dim(0) : 1;
    if (batched && b.dim(0) != batch) {
        throw DimensionError("matmul: batch mismatch " + to_string(a.shape()) + " vs " +
                             to_string(b.shape()));
    }
    const std::int64_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
    if (b.dim(-2) != k) {
        throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) + " vs " +
                             to_string(b.shape()));
    }
    std::vector<T> out(static_cast<std::size_t>(batch * m * n));
    for (std::int64_t s = 0; s < batch; ++s) {
        MatMap<T>(out.data() + s * m * n, m, n).noalias() =
            ConstMatMap<T>(a.data().data() + s * m * k, m, k) *
            ConstMatMap<T>(b.data().data() + s * k * n, k, n);
    }
    Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
    return make_result<T>("matmul", std::move(shape), std::move(out), {&a, &b},
                          [batch, m, k, n](Node<T>& self) {
                              Node<T>& an = *self.inputs[0];
                              Node<T>& bn = *self.inputs[1];
                              for (std::int64_t s = 0; s < batch; ++s) {
                                  ConstMatMap<T> dc(self.grad.data() + s * m * n, m, n);
                                  if (an.requires_grad) {
                                      MatMap<T>(an.grad_buffer().data() + s * m * k, m, k).noalias() +=
                                          dc * ConstMatMap<T>(bn.value.data() + s * k * n, k, n).transpose();
                                  }
                                  if (bn.requires_grad) {
                                      MatMap<T>(bn.grad_buffer().data() + s * k * n, k, n).noalias() +=
                                          ConstMatMap<T>(an.value.data() + s * m * k, m, k).transpose() * dc;
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (!a.defined() || a.rank() < 2) {
        throw DimensionError("transpose: need rank >= 2");
    }
    const std::int64_t r = a.dim(-2), c = a.dim(-1);
    const std::int64_t batch = a.size() / (r * c);
    std::vector<T> out(a.data().size());
    for (std::int64_t s = 0; s < batch; ++s) {
        MatMap<T>(out.data() + s * r * c, c, r) =
            ConstMatMap<T>(a.data().data() + s * r * c, r, c).transpose();
    }
    Shape shape = a.shape();
    std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
    return make_result<T>("transpose", std::move(shape), std::move(out), {&a},
                          [batch, r, c](Node<T>& self) {
                              auto& da = self.inputs[0]->grad_buffer();
                              for (std::int64_t s = 0; s < batch; ++s) {
                                  MatMap<T>(da.data() + s * r * c, r, c) +=
                                      ConstMatMap<T>(self.grad.data() + s * r * c, c, r).transpose();
                              }
                          });
}

// --------------------------------------------------------------- softmax

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    axis = normalize_axis(axis, x.rank(), "softmax");
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) {
        outer *= x.dim(i);
    }
    for (int i = axis + 1; i < x.rank(); ++i) {
        inner *= x.dim(i);
    }
    const std::int64_t len = x.dim(axis);
    std::vector<T> out(x.data().size());
    const T* xs = x.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            T mx = xs[base];
            for (std::int64_t j = 1; j < len; ++j) {
                mx = std::max(mx, xs[base + j * inner]);
            }
            // double throughout, one rounding per output: float rows then
            // sum to 1 within a few ulp
            double total = 0;
            for (std::int64_t j = 0; j < len; ++j) {
                total += std::exp(static_cast<double>(xs[base + j * inner]) - static_cast<double>(mx));
            }
            for (std::int64_t j = 0; j < len; ++j) {
                const double e = std::exp(static_cast<double>(xs[base + j * inner]) - static_cast<double>(mx));
                out[static_cast<std::size_t>(base + j * inner)] = static_cast<T>(e / total);
            }
        }
    }
    auto y = std::make_shared<std::vector<T>>(out);
    return make_result<T>("softmax", x.shape(), std::move(out), {&x},
                          [y, outer, inner, len](Node<T>& self) {
                              auto& dx = self.inputs[0]->grad_buffer();
                              for (std::int64_t o = 0; o < outer; ++o) {
                                  for (std::int64_t in = 0; in < inner; ++in) {
                                      const std::int64_t base = o * len * inner + in;
                                      T dot = 0;
                                      for (std::int64_t j = 0; j < len; ++j) {
                                          const auto idx = static_cast<std::size_t>(base + j * inner);
                                          dot += self.grad[idx] * (*y)[idx];
                                      }
                                      for (std::int64_t j = 0; j < len; ++j) {
                                          const auto idx = static_cast<std::size_t>(base + j * inner);
                                          dx[idx] += (*y)[idx] * (self.grad[idx] - dot);
                                      }
                                  }
                              }
                          });
}

// ----------------------------------------------------------- elementwise

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    std::vector<T> out(x.data().size());
    std::vector<T> local(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x.data()[i];
        T s;
        if (v >= 0) {
            s = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            s = e / (T(1) + e);
        }
        out[i] = s;
        local[i] = s * (T(1) - s);
    }
    return elementwise_unary<T>("sigmoid", x, std::move(out), std::move(local));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.data().size());
    std::vector<T> local(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x.data()[i];
        out[i] = v > 0 ? v : T(0);
        local[i] = v > 0 ? T(1) : T(0);
    }
    if (active_hash) {
        std::uint64_t bits = 0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            bits = (bits << 1) | (local[i] > 0 ? 1u : 0u);
            if (i % 64 == 63) fold(bits);
        }
        fold(bits ^ out.size());
    }
    return elementwise_unary<T>("relu", x, std::move(out), std::move(local));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] + b.data()[i];
    }
    return make_result<T>("add", a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
        accumulate_grad<T>(*self.inputs[0], self.grad);
        accumulate_grad<T>(*self.inputs[1], self.grad);
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] - b.data()[i];
    }
    return make_result<T>("sub", a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
        accumulate_grad<T>(*self.inputs[0], self.grad);
        if (self.inputs[1]->requires_grad) {
            auto& db = self.inputs[1]->grad_buffer();
            for (std::size_t i = 0; i < db.size(); ++i) {
                db[i] -= self.grad[i];
            }
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] * b.data()[i];
    }
    return make_result<T>("mul", a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
        Node<T>& an = *self.inputs[0];
        Node<T>& bn = *self.inputs[1];
        if (an.requires_grad) {
            auto& da = an.grad_buffer();
            for (std::size_t i = 0; i < da.size(); ++i) {
                da[i] += self.grad[i] * bn.value[i];
            }
        }
        if (bn.requires_grad) {
            auto& db = bn.grad_buffer();
            for (std::size_t i = 0; i < db.size(); ++i) {
                db[i] += self.grad[i] * an.value[i];
            }
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    std::vector<T> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x.data()[i] * factor;
    }
    return make_result<T>("scale", x.shape(), std::move(out), {&x}, [factor](Node<T>& self) {
        auto& dx = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < dx.size(); ++i) {
            dx[i] += self.grad[i] * factor;
        }
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
    std::vector<T> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x.data()[i] + offset;
    }
    return make_result<T>("add_scalar", x.shape(), std::move(out), {&x}, [](Node<T>& self) {
        accumulate_grad<T>(*self.inputs[0], self.grad);
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T total = 0;
    for (T v : x.data()) {
        total += v;
    }
    return make_result<T>("sum", Shape{1}, {total}, {&x}, [](Node<T>& self) {
        auto& dx = self.inputs[0]->grad_buffer();
        for (auto& d : dx) {
            d += self.grad[0];
        }
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " +
                             to_string(shape));
    }
    std::vector<T> out(x.data().begin(), x.data().end());
    return make_result<T>("reshape", std::move(shape), std::move(out), {&x}, [](Node<T>& self) {
        accumulate_grad<T>(*self.inputs[0], self.grad);
    });
}

// ------------------------------------------------------- channel helpers

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank(a, 4, "concat_channels");
    require_rank(b, 4, "concat_channels");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        throw DimensionError("concat_channels: " + to_string(a.shape()) + " vs " +
                             to_string(b.shape()));
    }
    const std::int64_t n = a.dim(0), hw = a.dim(2) * a.dim(3);
    const std::int64_t ca = a.dim(1) * hw, cb = b.dim(1) * hw;
    std::vector<T> out(static_cast<std::size_t>(n * (ca + cb)));
    for (std::int64_t s = 0; s < n; ++s) {
        std::copy_n(a.data().data() + s * ca, ca, out.data() + s * (ca + cb));
        std::copy_n(b.data().data() + s * cb, cb, out.data() + s * (ca + cb) + ca);
    }
    return make_result<T>("concat_channels", Shape{n, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)},
                          std::move(out), {&a, &b}, [n, ca, cb](Node<T>& self) {
                              for (int side = 0; side < 2; ++side) {
                                  Node<T>& in = *self.inputs[static_cast<std::size_t>(side)];
                                  if (!in.requires_grad) {
                                      continue;
                                  }
                                  auto& d = in.grad_buffer();
                                  const std::int64_t len = side == 0 ? ca : cb;
                                  const std::int64_t off = side == 0 ? 0 : ca;
                                  for (std::int64_t s = 0; s < n; ++s) {
                                      const T* src = self.grad.data() + s * (ca + cb) + off;
                                      T* dst = d.data() + s * len;
                                      for (std::int64_t i = 0; i < len; ++i) {
                                          dst[i] += src[i];
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> channel_max(const Tensor<T>& x) {
    require_rank(x, 4, "channel_max");
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<T> out(static_cast<std::size_t>(n * hw));
    auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
    const T* xs = x.data().data();
    for (std::int64_t s = 0; s < n; ++s) {
        for (std::int64_t i = 0; i < hw; ++i) {
            std::int64_t best = s * c * hw + i;
            for (std::int64_t ch = 1; ch < c; ++ch) {
                const std::int64_t idx = (s * c + ch) * hw + i;
                if (xs[idx] > xs[best]) {
                    best = idx;
                }
            }
            out[static_cast<std::size_t>(s * hw + i)] = xs[best];
            (*argmax)[static_cast<std::size_t>(s * hw + i)] = best;
        }
    }
    if (active_hash) {
        for (auto i : *argmax) fold(static_cast<std::uint64_t>(i));
    }
    return make_result<T>("channel_max", Shape{n, 1, x.dim(2), x.dim(3)}, std::move(out), {&x},
                          [argmax](Node<T>& self) {
                              auto& dx = self.inputs[0]->grad_buffer();
                              for (std::size_t o = 0; o < argmax->size(); ++o) {
                                  dx[static_cast<std::size_t>((*argmax)[o])] += self.grad[o];
                              }
                          });
}

template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
    require_rank(x, 4, "channel_mean");
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<T> out(static_cast<std::size_t>(n * hw), T(0));
    const T* xs = x.data().data();
    const T inv = T(1) / static_cast<T>(c);
    for (std::int64_t s = 0; s < n; ++s) {
        T* dst = out.data() + s * hw;
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T* src = xs + (s * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                dst[i] += src[i];
            }
        }
        for (std::int64_t i = 0; i < hw; ++i) {
            dst[i] *= inv;
        }
    }
    return make_result<T>("channel_mean", Shape{n, 1, x.dim(2), x.dim(3)}, std::move(out), {&x},
                          [n, c, hw, inv](Node<T>& self) {
                              auto& dx = self.inputs[0]->grad_buffer();
                              for (std::int64_t s = 0; s < n; ++s) {
                                  for (std::int64_t ch = 0; ch < c; ++ch) {
                                      for (std::int64_t i = 0; i < hw; ++i) {
                                          dx[static_cast<std::size_t>((s * c + ch) * hw + i)] +=
                                              inv * self.grad[static_cast<std::size_t>(s * hw + i)];
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> mul_channel_broadcast(const Tensor<T>& x, const Tensor<T>& gate) {
    require_rank(x, 4, "mul_channel_broadcast");
    require_rank(gate, 4, "mul_channel_broadcast gate");
    if (gate.dim(0) != x.dim(0) || gate.dim(1) != 1 || gate.dim(2) != x.dim(2) ||
        gate.dim(3) != x.dim(3)) {
        throw DimensionError("mul_channel_broadcast: gate " + to_string(gate.shape()) +
                             " does not match " + to_string(x.shape()));
    }
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<T> out(x.data().size());
    for (std::int64_t s = 0; s < n; ++s) {
        const T* gs = gate.data().data() + s * hw;
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::int64_t base = (s * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                out[static_cast<std::size_t>(base + i)] = x.data()[static_cast<std::size_t>(base + i)] * gs[i];
            }
        }
    }
    return make_result<T>("mul_channel_broadcast", x.shape(), std::move(out), {&x, &gate},
                          [n, c, hw](Node<T>& self) {
                              Node<T>& xn = *self.inputs[0];
                              Node<T>& gn = *self.inputs[1];
                              for (std::int64_t s = 0; s < n; ++s) {
                                  for (std::int64_t ch = 0; ch < c; ++ch) {
                                      const std::int64_t base = (s * c + ch) * hw;
                                      for (std::int64_t i = 0; i < hw; ++i) {
                                          const auto idx = static_cast<std::size_t>(base + i);
                                          const auto gi = static_cast<std::size_t>(s * hw + i);
                                          if (xn.requires_grad) {
                                              xn.grad_buffer()[idx] += self.grad[idx] * gn.value[gi];
                                          }
                                          if (gn.requires_grad) {
                                              gn.grad_buffer()[gi] += self.grad[idx] * xn.value[idx];
                                          }
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> permute_channels(const Tensor<T>& x, const std::vector<std::int64_t>& perm) {
    require_rank(x, 4, "permute_channels");
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<std::int64_t> sorted(perm);
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::int64_t> identity(static_cast<std::size_t>(c));
    std::iota(identity.begin(), identity.end(), 0);
    if (sorted != identity) {
        throw ParameterError("permute_channels: not a permutation of " + std::to_string(c) +
                             " channels");
    }
    std::vector<T> out(x.data().size());
    for (std::int64_t s = 0; s < n; ++s) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            std::copy_n(x.data().data() + (s * c + perm[static_cast<std::size_t>(ch)]) * hw, hw,
                        out.data() + (s * c + ch) * hw);
        }
    }
    return make_result<T>("permute_channels", x.shape(), std::move(out), {&x},
                          [n, c, hw, perm](Node<T>& self) {
                              auto& dx = self.inputs[0]->grad_buffer();
                              for (std::int64_t s = 0; s < n; ++s) {
                                  for (std::int64_t ch = 0; ch < c; ++ch) {
                                      T* dst = dx.data() + (s * c + perm[static_cast<std::size_t>(ch)]) * hw;
                                      const T* src = self.grad.data() + (s * c + ch) * hw;
                                      for (std::int64_t i = 0; i < hw; ++i) {
                                          dst[i] += src[i];
                                      }
                                  }
                              }
                          });
}

// ------------------------------------------------------------------ BCE

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& target) {
    require_same_shape(logits, target, "bce_with_logits");
    const auto count = static_cast<std::size_t>(logits.size());
    double total = 0.0;
    auto local = std::make_shared<std::vector<T>>(count);
    const T inv = T(1) / static_cast<T>(count);
    for (std::size_t i = 0; i < count; ++i) {
        const double z = logits.data()[i];
        const double g = target.data()[i];
        total += std::max(z, 0.0) - z * g + std::log1p(std::exp(-std::abs(z)));
        const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        (*local)[i] = static_cast<T>((s - g)) * inv;
    }
    const Tensor<T> constant_target = target.detach();
    return make_result<T>("bce_with_logits", Shape{1}, {static_cast<T>(total / static_cast<double>(count))},
                          {&logits, &constant_target}, [local](Node<T>& self) {
                              auto& dz = self.inputs[0]->grad_buffer();
                              for (std::size_t i = 0; i < dz.size(); ++i) {
                                  dz[i] += self.grad[0] * (*local)[i];
                              }
                          });
}

template <typename T>
Tensor<T> bce(const Tensor<T>& probs, const Tensor<T>& target) {
    require_same_shape(probs, target, "bce");
    const auto count = static_cast<std::size_t>(probs.size());
    const double lo = probability_clamp, hi = 1.0 - probability_clamp;
    double total = 0.0;
    auto local = std::make_shared<std::vector<T>>(count);
    for (std::size_t i = 0; i < count; ++i) {
        const double raw = probs.data()[i];
        const double p = std::clamp(raw, lo, hi);
        const double g = target.data()[i];
        total -= g * std::log(p) + (1.0 - g) * std::log(1.0 - p);
        const bool clamped = raw < lo || raw > hi;
        (*local)[i] = clamped ? T(0)
                              : static_cast<T>((-g / p + (1.0 - g) / (1.0 - p)) /
                                               static_cast<double>(count));
    }
    const Tensor<T> constant_target = target.detach();
    return make_result<T>("bce", Shape{1}, {static_cast<T>(total / static_cast<double>(count))},
                          {&probs, &constant_target}, [local](Node<T>& self) {
                              auto& dp = self.inputs[0]->grad_buffer();
                              for (std::size_t i = 0; i < dp.size(); ++i) {
                                  dp[i] += self.grad[0] * (*local)[i];
                              }
                          });
}

#define DUALSEG_INSTANTIATE_OPS(T)                                                                 \
    template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                 Conv2dParams);                                                    \
    template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                     BatchNormStats<T>&, Mode, double, double);                    \
    template Tensor<T> dropout<T>(const Tensor<T>&, double, Mode, Rng&);                           \
    template Tensor<T> max_pool2d<T>(const Tensor<T>&);                                            \
    template Tensor<T> avg_pool2d<T>(const Tensor<T>&);                                            \
    template Tensor<T> upsample_nearest<T>(const Tensor<T>&);                                      \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> transpose<T>(const Tensor<T>&);                                             \
    template Tensor<T> softmax<T>(const Tensor<T>&, int);                                          \
    template Tensor<T> sigmoid<T>(const Tensor<T>&);                                               \
    template Tensor<T> relu<T>(const Tensor<T>&);                                                  \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> scale<T>(const Tensor<T>&, T);                                              \
    template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                         \
    template Tensor<T> sum<T>(const Tensor<T>&);                                                   \
    template Tensor<T> mean<T>(const Tensor<T>&);                                                  \
    template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                        \
    template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                     \
    template Tensor<T> channel_max<T>(const Tensor<T>&);                                           \
    template Tensor<T> channel_mean<T>(const Tensor<T>&);                                          \
    template Tensor<T> mul_channel_broadcast<T>(const Tensor<T>&, const Tensor<T>&);               \
    template Tensor<T> permute_channels<T>(const Tensor<T>&, const std::vector<std::int64_t>&);    \
    template Tensor<T> bce_with_logits<T>(const Tensor<T>&, const Tensor<T>&);                     \
    template Tensor<T> bce<T>(const Tensor<T>&, const Tensor<T>&);

DUALSEG_INSTANTIATE_OPS(float)
DUALSEG_INSTANTIATE_OPS(double)

}  // namespace dualseg::ops
