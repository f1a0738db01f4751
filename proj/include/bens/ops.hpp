#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "bens/autodiff.hpp"
#include "bens/rng.hpp"
#include "bens/tensor.hpp"

namespace bens {

enum class Padding { same, valid };
enum class Mode { train, eval };
enum class PoolKind { max, avg, global_avg };

/// Batch-norm moving statistics (not trainable).
template <class T>
struct RunningStats {
    Tensor<T> mean;
    Tensor<T> var;

    RunningStats() = default;
    explicit RunningStats(std::size_t channels) : mean(Shape{channels}, T(0)), var(Shape{channels}, T(1)) {}
};

namespace ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

template <class T>
void add_into(Tensor<T>& dst, std::span<const T> src) {
    auto d = dst.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
}

struct ConvGeometry {
    std::size_t batch, height, width, in_channels;
    std::size_t kernel_h, kernel_w, out_channels;
    std::size_t stride, out_h, out_w, pad_top, pad_left;

    std::size_t patch() const { return kernel_h * kernel_w * in_channels; }
    bool pointwise() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && pad_top == 0 && pad_left == 0; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& k, int stride, Padding padding) {
    require(x.size() == 4, "conv2d input must be [B,H,W,C], got " + shape_str(x));
    require(k.size() == 4, "conv2d kernel must be [kh,kw,Cin,Cout], got " + shape_str(k));
    require(k[2] == x[3], "conv2d kernel expects " + std::to_string(k[2]) + " input channels, input has " +
                              std::to_string(x[3]));
    require(stride == 1 || stride == 2, "conv2d stride must be 1 or 2, got " + std::to_string(stride));
    ConvGeometry g{x[0], x[1], x[2], x[3], k[0], k[1], k[3], static_cast<std::size_t>(stride), 0, 0, 0, 0};
    if (padding == Padding::same) {
        g.out_h = (g.height + g.stride - 1) / g.stride;
        g.out_w = (g.width + g.stride - 1) / g.stride;
        std::size_t need_h = (g.out_h - 1) * g.stride + g.kernel_h;
        std::size_t need_w = (g.out_w - 1) * g.stride + g.kernel_w;
        g.pad_top = need_h > g.height ? (need_h - g.height) / 2 : 0;
        g.pad_left = need_w > g.width ? (need_w - g.width) / 2 : 0;
    } else {
        require(g.height >= g.kernel_h && g.width >= g.kernel_w,
                "conv2d valid padding: kernel " + shape_str(k) + " larger than input " + shape_str(x));
        g.out_h = (g.height - g.kernel_h) / g.stride + 1;
        g.out_w = (g.width - g.kernel_w) / g.stride + 1;
    }
    return g;
}

template <class T>
void im2col(const T* x, const ConvGeometry& g, std::size_t b0, std::size_t nb, T* cols) {
    const std::size_t patch = g.patch();
    std::size_t row = 0;
    for (std::size_t b = b0; b < b0 + nb; ++b) {
        const T* img = x + b * g.height * g.width * g.in_channels;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            for (std::size_t ox = 0; ox < g.out_w; ++ox, ++row) {
                T* dst = cols + row * patch;
                for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
                    auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
                    for (std::size_t kx = 0; kx < g.kernel_w; ++kx, dst += g.in_channels) {
                        auto ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
                        if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
                            ix >= static_cast<std::ptrdiff_t>(g.width)) {
                            std::fill(dst, dst + g.in_channels, T(0));
                        } else {
                            const T* src = img + (iy * g.width + ix) * g.in_channels;
                            std::copy(src, src + g.in_channels, dst);
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, std::size_t b0, std::size_t nb, T* dx) {
    const std::size_t patch = g.patch();
    std::size_t row = 0;
    for (std::size_t b = b0; b < b0 + nb; ++b) {
        T* img = dx + b * g.height * g.width * g.in_channels;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            for (std::size_t ox = 0; ox < g.out_w; ++ox, ++row) {
                const T* src = cols + row * patch;
                for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
                    auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
                    for (std::size_t kx = 0; kx < g.kernel_w; ++kx, src += g.in_channels) {
                        auto ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
                        if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
                            ix >= static_cast<std::ptrdiff_t>(g.width))
                            continue;
                        T* dst = img + (iy * g.width + ix) * g.in_channels;
                        for (std::size_t c = 0; c < g.in_channels; ++c) dst[c] += src[c];
                    }
                }
            }
        }
    }
}

// Images per im2col chunk, bounding the scratch buffer to ~8M elements.
inline std::size_t conv_chunk(const ConvGeometry& g) {
    std::size_t per_image = g.out_h * g.out_w * g.patch();
    return std::max<std::size_t>(1, (std::size_t{8} << 20) / std::max<std::size_t>(per_image, 1));
}

}  // namespace detail

/// 2-D convolution, NHWC input and [kh,kw,Cin,Cout] kernel. Same padding follows the
/// TensorFlow convention (output ceil(H/stride), extra padding at the bottom/right).
template <class T>
Var<T> conv2d(Var<T> input, Var<T> kernel, std::optional<std::type_identity_t<Var<T>>> bias, int stride, Padding padding) {
    using namespace detail;
    const auto& X = input.value();
    const auto& K = kernel.value();
    const ConvGeometry g = conv_geometry(X.shape(), K.shape(), stride, padding);
    if (bias) require(bias->shape() == Shape{g.out_channels}, "conv2d bias must be [Cout], got " + shape_str(bias->shape()));

    Tensor<T> Y(Shape{g.batch, g.out_h, g.out_w, g.out_channels});
    const std::size_t rows_per_image = g.out_h * g.out_w;
    const std::size_t chunk = conv_chunk(g);
    ConstMatMap<T> kmat(K.data().data(), g.patch(), g.out_channels);
    std::vector<T> cols;
    for (std::size_t b0 = 0; b0 < g.batch; b0 += chunk) {
        std::size_t nb = std::min(chunk, g.batch - b0);
        std::size_t rows = nb * rows_per_image;
        const T* a = nullptr;
        if (g.pointwise()) {
            a = X.data().data() + b0 * g.height * g.width * g.in_channels;
        } else {
            cols.resize(rows * g.patch());
            im2col(X.data().data(), g, b0, nb, cols.data());
            a = cols.data();
        }
        MatMap<T> ymat(Y.data().data() + b0 * rows_per_image * g.out_channels, rows, g.out_channels);
        ymat.noalias() = ConstMatMap<T>(a, rows, g.patch()) * kmat;
    }
    if (bias) {
        const auto& bv = bias->value();
        auto y = Y.data();
        for (std::size_t i = 0; i < y.size(); i += g.out_channels)
            for (std::size_t c = 0; c < g.out_channels; ++c) y[i + c] += bv[c];
    }

    std::vector<Var<T>> inputs{input, kernel};
    if (bias) inputs.push_back(*bias);
    return input.tape->record(std::move(Y), inputs, [g](const BackwardArgs<T>& a) {
        const auto& Xv = *a.in_values[0];
        const auto& Kv = *a.in_values[1];
        const auto& dY = a.out_grad;
        Tensor<T>* dX = a.in_grads[0];
        Tensor<T>* dK = a.in_grads[1];
        Tensor<T>* dB = a.in_grads.size() > 2 ? a.in_grads[2] : nullptr;
        const std::size_t rows_per_image = g.out_h * g.out_w;
        const std::size_t chunk = conv_chunk(g);
        ConstMatMap<T> kmat(Kv.data().data(), g.patch(), g.out_channels);
        std::vector<T> cols, dcols;
        for (std::size_t b0 = 0; b0 < g.batch; b0 += chunk) {
            std::size_t nb = std::min(chunk, g.batch - b0);
            std::size_t rows = nb * rows_per_image;
            ConstMatMap<T> dy(dY.data().data() + b0 * rows_per_image * g.out_channels, rows, g.out_channels);
            if (dK) {
                const T* acols = nullptr;
                if (g.pointwise()) {
                    acols = Xv.data().data() + b0 * g.height * g.width * g.in_channels;
                } else {
                    cols.resize(rows * g.patch());
                    im2col(Xv.data().data(), g, b0, nb, cols.data());
                    acols = cols.data();
                }
                MatMap<T> dk(dK->data().data(), g.patch(), g.out_channels);
                dk.noalias() += ConstMatMap<T>(acols, rows, g.patch()).transpose() * dy;
            }
            if (dX) {
                if (g.pointwise()) {
                    MatMap<T> dx(dX->data().data() + b0 * g.height * g.width * g.in_channels, rows, g.in_channels);
                    dx.noalias() += dy * kmat.transpose();
                } else {
                    dcols.resize(rows * g.patch());
                    MatMap<T> dc(dcols.data(), rows, g.patch());
                    dc.noalias() = dy * kmat.transpose();
                    col2im_add(dcols.data(), g, b0, nb, dX->data().data());
                }
            }
        }
        if (dB) {
            auto d = dY.data();
            auto db = dB->data();
            for (std::size_t i = 0; i < d.size(); i += g.out_channels)
                for (std::size_t c = 0; c < g.out_channels; ++c) db[c] += d[i + c];
        }
    });
}

/// Batch normalisation over every axis but the last (channels).
///
/// Train mode normalises with the batch statistics and, when `update` is given, folds
/// them into the moving averages (running = momentum*running + (1-momentum)*batch, the
/// variance term unbiased). Eval mode uses `stats` only.
template <class T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, const RunningStats<T>& stats, std::type_identity_t<RunningStats<T>>* update,
                  Mode mode, double momentum = 0.9, double epsilon = 1e-5) {
    using detail::require;
    const auto& X = input.value();
    require(X.rank() >= 2, "batch_norm input must have rank >= 2, got " + shape_str(X.shape()));
    const std::size_t C = X.shape().back();
    const std::size_t N = X.numel() / C;
    require(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
            "batch_norm gamma/beta must be [" + std::to_string(C) + "]");
    require(stats.mean.numel() == C && stats.var.numel() == C, "batch_norm running stats have wrong size");

    const auto& G = gamma.value();
    const auto& Bt = beta.value();
    auto x = X.data();
    Tensor<T> xhat(X.shape());
    std::vector<T> invstd(C);

    if (mode == Mode::train) {
        if (N < 2)
            throw ShapeError("batch_norm in train mode needs at least 2 values per channel (variance undefined)");
        std::vector<double> mean(C, 0.0), var(C, 0.0);
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t c = 0; c < C; ++c) mean[c] += x[i * C + c];
        for (auto& m : mean) m /= static_cast<double>(N);
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t c = 0; c < C; ++c) {
                double d = x[i * C + c] - mean[c];
                var[c] += d * d;
            }
        for (std::size_t c = 0; c < C; ++c) {
            double v = var[c] / static_cast<double>(N);
            invstd[c] = static_cast<T>(1.0 / std::sqrt(v + epsilon));
            if (update) {
                update->mean[c] = static_cast<T>(momentum * update->mean[c] + (1.0 - momentum) * mean[c]);
                update->var[c] = static_cast<T>(momentum * update->var[c] +
                                                (1.0 - momentum) * var[c] / static_cast<double>(N - 1));
            }
        }
        auto xh = xhat.data();
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t c = 0; c < C; ++c)
                xh[i * C + c] = static_cast<T>((x[i * C + c] - mean[c]) * invstd[c]);
    } else {
        auto xh = xhat.data();
        std::vector<T> mean(C);
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = stats.mean[c];
            invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats.var[c]) + epsilon));
        }
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t c = 0; c < C; ++c) xh[i * C + c] = (x[i * C + c] - mean[c]) * invstd[c];
    }

    Tensor<T> Y(X.shape());
    {
        auto y = Y.data();
        auto xh = xhat.data();
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t c = 0; c < C; ++c) y[i * C + c] = G[c] * xh[i * C + c] + Bt[c];
    }

    const bool train = mode == Mode::train;
    return input.tape->record(
        std::move(Y), {input, gamma, beta},
        [xhat = std::move(xhat), invstd = std::move(invstd), C, N, train](const BackwardArgs<T>& a) {
            const auto& Gv = *a.in_values[1];
            auto dy = a.out_grad.data();
            auto xh = xhat.data();
            std::vector<double> sum_dy(C, 0.0), sum_dy_xh(C, 0.0);
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t c = 0; c < C; ++c) {
                    sum_dy[c] += dy[i * C + c];
                    sum_dy_xh[c] += static_cast<double>(dy[i * C + c]) * xh[i * C + c];
                }
            if (a.in_grads[1])
                for (std::size_t c = 0; c < C; ++c) (*a.in_grads[1])[c] += static_cast<T>(sum_dy_xh[c]);
            if (a.in_grads[2])
                for (std::size_t c = 0; c < C; ++c) (*a.in_grads[2])[c] += static_cast<T>(sum_dy[c]);
            if (a.in_grads[0]) {
                auto dx = a.in_grads[0]->data();
                if (train) {
                    const double inv_n = 1.0 / static_cast<double>(N);
                    for (std::size_t i = 0; i < N; ++i)
                        for (std::size_t c = 0; c < C; ++c) {
                            double v = static_cast<double>(dy[i * C + c]) - inv_n * sum_dy[c] -
                                       xh[i * C + c] * inv_n * sum_dy_xh[c];
                            dx[i * C + c] += static_cast<T>(Gv[c] * invstd[c] * v);
                        }
                } else {
                    for (std::size_t i = 0; i < N; ++i)
                        for (std::size_t c = 0; c < C; ++c) dx[i * C + c] += dy[i * C + c] * Gv[c] * invstd[c];
                }
            }
        });
}

/// Max or average pooling with valid padding, or global average pooling
/// ([B,H,W,C] -> [B,1,1,C]). Max-pool ties route the gradient to the first maximum in
/// scan order.
template <class T>
Var<T> pool(Var<T> input, PoolKind kind, int window = 2, int stride = 2) {
    using detail::require;
    const auto& X = input.value();
    require(X.rank() == 4, "pool input must be [B,H,W,C], got " + shape_str(X.shape()));
    const std::size_t B = X.dim(0), H = X.dim(1), W = X.dim(2), C = X.dim(3);
    if (kind == PoolKind::global_avg) {
        Tensor<T> Y(Shape{B, 1, 1, C});
        auto x = X.data();
        for (std::size_t b = 0; b < B; ++b) {
            std::vector<double> acc(C, 0.0);
            for (std::size_t p = 0; p < H * W; ++p)
                for (std::size_t c = 0; c < C; ++c) acc[c] += x[(b * H * W + p) * C + c];
            for (std::size_t c = 0; c < C; ++c) Y[b * C + c] = static_cast<T>(acc[c] / static_cast<double>(H * W));
        }
        return input.tape->record(std::move(Y), {input}, [B, H, W, C](const BackwardArgs<T>& a) {
            auto dy = a.out_grad.data();
            auto dx = a.in_grads[0]->data();
            const T scale = T(1) / static_cast<T>(H * W);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t p = 0; p < H * W; ++p)
                    for (std::size_t c = 0; c < C; ++c) dx[(b * H * W + p) * C + c] += dy[b * C + c] * scale;
        });
    }
    require(window >= 1 && stride >= 1, "pool window and stride must be positive");
    const auto win = static_cast<std::size_t>(window);
    const auto st = static_cast<std::size_t>(stride);
    require(win <= H && win <= W, "pool window " + std::to_string(window) + " larger than input " + shape_str(X.shape()));
    const std::size_t Ho = (H - win) / st + 1, Wo = (W - win) / st + 1;
    Tensor<T> Y(Shape{B, Ho, Wo, C});
    auto x = X.data();
    auto y = Y.data();
    if (kind == PoolKind::max) {
        std::vector<std::size_t> argmax(Y.numel());
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox)
                    for (std::size_t c = 0; c < C; ++c) {
                        std::size_t best = ((b * H + oy * st) * W + ox * st) * C + c;
                        for (std::size_t ky = 0; ky < win; ++ky)
                            for (std::size_t kx = 0; kx < win; ++kx) {
                                std::size_t idx = ((b * H + oy * st + ky) * W + ox * st + kx) * C + c;
                                if (x[idx] > x[best]) best = idx;
                            }
                        std::size_t o = ((b * Ho + oy) * Wo + ox) * C + c;
                        y[o] = x[best];
                        argmax[o] = best;
                    }
        return input.tape->record(std::move(Y), {input}, [argmax = std::move(argmax)](const BackwardArgs<T>& a) {
            auto dy = a.out_grad.data();
            auto dx = a.in_grads[0]->data();
            for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax[o]] += dy[o];
        });
    }
    const T scale = T(1) / static_cast<T>(win * win);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox)
                for (std::size_t c = 0; c < C; ++c) {
                    T acc = 0;
                    for (std::size_t ky = 0; ky < win; ++ky)
                        for (std::size_t kx = 0; kx < win; ++kx) acc += x[((b * H + oy * st + ky) * W + ox * st + kx) * C + c];
                    y[((b * Ho + oy) * Wo + ox) * C + c] = acc * scale;
                }
    return input.tape->record(std::move(Y), {input}, [=](const BackwardArgs<T>& a) {
        auto dy = a.out_grad.data();
        auto dx = a.in_grads[0]->data();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox)
                    for (std::size_t c = 0; c < C; ++c) {
                        T g = dy[((b * Ho + oy) * Wo + ox) * C + c] * scale;
                        for (std::size_t ky = 0; ky < win; ++ky)
                            for (std::size_t kx = 0; kx < win; ++kx) dx[((b * H + oy * st + ky) * W + ox * st + kx) * C + c] += g;
                    }
    });
}

template <class T>
Var<T> max_pool(Var<T> x, int window, int stride) {
    return pool(x, PoolKind::max, window, stride);
}
template <class T>
Var<T> avg_pool(Var<T> x, int window, int stride) {
    return pool(x, PoolKind::avg, window, stride);
}
template <class T>
Var<T> global_avg_pool(Var<T> x) {
    return pool(x, PoolKind::global_avg);
}

/// Affine map [B,F] x [F,O] (+ [O]).
template <class T>
Var<T> dense(Var<T> input, Var<T> weights, std::optional<std::type_identity_t<Var<T>>> bias = std::nullopt) {
    using namespace detail;
    const auto& X = input.value();
    const auto& Wt = weights.value();
    require(X.rank() == 2, "dense input must be [B,F], got " + shape_str(X.shape()));
    require(Wt.rank() == 2 && Wt.dim(0) == X.dim(1),
            "dense weights " + shape_str(Wt.shape()) + " do not match input " + shape_str(X.shape()));
    const std::size_t B = X.dim(0), F = X.dim(1), O = Wt.dim(1);
    if (bias) require(bias->shape() == Shape{O}, "dense bias must be [" + std::to_string(O) + "]");
    Tensor<T> Y(Shape{B, O});
    MatMap<T>(Y.data().data(), B, O).noalias() =
        ConstMatMap<T>(X.data().data(), B, F) * ConstMatMap<T>(Wt.data().data(), F, O);
    if (bias) {
        const auto& bv = bias->value();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < O; ++o) Y[b * O + o] += bv[o];
    }
    std::vector<Var<T>> inputs{input, weights};
    if (bias) inputs.push_back(*bias);
    return input.tape->record(std::move(Y), inputs, [B, F, O](const BackwardArgs<T>& a) {
        ConstMatMap<T> dy(a.out_grad.data().data(), B, O);
        if (a.in_grads[0])
            MatMap<T>(a.in_grads[0]->data().data(), B, F).noalias() +=
                dy * ConstMatMap<T>(a.in_values[1]->data().data(), F, O).transpose();
        if (a.in_grads[1])
            MatMap<T>(a.in_grads[1]->data().data(), F, O).noalias() +=
                ConstMatMap<T>(a.in_values[0]->data().data(), B, F).transpose() * dy;
        if (a.in_grads.size() > 2 && a.in_grads[2]) {
            auto db = a.in_grads[2]->data();
            auto d = a.out_grad.data();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t o = 0; o < O; ++o) db[o] += d[b * O + o];
        }
    });
}

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    return dense(a, b, std::nullopt);
}

/// relu'(0) = 0.
template <class T>
Var<T> relu(Var<T> input) {
    const auto& X = input.value();
    Tensor<T> Y(X.shape());
    auto x = X.data();
    auto y = Y.data();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return input.tape->record(std::move(Y), {input}, [](const BackwardArgs<T>& a) {
        auto x = a.in_values[0]->data();
        auto dy = a.out_grad.data();
        auto dx = a.in_grads[0]->data();
        for (std::size_t i = 0; i < x.size(); ++i)
            if (x[i] > T(0)) dx[i] += dy[i];
    });
}

/// Softmax over the last axis.
template <class T>
Var<T> softmax(Var<T> input) {
    const auto& X = input.value();
    const std::size_t K = X.shape().back();
    const std::size_t R = X.numel() / K;
    Tensor<T> Y(X.shape());
    auto x = X.data();
    auto y = Y.data();
    for (std::size_t r = 0; r < R; ++r) {
        T mx = *std::max_element(x.begin() + r * K, x.begin() + (r + 1) * K);
        double sum = 0;
        for (std::size_t k = 0; k < K; ++k) {
            y[r * K + k] = std::exp(x[r * K + k] - mx);
            sum += y[r * K + k];
        }
        for (std::size_t k = 0; k < K; ++k) y[r * K + k] = static_cast<T>(y[r * K + k] / sum);
    }
    return input.tape->record(std::move(Y), {input}, [K, R](const BackwardArgs<T>& a) {
        auto y = a.out_value.data();
        auto dy = a.out_grad.data();
        auto dx = a.in_grads[0]->data();
        for (std::size_t r = 0; r < R; ++r) {
            double dot = 0;
            for (std::size_t k = 0; k < K; ++k) dot += static_cast<double>(dy[r * K + k]) * y[r * K + k];
            for (std::size_t k = 0; k < K; ++k)
                dx[r * K + k] += static_cast<T>(y[r * K + k] * (dy[r * K + k] - dot));
        }
    });
}

/// Unit-norm rows over the last axis.
template <class T>
Var<T> l2_normalize(Var<T> input) {
    const auto& X = input.value();
    const std::size_t F = X.shape().back();
    const std::size_t R = X.numel() / F;
    Tensor<T> Y(X.shape());
    std::vector<T> norms(R);
    auto x = X.data();
    for (std::size_t r = 0; r < R; ++r) {
        double ss = 0;
        for (std::size_t f = 0; f < F; ++f) ss += static_cast<double>(x[r * F + f]) * x[r * F + f];
        norms[r] = static_cast<T>(std::max(std::sqrt(ss), 1e-12));
        for (std::size_t f = 0; f < F; ++f) Y[r * F + f] = x[r * F + f] / norms[r];
    }
    return input.tape->record(std::move(Y), {input}, [F, R, norms = std::move(norms)](const BackwardArgs<T>& a) {
        auto y = a.out_value.data();
        auto dy = a.out_grad.data();
        auto dx = a.in_grads[0]->data();
        for (std::size_t r = 0; r < R; ++r) {
            double dot = 0;
            for (std::size_t f = 0; f < F; ++f) dot += static_cast<double>(dy[r * F + f]) * y[r * F + f];
            for (std::size_t f = 0; f < F; ++f)
                dx[r * F + f] += static_cast<T>((dy[r * F + f] - y[r * F + f] * dot) / norms[r]);
        }
    });
}

/// Inverted dropout: train mode zeroes with probability `rate` and rescales survivors by
/// 1/(1-rate); eval mode and rate 0 are the identity.
template <class T>
Var<T> dropout(Var<T> input, double rate, Mode mode, RngStream& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ShapeError("dropout rate must lie in [0,1), got " + std::to_string(rate));
    if (mode == Mode::eval || rate == 0.0) return input;
    const auto& X = input.value();
    Tensor<T> mask(X.shape());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    Tensor<T> Y(X.shape());
    for (std::size_t i = 0; i < X.numel(); ++i) {
        mask[i] = rng.uniform() < rate ? T(0) : keep_scale;
        Y[i] = X[i] * mask[i];
    }
    return input.tape->record(std::move(Y), {input}, [mask = std::move(mask)](const BackwardArgs<T>& a) {
        auto dy = a.out_grad.data();
        auto dx = a.in_grads[0]->data();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * mask[i];
    });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require(a.shape() == b.shape(), "add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    Tensor<T> Y(a.shape());
    auto x0 = a.value().data();
    auto x1 = b.value().data();
    for (std::size_t i = 0; i < x0.size(); ++i) Y[i] = x0[i] + x1[i];
    return a.tape->record(std::move(Y), {a, b}, [](const BackwardArgs<T>& args) {
        for (int k = 0; k < 2; ++k)
            if (args.in_grads[k]) detail::add_into(*args.in_grads[k], args.out_grad.data());
    });
}

/// Elementwise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require(a.shape() == b.shape(), "mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    Tensor<T> Y(a.shape());
    auto x0 = a.value().data();
    auto x1 = b.value().data();
    for (std::size_t i = 0; i < x0.size(); ++i) Y[i] = x0[i] * x1[i];
    return a.tape->record(std::move(Y), {a, b}, [](const BackwardArgs<T>& args) {
        auto dy = args.out_grad.data();
        for (int k = 0; k < 2; ++k) {
            if (!args.in_grads[k]) continue;
            auto other = args.in_values[1 - k]->data();
            auto dx = args.in_grads[k]->data();
            for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * other[i];
        }
    });
}

/// scale * x + shift, elementwise.
template <class T>
Var<T> affine(Var<T> input, T scale, T shift = T(0)) {
    Tensor<T> Y(input.shape());
    auto x = input.value().data();
    for (std::size_t i = 0; i < x.size(); ++i) Y[i] = scale * x[i] + shift;
    return input.tape->record(std::move(Y), {input}, [scale](const BackwardArgs<T>& a) {
        auto dy = a.out_grad.data();
        auto dx = a.in_grads[0]->data();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += scale * dy[i];
    });
}

template <class T>
Var<T> scale(Var<T> input, T factor) {
    return affine(input, factor, T(0));
}

/// Concatenation along the last (channel) axis.
template <class T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
    const auto& A = a.value();
    const auto& Bv = b.value();
    Shape sa = A.shape(), sb = Bv.shape();
    detail::require(sa.size() == sb.size() && std::equal(sa.begin(), sa.end() - 1, sb.begin()),
                    "concat: shapes " + shape_str(sa) + " and " + shape_str(sb) + " differ outside the last axis");
    const std::size_t ca = sa.back(), cb = sb.back(), rows = A.numel() / ca;
    Shape so = sa;
    so.back() = ca + cb;
    Tensor<T> Y(so);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(A.data().data() + r * ca, ca, Y.data().data() + r * (ca + cb));
        std::copy_n(Bv.data().data() + r * cb, cb, Y.data().data() + r * (ca + cb) + ca);
    }
    return a.tape->record(std::move(Y), {a, b}, [ca, cb, rows](const BackwardArgs<T>& args) {
        auto dy = args.out_grad.data();
        if (args.in_grads[0]) {
            auto d = args.in_grads[0]->data();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < ca; ++c) d[r * ca + c] += dy[r * (ca + cb) + c];
        }
        if (args.in_grads[1]) {
            auto d = args.in_grads[1]->data();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cb; ++c) d[r * cb + c] += dy[r * (ca + cb) + ca + c];
        }
    });
}

template <class T>
Var<T> reshape(Var<T> input, Shape shape) {
    detail::require(shape_numel(shape) == input.value().numel(),
                    "reshape: " + shape_str(input.shape()) + " -> " + shape_str(shape) + " changes element count");
    return input.tape->record(input.value().reshaped(std::move(shape)), {input}, [](const BackwardArgs<T>& a) {
        detail::add_into(*a.in_grads[0], a.out_grad.data());
    });
}

/// [B, ...] -> [B, prod(...)].
template <class T>
Var<T> flatten(Var<T> input) {
    const auto& s = input.shape();
    return reshape(input, Shape{s[0], input.value().numel() / s[0]});
}

template <class T>
Var<T> transpose(Var<T> input) {
    const auto& X = input.value();
    detail::require(X.rank() == 2, "transpose needs a matrix, got " + shape_str(X.shape()));
    const std::size_t R = X.dim(0), C = X.dim(1);
    Tensor<T> Y(Shape{C, R});
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) Y[c * R + r] = X[r * C + c];
    return input.tape->record(std::move(Y), {input}, [R, C](const BackwardArgs<T>& a) {
        auto dy = a.out_grad.data();
        auto dx = a.in_grads[0]->data();
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) dx[r * C + c] += dy[c * R + r];
    });
}

/// Sum of all elements -> [1].
template <class T>
Var<T> sum(Var<T> input) {
    double acc = 0;
    for (T v : input.value().data()) acc += v;
    return input.tape->record(Tensor<T>::scalar(static_cast<T>(acc)), {input}, [](const BackwardArgs<T>& a) {
        const T g = a.out_grad[0];
        for (auto& d : a.in_grads[0]->data()) d += g;
    });
}

template <class T>
Var<T> mean(Var<T> input) {
    return scale(sum(input), T(1) / static_cast<T>(input.value().numel()));
}

/// sum over rows of x[:, column] for a [B,K] input -> [1]. Seeds one Jacobian row per
/// sample when rows are independent.
template <class T>
Var<T> column_sum(Var<T> input, std::size_t column) {
    const auto& X = input.value();
    detail::require(X.rank() == 2 && column < X.dim(1), "column_sum: column out of range for " + shape_str(X.shape()));
    const std::size_t B = X.dim(0), K = X.dim(1);
    double acc = 0;
    for (std::size_t b = 0; b < B; ++b) acc += X[b * K + column];
    return input.tape->record(Tensor<T>::scalar(static_cast<T>(acc)), {input}, [B, K, column](const BackwardArgs<T>& a) {
        auto dx = a.in_grads[0]->data();
        for (std::size_t b = 0; b < B; ++b) dx[b * K + column] += a.out_grad[0];
    });
}

/// Mean over the batch of -sum_k t_k log softmax(z)_k, fused for stability.
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, const Tensor<T>& targets) {
    const auto& Z = logits.value();
    detail::require(Z.rank() == 2 && targets.shape() == Z.shape(),
                    "softmax_cross_entropy: logits " + shape_str(Z.shape()) + " vs targets " + shape_str(targets.shape()));
    const std::size_t B = Z.dim(0), K = Z.dim(1);
    Tensor<T> probs(Z.shape());
    double loss = 0;
    for (std::size_t b = 0; b < B; ++b) {
        const T* z = Z.data().data() + b * K;
        T mx = *std::max_element(z, z + K);
        double se = 0;
        for (std::size_t k = 0; k < K; ++k) se += std::exp(static_cast<double>(z[k] - mx));
        double lse = std::log(se) + mx;
        for (std::size_t k = 0; k < K; ++k) {
            probs[b * K + k] = static_cast<T>(std::exp(z[k] - lse));
            loss -= targets[b * K + k] * (z[k] - lse);
        }
    }
    loss /= static_cast<double>(B);
    return logits.tape->record(Tensor<T>::scalar(static_cast<T>(loss)), {logits},
                               [probs = std::move(probs), targets, B](const BackwardArgs<T>& a) {
                                   auto dz = a.in_grads[0]->data();
                                   const T g = a.out_grad[0] / static_cast<T>(B);
                                   for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += g * (probs[i] - targets[i]);
                               });
}

/// Mean over the batch of sum_k s_k t_k.
template <class T>
Var<T> target_dot_mean(Var<T> scores, const Tensor<T>& targets) {
    const auto& S = scores.value();
    detail::require(S.shape() == targets.shape(),
                    "target_dot_mean: scores " + shape_str(S.shape()) + " vs targets " + shape_str(targets.shape()));
    const std::size_t B = S.dim(0);
    double acc = 0;
    for (std::size_t i = 0; i < S.numel(); ++i) acc += static_cast<double>(S[i]) * targets[i];
    return scores.tape->record(Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(B))), {scores},
                               [targets, B](const BackwardArgs<T>& a) {
                                   auto ds = a.in_grads[0]->data();
                                   const T g = a.out_grad[0] / static_cast<T>(B);
                                   for (std::size_t i = 0; i < ds.size(); ++i) ds[i] += g * targets[i];
                               });
}

}  // namespace ops
}  // namespace bens
