#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "funet/errors.hpp"
#include "funet/tensor.hpp"

// Differentiable operations over N x C x H x W activations. Every op takes an
// optional tape as its last argument; with no tape the result is a constant.

namespace funet {

enum class Padding { same, valid };

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

// Left-to-right sum. Eigen's vectorized reductions peel according to the
// buffer's alignment, which would make bias gradients allocation-dependent.
inline double sequential_sum(const double* p, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += p[i];
    return s;
}

inline void require_rank(const std::string& op, const Tensor& t, std::size_t rank,
                         const std::string& what) {
    if (t.rank() != rank) throw ShapeError(op, what + " rank", rank, t.rank());
}

inline void require_same_shape(const std::string& op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(op, "operand shape",
                         shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
}

struct ConvGeometry {
    std::size_t channels, height, width;
    std::size_t kernel_h, kernel_w, pad_h, pad_w;
    std::size_t out_h, out_w;

    std::size_t rows() const { return channels * kernel_h * kernel_w; }
    std::size_t cols() const { return out_h * out_w; }
    bool pointwise() const { return kernel_h == 1 && kernel_w == 1; }
};

// Unrolls every receptive field into a column: col is rows() x cols().
inline void im2col(const double* in, const ConvGeometry& g, double* col) {
    const auto cols = g.cols();
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
            for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
                double* row = col + ((c * g.kernel_h + kh) * g.kernel_w + kw) * cols;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh + kh) -
                                    static_cast<std::ptrdiff_t>(g.pad_h);
                    double* dst = row + oh * g.out_w;
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) {
                        std::fill(dst, dst + g.out_w, 0.0);
                        continue;
                    }
                    const double* src = in + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const auto iw = static_cast<std::ptrdiff_t>(ow + kw) -
                                        static_cast<std::ptrdiff_t>(g.pad_w);
                        dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width))
                                      ? 0.0
                                      : src[iw];
                    }
                }
            }
        }
    }
}

inline void col2im_add(const double* col, const ConvGeometry& g, double* in) {
    const auto cols = g.cols();
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
            for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
                const double* row = col + ((c * g.kernel_h + kh) * g.kernel_w + kw) * cols;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh + kh) -
                                    static_cast<std::ptrdiff_t>(g.pad_h);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    const double* src = row + oh * g.out_w;
                    double* dst = in + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const auto iw = static_cast<std::ptrdiff_t>(ow + kw) -
                                        static_cast<std::ptrdiff_t>(g.pad_w);
                        if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.width)) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

inline double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace detail

/// 2-d cross-correlation (no kernel flip). `bias` may be an undefined tensor.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     Padding padding = Padding::same, Tape* tape = nullptr) {
    const std::string op = "conv2d";
    detail::require_rank(op, input, 4, "input");
    detail::require_rank(op, kernel, 4, "kernel");
    const auto n_batch = input.dim(0);
    const auto out_ch = kernel.dim(0);
    detail::ConvGeometry g{};
    g.channels = input.dim(1);
    g.height = input.dim(2);
    g.width = input.dim(3);
    g.kernel_h = kernel.dim(2);
    g.kernel_w = kernel.dim(3);
    if (kernel.dim(1) != g.channels) throw ShapeError(op, "input channels", kernel.dim(1), g.channels);
    if (g.kernel_h % 2 == 0) throw ShapeError(op, "kernel height", "must be odd, got " + std::to_string(g.kernel_h));
    if (g.kernel_w % 2 == 0) throw ShapeError(op, "kernel width", "must be odd, got " + std::to_string(g.kernel_w));
    if (bias.defined()) {
        detail::require_rank(op, bias, 1, "bias");
        if (bias.dim(0) != out_ch) throw ShapeError(op, "bias length", out_ch, bias.dim(0));
    }
    if (padding == Padding::same) {
        g.pad_h = g.kernel_h / 2;
        g.pad_w = g.kernel_w / 2;
        g.out_h = g.height;
        g.out_w = g.width;
    } else {
        if (g.height < g.kernel_h) throw ShapeError(op, "height", "smaller than kernel for valid padding");
        if (g.width < g.kernel_w) throw ShapeError(op, "width", "smaller than kernel for valid padding");
        g.pad_h = g.pad_w = 0;
        g.out_h = g.height - g.kernel_h + 1;
        g.out_w = g.width - g.kernel_w + 1;
    }

    const auto rows = g.rows();
    const auto cols = g.cols();
    const auto in_stride = g.channels * g.height * g.width;
    const bool direct = g.pointwise() && g.pad_h == 0 && g.pad_w == 0;

    std::vector<double> out(n_batch * out_ch * cols);
    std::vector<double> col(direct ? 0 : rows * cols);
    const detail::ConstMatMap k(kernel.values().data(), out_ch, rows);
    for (std::size_t n = 0; n < n_batch; ++n) {
        const double* src = input.values().data() + n * in_stride;
        if (!direct) detail::im2col(src, g, col.data());
        const double* colp = direct ? src : col.data();
        detail::MatMap y(out.data() + n * out_ch * cols, out_ch, cols);
        y.noalias() = k * detail::ConstMatMap(colp, rows, cols);
        if (bias.defined()) {
            for (std::size_t o = 0; o < out_ch; ++o) y.row(o).array() += bias.values()[o];
        }
    }

    return emit(tape, op, {input, kernel, bias}, {n_batch, out_ch, g.out_h, g.out_w}, std::move(out),
                [input, kernel, g, n_batch, out_ch, direct](const TapeRecord& rec) {
                    const auto rows = g.rows();
                    const auto cols = g.cols();
                    const auto in_stride = g.channels * g.height * g.width;
                    const auto grad = rec.output_grad();
                    const auto g_in = rec.input_grad(0);
                    const auto g_k = rec.input_grad(1);
                    const auto g_b = rec.input_grad(2);
                    const detail::ConstMatMap k(kernel.values().data(), out_ch, rows);
                    std::vector<double> col(direct ? 0 : rows * cols);
                    for (std::size_t n = 0; n < n_batch; ++n) {
                        const detail::ConstMatMap gy(grad.data() + n * out_ch * cols, out_ch, cols);
                        if (!g_b.empty()) {
                            for (std::size_t o = 0; o < out_ch; ++o) g_b[o] += detail::sequential_sum(gy.data() + o * cols, cols);
                        }
                        if (!g_k.empty()) {
                            const double* src = input.values().data() + n * in_stride;
                            if (!direct) detail::im2col(src, g, col.data());
                            const double* colp = direct ? src : col.data();
                            detail::MatMap(g_k.data(), out_ch, rows).noalias() +=
                                gy * detail::ConstMatMap(colp, rows, cols).transpose();
                        }
                        if (!g_in.empty()) {
                            double* dst = g_in.data() + n * in_stride;
                            if (direct) {
                                detail::MatMap(dst, rows, cols).noalias() += k.transpose() * gy;
                            } else {
                                detail::MatMap dcol(col.data(), rows, cols);
                                dcol.noalias() = k.transpose() * gy;
                                detail::col2im_add(col.data(), g, dst);
                            }
                        }
                    }
                });
}

/// 2x2 max pooling with stride 2. The gradient goes to the first
/// row-major maximum of each window.
inline Tensor max_pool2(const Tensor& input, Tape* tape = nullptr) {
    const std::string op = "max_pool2";
    detail::require_rank(op, input, 4, "input");
    const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h % 2) throw ShapeError(op, "height", "must be even, got " + std::to_string(h));
    if (w % 2) throw ShapeError(op, "width", "must be even, got " + std::to_string(w));
    const auto oh = h / 2, ow = w / 2;
    const auto x = input.values();
    std::vector<double> out(n * c * oh * ow);
    std::vector<std::size_t> argmax(out.size());
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const std::size_t base = plane * h * w;
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
                std::size_t best = base + 2 * i * w + 2 * j;
                for (const std::size_t off : {std::size_t{1}, w, w + 1}) {
                    const std::size_t idx = base + 2 * i * w + 2 * j + off;
                    if (x[idx] > x[best]) best = idx;
                }
                const std::size_t o = (plane * oh + i) * ow + j;
                out[o] = x[best];
                argmax[o] = best;
            }
        }
    }
    return emit(tape, op, {input}, {n, c, oh, ow}, std::move(out),
                [argmax = std::move(argmax)](const TapeRecord& rec) {
                    const auto g = rec.output_grad();
                    const auto gi = rec.input_grad(0);
                    for (std::size_t o = 0; o < g.size(); ++o) gi[argmax[o]] += g[o];
                });
}

/// Stride-2 transposed convolution with a Cin x Cout x 2 x 2 kernel. Output
/// footprints of neighbouring input pixels are disjoint 2x2 tiles.
inline Tensor up_conv2(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                       Tape* tape = nullptr) {
    const std::string op = "up_conv2";
    detail::require_rank(op, input, 4, "input");
    detail::require_rank(op, kernel, 4, "kernel");
    const auto n_batch = input.dim(0), in_ch = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (kernel.dim(0) != in_ch) throw ShapeError(op, "input channels", kernel.dim(0), in_ch);
    if (kernel.dim(2) != 2) throw ShapeError(op, "kernel height", 2, kernel.dim(2));
    if (kernel.dim(3) != 2) throw ShapeError(op, "kernel width", 2, kernel.dim(3));
    const auto out_ch = kernel.dim(1);
    if (bias.defined()) {
        detail::require_rank(op, bias, 1, "bias");
        if (bias.dim(0) != out_ch) throw ShapeError(op, "bias length", out_ch, bias.dim(0));
    }
    const auto hw = h * w;
    const auto taps = out_ch * 4;  // rows of the per-pixel tile matrix, ordered (o, a, b)
    const detail::ConstMatMap k(kernel.values().data(), in_ch, taps);

    std::vector<double> out(n_batch * out_ch * 4 * hw);
    detail::RowMat tiles(taps, hw);
    for (std::size_t n = 0; n < n_batch; ++n) {
        tiles.noalias() = k.transpose() * detail::ConstMatMap(input.values().data() + n * in_ch * hw, in_ch, hw);
        double* dst = out.data() + n * out_ch * 4 * hw;
        for (std::size_t o = 0; o < out_ch; ++o) {
            const double b = bias.defined() ? bias.values()[o] : 0.0;
            for (std::size_t a = 0; a < 2; ++a) {
                for (std::size_t bb = 0; bb < 2; ++bb) {
                    const auto row = tiles.row(static_cast<Eigen::Index>((o * 2 + a) * 2 + bb));
                    for (std::size_t i = 0; i < h; ++i) {
                        for (std::size_t j = 0; j < w; ++j) {
                            dst[(o * 2 * h + 2 * i + a) * 2 * w + 2 * j + bb] =
                                row(static_cast<Eigen::Index>(i * w + j)) + b;
                        }
                    }
                }
            }
        }
    }

    return emit(tape, op, {input, kernel, bias}, {n_batch, out_ch, 2 * h, 2 * w}, std::move(out),
                [input, kernel, n_batch, in_ch, out_ch, h, w](const TapeRecord& rec) {
                    const auto hw = h * w;
                    const auto taps = out_ch * 4;
                    const auto grad = rec.output_grad();
                    const auto g_in = rec.input_grad(0);
                    const auto g_k = rec.input_grad(1);
                    const auto g_b = rec.input_grad(2);
                    const detail::ConstMatMap k(kernel.values().data(), in_ch, taps);
                    detail::RowMat gtiles(taps, hw);
                    for (std::size_t n = 0; n < n_batch; ++n) {
                        const double* src = grad.data() + n * out_ch * 4 * hw;
                        for (std::size_t o = 0; o < out_ch; ++o) {
                            for (std::size_t a = 0; a < 2; ++a) {
                                for (std::size_t bb = 0; bb < 2; ++bb) {
                                    auto row = gtiles.row(static_cast<Eigen::Index>((o * 2 + a) * 2 + bb));
                                    for (std::size_t i = 0; i < h; ++i) {
                                        for (std::size_t j = 0; j < w; ++j) {
                                            row(static_cast<Eigen::Index>(i * w + j)) =
                                                src[(o * 2 * h + 2 * i + a) * 2 * w + 2 * j + bb];
                                        }
                                    }
                                }
                            }
                        }
                        if (!g_b.empty()) {
                            for (std::size_t o = 0; o < out_ch; ++o) {
                                g_b[o] += detail::sequential_sum(&gtiles(static_cast<Eigen::Index>(o * 4), 0), 4 * hw);
                            }
                        }
                        if (!g_k.empty()) {
                            const detail::ConstMatMap x(input.values().data() + n * in_ch * hw, in_ch, hw);
                            detail::MatMap(g_k.data(), in_ch, taps).noalias() += x * gtiles.transpose();
                        }
                        if (!g_in.empty()) {
                            detail::MatMap(g_in.data() + n * in_ch * hw, in_ch, hw).noalias() += k * gtiles;
                        }
                    }
                });
}

/// The decoder's channel-halving up-convolution: kernel must be C x C/2 x 2 x 2.
inline Tensor up_conv2_halving(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                               Tape* tape = nullptr) {
    detail::require_rank("up_conv2", input, 4, "input");
    const auto c = input.dim(1);
    if (c % 2) throw ShapeError("up_conv2", "channels", "must be even, got " + std::to_string(c));
    detail::require_rank("up_conv2", kernel, 4, "kernel");
    if (kernel.dim(1) != c / 2) throw ShapeError("up_conv2", "output channels", c / 2, kernel.dim(1));
    return up_conv2(input, kernel, bias, tape);
}

/// Running statistics of one batch-norm layer. Default-constructed state is
/// uninitialized and cannot be used in eval mode.
struct BatchNormState {
    static constexpr double kEpsilon = 1e-5;
    static constexpr double kMomentum = 0.9;

    std::vector<double> running_mean;
    std::vector<double> running_var;

    static BatchNormState fresh(std::size_t channels) {
        return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
    }

    bool ready(std::size_t channels) const {
        return running_mean.size() == channels && running_var.size() == channels;
    }
};

namespace detail {

// y = gamma * (x - mean) * inv_std + beta. With `batch_stats` the backward
// pass also differentiates through the per-channel mean and variance.
inline Tensor batch_norm_apply(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                               const std::vector<double>& mean, std::vector<double> inv_std,
                               bool batch_stats, Tape* tape) {
    const auto n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
    const std::size_t count = n * hw;
    const auto x = input.values();
    const auto gm = gamma.values();
    const auto bt = beta.values();
    std::vector<double> xhat(x.size());
    std::vector<double> out(x.size());
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t base = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                xhat[base + i] = (x[base + i] - mean[ch]) * inv_std[ch];
                out[base + i] = gm[ch] * xhat[base + i] + bt[ch];
            }
        }
    }
    return emit(tape, "batch_norm", {input, gamma, beta}, input.shape(), std::move(out),
                [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw, count,
                 batch_stats](const TapeRecord& rec) {
                    const auto g = rec.output_grad();
                    const auto g_in = rec.input_grad(0);
                    const auto g_gamma = rec.input_grad(1);
                    const auto g_beta = rec.input_grad(2);
                    const auto gm = gamma.values();
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        double sum_g = 0.0, sum_gx = 0.0;
                        for (std::size_t b = 0; b < n; ++b) {
                            const std::size_t base = (b * c + ch) * hw;
                            for (std::size_t i = 0; i < hw; ++i) {
                                sum_g += g[base + i];
                                sum_gx += g[base + i] * xhat[base + i];
                            }
                        }
                        if (!g_gamma.empty()) g_gamma[ch] += sum_gx;
                        if (!g_beta.empty()) g_beta[ch] += sum_g;
                        if (g_in.empty()) continue;
                        const double scale = gm[ch] * inv_std[ch];
                        const double mean_g = sum_g / static_cast<double>(count);
                        const double mean_gx = sum_gx / static_cast<double>(count);
                        for (std::size_t b = 0; b < n; ++b) {
                            const std::size_t base = (b * c + ch) * hw;
                            for (std::size_t i = 0; i < hw; ++i) {
                                g_in[base + i] += batch_stats
                                    ? scale * (g[base + i] - mean_g - xhat[base + i] * mean_gx)
                                    : scale * g[base + i];
                            }
                        }
                    }
                });
}

inline void check_batch_norm_args(const Tensor& input, const Tensor& gamma, const Tensor& beta) {
    const std::string op = "batch_norm";
    require_rank(op, input, 4, "input");
    require_rank(op, gamma, 1, "gamma");
    require_rank(op, beta, 1, "beta");
    const auto c = input.dim(1);
    if (gamma.dim(0) != c) throw ShapeError(op, "gamma length", c, gamma.dim(0));
    if (beta.dim(0) != c) throw ShapeError(op, "beta length", c, beta.dim(0));
    if (input.size() == 0) throw ShapeError(op, "elements per channel", "need at least one");
}

}  // namespace detail

/// Normalizes each channel by its batch statistics over (N, H, W) and folds
/// them into `state` (running variance uses the unbiased estimate).
inline Tensor batch_norm_train(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                               BatchNormState& state, Tape* tape = nullptr) {
    detail::check_batch_norm_args(input, gamma, beta);
    const auto n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
    const std::size_t count = n * hw;
    const auto x = input.values();
    if (!state.ready(c)) state = BatchNormState::fresh(c);
    std::vector<double> mean(c), inv_std(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double sum = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
            const double* p = x.data() + (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) sum += p[i];
        }
        mean[ch] = sum / static_cast<double>(count);
        double sq = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
            const double* p = x.data() + (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) sq += (p[i] - mean[ch]) * (p[i] - mean[ch]);
        }
        const double var = sq / static_cast<double>(count);
        inv_std[ch] = 1.0 / std::sqrt(var + BatchNormState::kEpsilon);
        const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
        state.running_mean[ch] = BatchNormState::kMomentum * state.running_mean[ch] +
                                 (1.0 - BatchNormState::kMomentum) * mean[ch];
        state.running_var[ch] = BatchNormState::kMomentum * state.running_var[ch] +
                                (1.0 - BatchNormState::kMomentum) * unbiased;
    }
    return detail::batch_norm_apply(input, gamma, beta, mean, std::move(inv_std), true, tape);
}

/// Normalizes with the running statistics; `state` is only read.
inline Tensor batch_norm_eval(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                              const BatchNormState& state, Tape* tape = nullptr) {
    detail::check_batch_norm_args(input, gamma, beta);
    const auto c = input.dim(1);
    if (!state.ready(c)) throw UsageError("batch_norm: eval mode with uninitialized running statistics");
    std::vector<double> inv_std(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        inv_std[ch] = 1.0 / std::sqrt(state.running_var[ch] + BatchNormState::kEpsilon);
    }
    return detail::batch_norm_apply(input, gamma, beta, state.running_mean, std::move(inv_std), false, tape);
}

inline Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                         BatchNormState& state, Mode mode, Tape* tape = nullptr) {
    return mode == Mode::train ? batch_norm_train(input, gamma, beta, state, tape)
                               : batch_norm_eval(input, gamma, beta, state, tape);
}

/// max(0, x); the subgradient at 0 is 0.
inline Tensor relu(const Tensor& input, Tape* tape = nullptr) {
    const auto x = input.values();
    std::vector<double> out(x.size());
    std::transform(x.begin(), x.end(), out.begin(), [](double v) { return v > 0.0 ? v : 0.0; });
    return emit(tape, "relu", {input}, input.shape(), std::move(out), [input](const TapeRecord& rec) {
        const auto g = rec.output_grad();
        const auto gi = rec.input_grad(0);
        const auto x = input.values();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (x[i] > 0.0) gi[i] += g[i];
        }
    });
}

/// Inverted dropout: survivors are scaled by 1/(1-rate) so eval is identity.
inline Tensor dropout(const Tensor& input, double rate, Mode mode, std::mt19937_64& rng,
                      Tape* tape = nullptr) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ConfigError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    }
    if (mode == Mode::eval || rate == 0.0) return input;
    const double keep_scale = 1.0 / (1.0 - rate);
    const auto x = input.values();
    std::vector<double> mask(x.size());
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        mask[i] = detail::uniform01(rng) < rate ? 0.0 : keep_scale;
        out[i] = x[i] * mask[i];
    }
    return emit(tape, "dropout", {input}, input.shape(), std::move(out),
                [mask = std::move(mask)](const TapeRecord& rec) {
                    const auto g = rec.output_grad();
                    const auto gi = rec.input_grad(0);
                    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * mask[i];
                });
}

/// Stacks b's channels after a's.
inline Tensor concat_channels(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    const std::string op = "concat_channels";
    detail::require_rank(op, a, 4, "first operand");
    detail::require_rank(op, b, 4, "second operand");
    if (a.dim(0) != b.dim(0)) throw ShapeError(op, "batch", a.dim(0), b.dim(0));
    if (a.dim(2) != b.dim(2)) throw ShapeError(op, "height", a.dim(2), b.dim(2));
    if (a.dim(3) != b.dim(3)) throw ShapeError(op, "width", a.dim(3), b.dim(3));
    const auto n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    std::vector<double> out(n * (ca + cb) * hw);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.values().data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
        std::copy_n(b.values().data() + i * cb * hw, cb * hw, out.data() + (i * (ca + cb) + ca) * hw);
    }
    return emit(tape, op, {a, b}, {n, ca + cb, a.dim(2), a.dim(3)}, std::move(out),
                [n, ca, cb, hw](const TapeRecord& rec) {
                    const auto g = rec.output_grad();
                    const auto ga = rec.input_grad(0);
                    const auto gb = rec.input_grad(1);
                    for (std::size_t i = 0; i < n; ++i) {
                        const double* src = g.data() + i * (ca + cb) * hw;
                        if (!ga.empty()) {
                            for (std::size_t k = 0; k < ca * hw; ++k) ga[i * ca * hw + k] += src[k];
                        }
                        if (!gb.empty()) {
                            for (std::size_t k = 0; k < cb * hw; ++k) gb[i * cb * hw + k] += src[ca * hw + k];
                        }
                    }
                });
}

/// Channels [begin, end) of an N x C x H x W tensor.
inline Tensor slice_channels(const Tensor& input, std::size_t begin, std::size_t end,
                             Tape* tape = nullptr) {
    const std::string op = "slice_channels";
    detail::require_rank(op, input, 4, "input");
    const auto n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
    if (begin >= end || end > c) throw ShapeError(op, "channel range", "[" + std::to_string(begin) + ", " + std::to_string(end) + ") outside " + std::to_string(c));
    const auto width = end - begin;
    std::vector<double> out(n * width * hw);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(input.values().data() + (i * c + begin) * hw, width * hw, out.data() + i * width * hw);
    }
    return emit(tape, op, {input}, {n, width, input.dim(2), input.dim(3)}, std::move(out),
                [n, c, hw, begin, width](const TapeRecord& rec) {
                    const auto g = rec.output_grad();
                    const auto gi = rec.input_grad(0);
                    for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t k = 0; k < width * hw; ++k) {
                            gi[(i * c + begin) * hw + k] += g[i * width * hw + k];
                        }
                    }
                });
}

/// Per-pixel softmax across the channel axis, stabilized by subtracting the
/// channel maximum.
inline Tensor softmax_channels(const Tensor& logits, Tape* tape = nullptr) {
    const std::string op = "softmax_channels";
    detail::require_rank(op, logits, 4, "logits");
    const auto n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
    const auto z = logits.values();
    std::vector<double> p(z.size());
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t base = b * c * hw + i;
            double zmax = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < c; ++k) zmax = std::max(zmax, z[base + k * hw]);
            double total = 0.0;
            for (std::size_t k = 0; k < c; ++k) {
                p[base + k * hw] = std::exp(z[base + k * hw] - zmax);
                total += p[base + k * hw];
            }
            for (std::size_t k = 0; k < c; ++k) p[base + k * hw] /= total;
        }
    }
    return emit(tape, op, {logits}, logits.shape(), std::move(p),
                [n, c, hw](const TapeRecord& rec) {
                    const auto g = rec.output_grad();
                    const auto gi = rec.input_grad(0);
                    const auto p = rec.output_value();
                    for (std::size_t b = 0; b < n; ++b) {
                        for (std::size_t i = 0; i < hw; ++i) {
                            const std::size_t base = b * c * hw + i;
                            double dot = 0.0;
                            for (std::size_t k = 0; k < c; ++k) dot += g[base + k * hw] * p[base + k * hw];
                            for (std::size_t k = 0; k < c; ++k) {
                                gi[base + k * hw] += p[base + k * hw] * (g[base + k * hw] - dot);
                            }
                        }
                    }
                });
}

inline Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    detail::require_same_shape("add", a, b);
    std::vector<double> out(a.size());
    std::transform(a.values().begin(), a.values().end(), b.values().begin(), out.begin(), std::plus<>{});
    return emit(tape, "add", {a, b}, a.shape(), std::move(out), [](const TapeRecord& rec) {
        const auto g = rec.output_grad();
        for (std::size_t k = 0; k < 2; ++k) {
            const auto gk = rec.input_grad(k);
            for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += g[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    detail::require_same_shape("mul", a, b);
    std::vector<double> out(a.size());
    std::transform(a.values().begin(), a.values().end(), b.values().begin(), out.begin(), std::multiplies<>{});
    return emit(tape, "mul", {a, b}, a.shape(), std::move(out), [a, b](const TapeRecord& rec) {
        const auto g = rec.output_grad();
        const auto ga = rec.input_grad(0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b.values()[i];
        const auto gb = rec.input_grad(1);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a.values()[i];
    });
}

inline Tensor sum(const Tensor& input, Tape* tape = nullptr) {
    const double total = std::accumulate(input.values().begin(), input.values().end(), 0.0);
    return emit(tape, "sum", {input}, {1}, {total}, [](const TapeRecord& rec) {
        const double g = rec.output_grad()[0];
        for (double& v : rec.input_grad(0)) v += g;
    });
}

}  // namespace funet
