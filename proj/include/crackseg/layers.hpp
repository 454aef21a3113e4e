#pragma once

// Layer primitives of the segmentation network. Every backward pass is
// written by hand; no op retains state between calls.

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "crackseg/error.hpp"
#include "crackseg/rng.hpp"
#include "crackseg/tensor.hpp"

namespace crackseg {

struct Stride {
    std::size_t rows = 1;
    std::size_t cols = 1;
    friend bool operator==(const Stride&, const Stride&) = default;
};

/// Symmetric zero padding in pixels.
struct Padding {
    std::size_t rows = 0;
    std::size_t cols = 0;
    friend bool operator==(const Padding&, const Padding&) = default;
};

/// Kernels indexed (row, col, in_channel, out_channel); one bias per output channel.
template <typename T>
struct ConvParams {
    Tensor<T> kernels;
    Tensor<T> biases;
    Stride stride{};
    Padding padding{};

    std::size_t kernel_rows() const { return kernels.dim(0); }
    std::size_t kernel_cols() const { return kernels.dim(1); }
    std::size_t in_channels() const { return kernels.dim(2); }
    std::size_t out_channels() const { return kernels.dim(3); }

    static ConvParams zeros(std::size_t kr, std::size_t kc, std::size_t cin, std::size_t cout,
                            Stride s = {}, Padding p = {}) {
        return {Tensor<T>({kr, kc, cin, cout}), Tensor<T>({cout}), s, p};
    }
};

template <typename T>
struct ConvGrads {
    Tensor<T> x;
    Tensor<T> kernels;
    Tensor<T> biases;
};

enum class Mode { train, infer };

namespace detail {

template <typename T>
void validate_conv(const ConvParams<T>& p) {
    if (p.kernels.rank() != 4)
        throw RejectedInput("conv: kernels must be rank 4, got " + shape_str(p.kernels.shape()));
    if (p.biases.rank() != 1 || p.biases.dim(0) != p.out_channels())
        throw RejectedInput("conv: bias length does not match output channels");
    if (p.stride.rows == 0 || p.stride.cols == 0) throw RejectedInput("conv: zero stride");
}

inline std::size_t conv_out_dim(std::size_t in, std::size_t pad, std::size_t kernel,
                                std::size_t stride, const char* axis) {
    if (in + 2 * pad < kernel)
        throw RejectedInput(std::string("conv: kernel larger than padded input along ") + axis);
    const std::size_t span = in + 2 * pad - kernel;
    if (span % stride != 0)
        throw RejectedInput(std::string("conv: stride does not tile the padded input along ") + axis);
    return span / stride + 1;
}

}  // namespace detail

/// Output shape of a convolution: out = (in + 2*pad - kernel) / stride + 1 per axis.
template <typename T>
Shape conv2d_output_shape(const Tensor<T>& x, const ConvParams<T>& p) {
    require_image(x, "conv2d");
    detail::validate_conv(p);
    if (x.channels() != p.in_channels())
        throw RejectedInput("conv2d: input has " + std::to_string(x.channels()) +
                            " channels, kernels expect " + std::to_string(p.in_channels()));
    const auto oh = detail::conv_out_dim(x.height(), p.padding.rows, p.kernel_rows(), p.stride.rows, "rows");
    const auto ow = detail::conv_out_dim(x.width(), p.padding.cols, p.kernel_cols(), p.stride.cols, "cols");
    return image_shape(x.rank(), x.batch(), oh, ow, p.out_channels());
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const ConvParams<T>& p) {
    const Shape out_shape = conv2d_output_shape(x, p);
    require_finite(x, "conv2d");
    Tensor<T> out(out_shape);

    const std::size_t N = x.batch(), H = x.height(), W = x.width(), C = x.channels();
    const std::size_t OH = out.height(), OW = out.width(), K = p.out_channels();
    const std::size_t KR = p.kernel_rows(), KC = p.kernel_cols();
    const T* w = p.kernels.data();
    const T* b = p.biases.data();

    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t oh = 0; oh < OH; ++oh) {
            for (std::size_t ow = 0; ow < OW; ++ow) {
                T* o = &out.at(n, oh, ow, 0);
                for (std::size_t k = 0; k < K; ++k) o[k] = b[k];
                for (std::size_t i = 0; i < KR; ++i) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * p.stride.rows + i) -
                                    static_cast<std::ptrdiff_t>(p.padding.rows);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t j = 0; j < KC; ++j) {
                        const auto iw = static_cast<std::ptrdiff_t>(ow * p.stride.cols + j) -
                                        static_cast<std::ptrdiff_t>(p.padding.cols);
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                        const T* xi = &x.at(n, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), 0);
                        const T* wij = w + (i * KC + j) * C * K;
                        for (std::size_t c = 0; c < C; ++c) {
                            const T xv = xi[c];
                            const T* wr = wij + c * K;
                            for (std::size_t k = 0; k < K; ++k) o[k] += xv * wr[k];
                        }
                    }
                }
            }
        }
    }
    return out;
}

/// Gradients of a convolution with respect to its input, kernels and biases.
/// Pass `need_input_grad = false` to skip the input gradient (first layer).
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvParams<T>& p, const Tensor<T>& grad_out,
                             bool need_input_grad = true) {
    const Shape out_shape = conv2d_output_shape(x, p);
    if (grad_out.shape() != out_shape)
        throw RejectedInput("conv2d_backward: grad_out shape " + shape_str(grad_out.shape()) +
                            " does not match forward output " + shape_str(out_shape));

    ConvGrads<T> g{need_input_grad ? Tensor<T>::zeros_like(x) : Tensor<T>{},
                   Tensor<T>::zeros_like(p.kernels), Tensor<T>::zeros_like(p.biases)};

    const std::size_t N = x.batch(), H = x.height(), W = x.width(), C = x.channels();
    const std::size_t OH = grad_out.height(), OW = grad_out.width(), K = p.out_channels();
    const std::size_t KR = p.kernel_rows(), KC = p.kernel_cols();
    const T* w = p.kernels.data();
    T* gw = g.kernels.data();
    T* gb = g.biases.data();

    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t oh = 0; oh < OH; ++oh) {
            for (std::size_t ow = 0; ow < OW; ++ow) {
                const T* go = &grad_out.at(n, oh, ow, 0);
                for (std::size_t k = 0; k < K; ++k) gb[k] += go[k];
                for (std::size_t i = 0; i < KR; ++i) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * p.stride.rows + i) -
                                    static_cast<std::ptrdiff_t>(p.padding.rows);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t j = 0; j < KC; ++j) {
                        const auto iw = static_cast<std::ptrdiff_t>(ow * p.stride.cols + j) -
                                        static_cast<std::ptrdiff_t>(p.padding.cols);
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                        const auto uh = static_cast<std::size_t>(ih), uw = static_cast<std::size_t>(iw);
                        const T* xi = &x.at(n, uh, uw, 0);
                        const std::size_t base = (i * KC + j) * C * K;
                        for (std::size_t c = 0; c < C; ++c) {
                            const T xv = xi[c];
                            T* gwr = gw + base + c * K;
                            for (std::size_t k = 0; k < K; ++k) gwr[k] += xv * go[k];
                        }
                        if (need_input_grad) {
                            T* gxi = &g.x.at(n, uh, uw, 0);
                            for (std::size_t c = 0; c < C; ++c) {
                                const T* wr = w + base + c * K;
                                T s{0};
                                for (std::size_t k = 0; k < K; ++k) s += go[k] * wr[k];
                                gxi[c] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    return g;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
    return out;
}

/// Passes the gradient where x > 0. `x` may be the ReLU input or its output:
/// both are positive at exactly the same positions.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
    if (x.shape() != grad_out.shape()) throw RejectedInput("relu_backward: shape mismatch");
    Tensor<T> g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > T{0} ? grad_out[i] : T{0};
    return g;
}

template <typename T>
struct MaxPoolResult {
    Tensor<T> output;
    /// Flat index into the pooled input for each output element.
    std::vector<std::size_t> argmax;
    Shape input_shape;
};

/// Disjoint 2x2 max pooling with stride 2. Ties go to the first window
/// element in row-major order.
template <typename T>
MaxPoolResult<T> maxpool2x2(const Tensor<T>& x) {
    require_image(x, "maxpool2x2");
    if (x.height() % 2 != 0 || x.width() % 2 != 0)
        throw RejectedInput("maxpool2x2: odd spatial dimension " + shape_str(x.shape()));
    const std::size_t N = x.batch(), OH = x.height() / 2, OW = x.width() / 2, C = x.channels();
    MaxPoolResult<T> r{Tensor<T>(image_shape(x.rank(), N, OH, OW, C)), {}, x.shape()};
    r.argmax.resize(r.output.size());
    std::size_t o = 0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t oh = 0; oh < OH; ++oh)
            for (std::size_t ow = 0; ow < OW; ++ow)
                for (std::size_t c = 0; c < C; ++c, ++o) {
                    std::size_t best = x.offset(n, 2 * oh, 2 * ow, c);
                    for (std::size_t di = 0; di < 2; ++di)
                        for (std::size_t dj = 0; dj < 2; ++dj) {
                            const std::size_t idx = x.offset(n, 2 * oh + di, 2 * ow + dj, c);
                            if (x[idx] > x[best]) best = idx;
                        }
                    r.output[o] = x[best];
                    r.argmax[o] = best;
                }
    return r;
}

template <typename T>
Tensor<T> maxpool_backward(const std::vector<std::size_t>& argmax, const Shape& input_shape,
                           const Tensor<T>& grad_out) {
    if (grad_out.size() != argmax.size())
        throw RejectedInput("maxpool_backward: grad_out size does not match recorded argmax");
    Tensor<T> g(input_shape);
    for (std::size_t o = 0; o < argmax.size(); ++o) {
        if (argmax[o] >= g.size()) throw RejectedInput("maxpool_backward: argmax out of range");
        g[argmax[o]] += grad_out[o];
    }
    return g;
}

namespace detail {

template <typename T>
void validate_upconv(const Tensor<T>& x, const ConvParams<T>& p) {
    require_image(x, "transposed_conv2x2");
    validate_conv(p);
    if (p.kernel_rows() != 2 || p.kernel_cols() != 2 || p.stride.rows != 2 || p.stride.cols != 2 ||
        p.padding.rows != 0 || p.padding.cols != 0)
        throw RejectedInput("transposed_conv2x2: requires a 2x2 kernel, stride 2, no cropping");
    if (x.channels() != p.in_channels())
        throw RejectedInput("transposed_conv2x2: input has " + std::to_string(x.channels()) +
                            " channels, kernels expect " + std::to_string(p.in_channels()));
}

}  // namespace detail

/// 2x upsampling: x[p,q,c] * w[i,j,c,k] scatters into out[2p+i, 2q+j, k].
template <typename T>
Tensor<T> transposed_conv2x2_forward(const Tensor<T>& x, const ConvParams<T>& p) {
    detail::validate_upconv(x, p);
    require_finite(x, "transposed_conv2x2");
    const std::size_t N = x.batch(), H = x.height(), W = x.width(), C = x.channels();
    const std::size_t K = p.out_channels();
    Tensor<T> out(image_shape(x.rank(), N, 2 * H, 2 * W, K));
    const T* w = p.kernels.data();
    const T* b = p.biases.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t ww = 0; ww < W; ++ww) {
                const T* xi = &x.at(n, h, ww, 0);
                for (std::size_t i = 0; i < 2; ++i)
                    for (std::size_t j = 0; j < 2; ++j) {
                        T* o = &out.at(n, 2 * h + i, 2 * ww + j, 0);
                        for (std::size_t k = 0; k < K; ++k) o[k] = b[k];
                        const T* wij = w + (i * 2 + j) * C * K;
                        for (std::size_t c = 0; c < C; ++c) {
                            const T xv = xi[c];
                            const T* wr = wij + c * K;
                            for (std::size_t k = 0; k < K; ++k) o[k] += xv * wr[k];
                        }
                    }
            }
    return out;
}

/// Adjoint of the scatter: grad_x is a stride-2 convolution of grad_out with the same kernels.
template <typename T>
ConvGrads<T> transposed_conv2x2_backward(const Tensor<T>& x, const ConvParams<T>& p,
                                         const Tensor<T>& grad_out) {
    detail::validate_upconv(x, p);
    const std::size_t N = x.batch(), H = x.height(), W = x.width(), C = x.channels();
    const std::size_t K = p.out_channels();
    if (grad_out.shape() != image_shape(x.rank(), N, 2 * H, 2 * W, K))
        throw RejectedInput("transposed_conv2x2_backward: grad_out shape " + shape_str(grad_out.shape()) +
                            " does not match forward output");
    ConvGrads<T> g{Tensor<T>::zeros_like(x), Tensor<T>::zeros_like(p.kernels),
                   Tensor<T>::zeros_like(p.biases)};
    const T* w = p.kernels.data();
    T* gw = g.kernels.data();
    T* gb = g.biases.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t ww = 0; ww < W; ++ww) {
                const T* xi = &x.at(n, h, ww, 0);
                T* gxi = &g.x.at(n, h, ww, 0);
                for (std::size_t i = 0; i < 2; ++i)
                    for (std::size_t j = 0; j < 2; ++j) {
                        const T* go = &grad_out.at(n, 2 * h + i, 2 * ww + j, 0);
                        const std::size_t base = (i * 2 + j) * C * K;
                        for (std::size_t k = 0; k < K; ++k) gb[k] += go[k];
                        for (std::size_t c = 0; c < C; ++c) {
                            const T xv = xi[c];
                            const T* wr = w + base + c * K;
                            T* gwr = gw + base + c * K;
                            T s{0};
                            for (std::size_t k = 0; k < K; ++k) {
                                gwr[k] += xv * go[k];
                                s += go[k] * wr[k];
                            }
                            gxi[c] += s;
                        }
                    }
            }
    return g;
}

/// Channel concatenation; `a` occupies the lower channel indices.
template <typename T>
Tensor<T> concat_depth(const Tensor<T>& a, const Tensor<T>& b) {
    require_image(a, "concat_depth");
    require_image(b, "concat_depth");
    if (a.rank() != b.rank() || a.batch() != b.batch() || a.height() != b.height() ||
        a.width() != b.width())
        throw RejectedInput("concat_depth: spatial mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    const std::size_t ca = a.channels(), cb = b.channels();
    const std::size_t pixels = a.batch() * a.height() * a.width();
    Tensor<T> out(image_shape(a.rank(), a.batch(), a.height(), a.width(), ca + cb));
    T* o = out.data();
    for (std::size_t px = 0; px < pixels; ++px) {
        std::copy_n(a.data() + px * ca, ca, o);
        std::copy_n(b.data() + px * cb, cb, o + ca);
        o += ca + cb;
    }
    return out;
}

/// Splits a concatenated gradient back into the `a` and `b` parts.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_depth(const Tensor<T>& g, std::size_t a_channels) {
    require_image(g, "split_depth");
    if (a_channels > g.channels()) throw RejectedInput("split_depth: split point beyond channel count");
    const std::size_t ca = a_channels, cb = g.channels() - a_channels;
    const std::size_t pixels = g.batch() * g.height() * g.width();
    Tensor<T> a(image_shape(g.rank(), g.batch(), g.height(), g.width(), ca));
    Tensor<T> b(image_shape(g.rank(), g.batch(), g.height(), g.width(), cb));
    const T* src = g.data();
    for (std::size_t px = 0; px < pixels; ++px) {
        std::copy_n(src, ca, a.data() + px * ca);
        std::copy_n(src + ca, cb, b.data() + px * cb);
        src += ca + cb;
    }
    return {std::move(a), std::move(b)};
}

template <typename T>
struct DropoutResult {
    Tensor<T> output;
    /// Per-element multiplier: 0 or 1/(1-rate). Empty in infer mode (identity).
    std::vector<T> mask;
};

/// Inverted dropout: survivors are scaled at train time so inference is the identity.
template <typename T>
DropoutResult<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0))
        throw RejectedInput("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    if (mode == Mode::infer || rate == 0.0) return {x, {}};
    DropoutResult<T> r{Tensor<T>(x.shape()), std::vector<T>(x.size())};
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < x.size(); ++i) {
        r.mask[i] = uniform01(rng) < rate ? T{0} : keep_scale;
        r.output[i] = x[i] * r.mask[i];
    }
    return r;
}

template <typename T>
Tensor<T> dropout_backward(const std::vector<T>& mask, const Tensor<T>& grad_out) {
    if (mask.empty()) return grad_out;
    if (mask.size() != grad_out.size()) throw RejectedInput("dropout_backward: mask size mismatch");
    Tensor<T> g(grad_out.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * mask[i];
    return g;
}

/// Per-pixel softmax over the channel axis, with max subtraction.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
    require_image(logits, "softmax_channels");
    const std::size_t K = logits.channels();
    const std::size_t pixels = logits.size() / K;
    Tensor<T> out(logits.shape());
    for (std::size_t px = 0; px < pixels; ++px) {
        const T* z = logits.data() + px * K;
        T* p = out.data() + px * K;
        T m = z[0];
        for (std::size_t k = 1; k < K; ++k) m = std::max(m, z[k]);
        T s{0};
        for (std::size_t k = 0; k < K; ++k) {
            p[k] = std::exp(z[k] - m);
            s += p[k];
        }
        for (std::size_t k = 0; k < K; ++k) p[k] /= s;
    }
    return out;
}

/// Vector-Jacobian product of the channel softmax: g_z = p * (g_p - <p, g_p>).
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& grad_probs) {
    if (probs.shape() != grad_probs.shape()) throw RejectedInput("softmax_backward: shape mismatch");
    const std::size_t K = probs.channels();
    const std::size_t pixels = probs.size() / K;
    Tensor<T> g(probs.shape());
    for (std::size_t px = 0; px < pixels; ++px) {
        const T* p = probs.data() + px * K;
        const T* gp = grad_probs.data() + px * K;
        T inner{0};
        for (std::size_t k = 0; k < K; ++k) inner += p[k] * gp[k];
        for (std::size_t k = 0; k < K; ++k) g[px * K + k] = p[k] * (gp[k] - inner);
    }
    return g;
}

}  // namespace crackseg
