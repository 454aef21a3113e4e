#pragma once

// Encoder / bridge / decoder network assembled from the layer primitives.
//
// Layer inventory for depth N and base filter count F:
//   encoder stage l (1..N): conv3x3 -> relu -> conv3x3 -> relu [-> dropout] -> maxpool, F*2^(l-1) filters
//   bridge:                 conv3x3 -> relu -> conv3x3 -> relu [-> dropout], F*2^N filters
//   decoder stage l (1..N): upconv2x2 -> relu -> concat(skip, up) -> conv3x3 -> relu -> conv3x3 -> relu,
//                           F*2^(N-l) filters; the skip is encoder stage N-l+1 before pooling
//   final:                  conv1x1 to num_classes, no activation

#include <cmath>
#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "crackseg/error.hpp"
#include "crackseg/layers.hpp"
#include "crackseg/rng.hpp"
#include "crackseg/tensor.hpp"

namespace crackseg {

struct UNetConfig {
    std::size_t input_size = 256;
    std::size_t input_channels = 3;
    std::size_t num_classes = 3;
    std::size_t base_filters = 64;
    std::size_t depth = 4;
    double dropout_rate = 0.5;
    /// Stage labels "encoder-<l>" or "bridge". Unset means {encoder-<depth>, bridge}.
    std::optional<std::set<std::string>> dropout_stages;

    std::set<std::string> effective_dropout_stages() const {
        if (dropout_stages) return *dropout_stages;
        return {"encoder-" + std::to_string(depth), "bridge"};
    }

    bool dropout_at(const std::string& stage) const {
        return effective_dropout_stages().count(stage) != 0;
    }

    void validate() const {
        if (base_filters < 1) throw ConfigError("base_filters must be >= 1");
        if (depth < 1) throw ConfigError("depth must be >= 1");
        if (depth > 16) throw ConfigError("depth must be <= 16");
        if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
        const std::size_t div = std::size_t{1} << depth;
        if (input_size == 0 || input_size % div != 0)
            throw ConfigError("input_size " + std::to_string(input_size) + " is not divisible by 2^depth = " +
                              std::to_string(div));
        for (const auto& s : effective_dropout_stages()) {
            bool ok = s == "bridge";
            for (std::size_t l = 1; l <= depth && !ok; ++l) ok = s == "encoder-" + std::to_string(l);
            if (!ok) throw ConfigError("unknown dropout stage '" + s + "'");
        }
    }

    friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

enum class LayerKind { conv3x3, upconv2x2, conv1x1 };

template <typename T>
struct NamedConv {
    std::string key;  // e.g. "enc1.conv1", "dec2.upconv", "final.conv"
    LayerKind kind;
    ConvParams<T> conv;
};

namespace detail {

struct LayerSpec {
    std::string key;
    LayerKind kind;
    std::size_t in_channels;
    std::size_t out_channels;
};

inline std::vector<LayerSpec> layer_specs(const UNetConfig& cfg) {
    std::vector<LayerSpec> specs;
    const std::size_t F = cfg.base_filters, N = cfg.depth;
    std::size_t ch = cfg.input_channels;
    for (std::size_t l = 1; l <= N; ++l) {
        const std::size_t f = F << (l - 1);
        const std::string s = "enc" + std::to_string(l);
        specs.push_back({s + ".conv1", LayerKind::conv3x3, ch, f});
        specs.push_back({s + ".conv2", LayerKind::conv3x3, f, f});
        ch = f;
    }
    const std::size_t fb = F << N;
    specs.push_back({"bridge.conv1", LayerKind::conv3x3, ch, fb});
    specs.push_back({"bridge.conv2", LayerKind::conv3x3, fb, fb});
    ch = fb;
    for (std::size_t l = 1; l <= N; ++l) {
        const std::size_t f = F << (N - l);
        const std::string s = "dec" + std::to_string(l);
        specs.push_back({s + ".upconv", LayerKind::upconv2x2, ch, f});
        // concat(skip with f channels, upsampled with f channels)
        specs.push_back({s + ".conv1", LayerKind::conv3x3, 2 * f, f});
        specs.push_back({s + ".conv2", LayerKind::conv3x3, f, f});
        ch = f;
    }
    specs.push_back({"final.conv", LayerKind::conv1x1, ch, cfg.num_classes});
    return specs;
}

inline std::size_t kernel_extent(LayerKind k) {
    switch (k) {
        case LayerKind::conv3x3: return 3;
        case LayerKind::upconv2x2: return 2;
        case LayerKind::conv1x1: return 1;
    }
    return 1;
}

template <typename T>
ConvParams<T> empty_conv(const LayerSpec& s) {
    const std::size_t e = kernel_extent(s.kind);
    switch (s.kind) {
        case LayerKind::conv3x3:
            return ConvParams<T>::zeros(3, 3, s.in_channels, s.out_channels, {1, 1}, {1, 1});
        case LayerKind::upconv2x2:
            return ConvParams<T>::zeros(2, 2, s.in_channels, s.out_channels, {2, 2}, {0, 0});
        case LayerKind::conv1x1:
            break;
    }
    return ConvParams<T>::zeros(e, e, s.in_channels, s.out_channels, {1, 1}, {0, 0});
}

}  // namespace detail

/// All kernels and biases of the network, in fixed layer order.
template <typename T>
struct UNetParams {
    UNetConfig config;
    std::vector<NamedConv<T>> layers;

    const ConvParams<T>& at(const std::string& key) const {
        for (const auto& l : layers)
            if (l.key == key) return l.conv;
        throw RejectedInput("no layer named '" + key + "'");
    }
    ConvParams<T>& at(const std::string& key) {
        return const_cast<ConvParams<T>&>(std::as_const(*this).at(key));
    }

    /// Same layout, every tensor zero. Used as the gradient container.
    static UNetParams zeros(const UNetConfig& cfg) {
        UNetParams p{cfg, {}};
        for (const auto& s : detail::layer_specs(cfg)) p.layers.push_back({s.key, s.kind, detail::empty_conv<T>(s)});
        return p;
    }

    template <typename U>
    UNetParams<U> cast() const {
        UNetParams<U> out{config, {}};
        for (const auto& l : layers)
            out.layers.push_back({l.key, l.kind,
                                  ConvParams<U>{l.conv.kernels.template cast<U>(), l.conv.biases.template cast<U>(),
                                                l.conv.stride, l.conv.padding}});
        return out;
    }

    friend bool operator==(const UNetParams& a, const UNetParams& b) {
        if (!(a.config == b.config) || a.layers.size() != b.layers.size()) return false;
        for (std::size_t i = 0; i < a.layers.size(); ++i) {
            const auto &x = a.layers[i], &y = b.layers[i];
            if (x.key != y.key || !(x.conv.kernels == y.conv.kernels) || !(x.conv.biases == y.conv.biases))
                return false;
        }
        return true;
    }
};

/// Gradients share the parameter layout and keying.
template <typename T>
using ParamGrads = UNetParams<T>;

/// Visits every tensor as (key, tensor): "<layer>.w" for kernels and "<layer>.b" for biases.
template <typename P, typename F>
    requires requires(P& p) { p.layers; }
void for_each_tensor(P& params, F&& f) {
    for (auto& l : params.layers) {
        f(l.key + ".w", l.conv.kernels);
        f(l.key + ".b", l.conv.biases);
    }
}

/// Total kernel plus bias element count.
inline std::size_t parameter_count(const UNetConfig& cfg) {
    cfg.validate();
    std::size_t total = 0;
    for (const auto& s : detail::layer_specs(cfg)) {
        const std::size_t e = detail::kernel_extent(s.kind);
        total += e * e * s.in_channels * s.out_channels + s.out_channels;
    }
    return total;
}

/// Kernels ~ N(0, 2/fan_in) with fan_in = kh*kw*in_channels; zero biases.
template <typename T>
UNetParams<T> build(const UNetConfig& cfg, Rng& rng) {
    cfg.validate();
    auto p = UNetParams<T>::zeros(cfg);
    for (auto& l : p.layers) {
        const auto& w = l.conv.kernels;
        const double fan_in = static_cast<double>(w.dim(0) * w.dim(1) * w.dim(2));
        const double stddev = std::sqrt(2.0 / fan_in);
        for (auto& v : l.conv.kernels.values()) v = static_cast<T>(normal(rng, 0.0, stddev));
    }
    return p;
}

template <typename T>
struct EncoderCache {
    Tensor<T> input;      // stage input
    Tensor<T> act1;       // relu(conv1)
    Tensor<T> act2;       // relu(conv2)
    std::vector<T> dropout_mask;
    Tensor<T> skip;       // post-dropout, pre-pool
    std::vector<std::size_t> pool_argmax;
};

template <typename T>
struct BridgeCache {
    Tensor<T> input;
    Tensor<T> act1;
    Tensor<T> act2;
    std::vector<T> dropout_mask;
};

template <typename T>
struct DecoderCache {
    Tensor<T> input;      // previous stage output
    Tensor<T> up;         // relu(upconv)
    Tensor<T> cat;        // concat(skip, up)
    std::size_t skip_channels = 0;
    Tensor<T> act1;
    Tensor<T> act2;
};

/// Everything backward needs: layer inputs, activations, argmax indices and dropout masks.
template <typename T>
struct ForwardTrace {
    UNetConfig config;
    Shape image_shape;
    std::vector<EncoderCache<T>> encoders;
    BridgeCache<T> bridge;
    std::vector<DecoderCache<T>> decoders;
    Tensor<T> final_input;
};

template <typename T>
struct ForwardResult {
    Tensor<T> logits;
    ForwardTrace<T> trace;
};

namespace detail {

template <typename T>
void check_image(const UNetConfig& cfg, const Tensor<T>& image) {
    require_image(image, "unet forward");
    if (image.height() != cfg.input_size || image.width() != cfg.input_size ||
        image.channels() != cfg.input_channels)
        throw RejectedInput("unet forward: image shape " + shape_str(image.shape()) + " does not match " +
                            std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size) + "x" +
                            std::to_string(cfg.input_channels));
}

template <typename T>
void check_layout(const UNetParams<T>& params) {
    const auto specs = layer_specs(params.config);
    if (specs.size() != params.layers.size())
        throw RejectedInput("unet: parameter set does not match its config");
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& l = params.layers[i];
        if (l.key != specs[i].key || l.conv.kernels.rank() != 4 ||
            l.conv.in_channels() != specs[i].in_channels || l.conv.out_channels() != specs[i].out_channels)
            throw RejectedInput("unet: layer '" + specs[i].key + "' does not match its config");
    }
}

template <typename T>
Tensor<T> forward_impl(const UNetParams<T>& params, const Tensor<T>& image, Mode mode, Rng& rng,
                       ForwardTrace<T>* trace) {
    const auto& cfg = params.config;
    check_layout(params);
    check_image(cfg, image);
    const std::size_t N = cfg.depth;
    std::size_t li = 0;
    auto next = [&]() -> const ConvParams<T>& { return params.layers[li++].conv; };

    if (trace) {
        trace->config = cfg;
        trace->image_shape = image.shape();
        trace->encoders.assign(N, {});
        trace->decoders.assign(N, {});
    }

    std::vector<Tensor<T>> skips(N);
    Tensor<T> x = image;
    for (std::size_t l = 0; l < N; ++l) {
        Tensor<T> a1 = relu(conv2d_forward(x, next()));
        Tensor<T> a2 = relu(conv2d_forward(a1, next()));
        auto drop = dropout(a2, cfg.dropout_at("encoder-" + std::to_string(l + 1)) ? cfg.dropout_rate : 0.0,
                            mode, rng);
        auto pooled = maxpool2x2(drop.output);
        if (trace) {
            auto& c = trace->encoders[l];
            c.input = std::move(x);
            c.act1 = std::move(a1);
            c.act2 = std::move(a2);
            c.dropout_mask = std::move(drop.mask);
            c.pool_argmax = std::move(pooled.argmax);
        }
        skips[l] = std::move(drop.output);
        x = std::move(pooled.output);
    }

    {
        Tensor<T> a1 = relu(conv2d_forward(x, next()));
        Tensor<T> a2 = relu(conv2d_forward(a1, next()));
        auto drop = dropout(a2, cfg.dropout_at("bridge") ? cfg.dropout_rate : 0.0, mode, rng);
        if (trace) {
            trace->bridge.input = std::move(x);
            trace->bridge.act1 = std::move(a1);
            trace->bridge.act2 = std::move(a2);
            trace->bridge.dropout_mask = std::move(drop.mask);
        }
        x = std::move(drop.output);
    }

    for (std::size_t l = 0; l < N; ++l) {
        Tensor<T> up = relu(transposed_conv2x2_forward(x, next()));
        Tensor<T>& skip = skips[N - 1 - l];
        const std::size_t skip_channels = skip.channels();
        Tensor<T> cat = concat_depth(skip, up);
        Tensor<T> a1 = relu(conv2d_forward(cat, next()));
        Tensor<T> a2 = relu(conv2d_forward(a1, next()));
        if (trace) {
            auto& c = trace->decoders[l];
            c.input = std::move(x);
            c.up = std::move(up);
            c.cat = std::move(cat);
            c.skip_channels = skip_channels;
            c.act1 = std::move(a1);
            x = a2;
            c.act2 = std::move(a2);
            trace->encoders[N - 1 - l].skip = std::move(skip);
        } else {
            skip = Tensor<T>{};
            x = std::move(a2);
        }
    }

    Tensor<T> logits = conv2d_forward(x, next());
    if (trace) trace->final_input = std::move(x);
    return logits;
}

}  // namespace detail

/// Logits (same spatial size as the image, num_classes channels) plus the trace for backward.
/// Infer mode disables dropout.
template <typename T>
ForwardResult<T> forward(const UNetParams<T>& params, const Tensor<T>& image, Mode mode, Rng& rng) {
    ForwardResult<T> r;
    r.logits = detail::forward_impl(params, image, mode, rng, &r.trace);
    return r;
}

/// Infer-mode logits without retaining intermediate activations.
template <typename T>
Tensor<T> infer_logits(const UNetParams<T>& params, const Tensor<T>& image) {
    Rng unused(0);
    return detail::forward_impl(params, image, Mode::infer, unused, static_cast<ForwardTrace<T>*>(nullptr));
}

template <typename T>
ParamGrads<T> backward(const UNetParams<T>& params, const ForwardTrace<T>& trace, const Tensor<T>& grad_logits) {
    detail::check_layout(params);
    const auto& cfg = params.config;
    const std::size_t N = cfg.depth;
    if (!(trace.config == cfg) || trace.encoders.size() != N || trace.decoders.size() != N)
        throw RejectedInput("unet backward: trace was produced by a different configuration");
    const Shape logits_shape =
        image_shape(trace.image_shape.size(), trace.image_shape.size() == 4 ? trace.image_shape[0] : 1,
                    cfg.input_size, cfg.input_size, cfg.num_classes);
    if (grad_logits.shape() != logits_shape)
        throw RejectedInput("unet backward: grad_logits shape " + shape_str(grad_logits.shape()) +
                            " does not match logits " + shape_str(logits_shape));

    auto grads = ParamGrads<T>::zeros(cfg);
    std::size_t li = params.layers.size();
    auto assign = [&](std::size_t idx, ConvGrads<T>& g) {
        grads.layers[idx].conv.kernels = std::move(g.kernels);
        grads.layers[idx].conv.biases = std::move(g.biases);
    };

    // final 1x1
    --li;
    auto gf = conv2d_backward(trace.final_input, params.layers[li].conv, grad_logits);
    assign(li, gf);
    Tensor<T> g = std::move(gf.x);

    std::vector<Tensor<T>> skip_grads(N);
    for (std::size_t l = N; l-- > 0;) {
        const auto& c = trace.decoders[l];
        g = relu_backward(c.act2, g);
        --li;
        auto g2 = conv2d_backward(c.act1, params.layers[li].conv, g);
        assign(li, g2);
        g = relu_backward(c.act1, g2.x);
        --li;
        auto g1 = conv2d_backward(c.cat, params.layers[li].conv, g);
        assign(li, g1);
        auto [g_skip, g_up] = split_depth(g1.x, c.skip_channels);
        skip_grads[N - 1 - l] = std::move(g_skip);
        g = relu_backward(c.up, g_up);
        --li;
        auto gu = transposed_conv2x2_backward(c.input, params.layers[li].conv, g);
        assign(li, gu);
        g = std::move(gu.x);
    }

    {
        const auto& c = trace.bridge;
        g = dropout_backward(c.dropout_mask, g);
        g = relu_backward(c.act2, g);
        --li;
        auto g2 = conv2d_backward(c.act1, params.layers[li].conv, g);
        assign(li, g2);
        g = relu_backward(c.act1, g2.x);
        --li;
        auto g1 = conv2d_backward(c.input, params.layers[li].conv, g);
        assign(li, g1);
        g = std::move(g1.x);
    }

    for (std::size_t l = N; l-- > 0;) {
        const auto& c = trace.encoders[l];
        Tensor<T> gs = maxpool_backward(c.pool_argmax, c.act2.shape(), g);
        gs += skip_grads[l];
        gs = dropout_backward(c.dropout_mask, gs);
        gs = relu_backward(c.act2, gs);
        --li;
        auto g2 = conv2d_backward(c.act1, params.layers[li].conv, gs);
        assign(li, g2);
        gs = relu_backward(c.act1, g2.x);
        --li;
        auto g1 = conv2d_backward(c.input, params.layers[li].conv, gs, l > 0);
        assign(li, g1);
        g = std::move(g1.x);
    }
    return grads;
}

}  // namespace crackseg
