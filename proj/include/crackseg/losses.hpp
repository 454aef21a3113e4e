#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "crackseg/error.hpp"
#include "crackseg/layers.hpp"
#include "crackseg/tensor.hpp"

namespace crackseg {

enum class WeightScheme { median_frequency, inverse_max };

inline std::string to_string(WeightScheme s) {
    return s == WeightScheme::median_frequency ? "median" : "invmax";
}

inline WeightScheme parse_weight_scheme(const std::string& s) {
    if (s == "median" || s == "median-frequency") return WeightScheme::median_frequency;
    if (s == "invmax" || s == "inverse-max") return WeightScheme::inverse_max;
    throw ConfigError("unknown weight scheme '" + s + "' (expected median or invmax)");
}

inline const std::vector<std::string>& default_class_names() {
    static const std::vector<std::string> names{"background", "crack", "delamination"};
    return names;
}

inline std::string class_name(std::size_t k) {
    const auto& n = default_class_names();
    return k < n.size() ? n[k] : "class-" + std::to_string(k);
}

struct ClassWeights {
    std::vector<double> alpha;
    std::vector<std::uint64_t> pixel_counts;
    std::vector<double> frequencies;
    WeightScheme scheme = WeightScheme::median_frequency;
};

namespace detail {

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline void reject_absent(const std::vector<std::size_t>& absent) {
    if (absent.empty()) return;
    std::string names;
    for (std::size_t i = 0; i < absent.size(); ++i) names += (i ? ", " : "") + class_name(absent[i]);
    throw ConfigError("class weights undefined: no pixels for class" + std::string(absent.size() > 1 ? "es " : " ") +
                      names);
}

}  // namespace detail

/// Median-frequency weights from precomputed per-class frequencies:
/// alpha_i = median(f) / f_i.
inline ClassWeights class_weights_from_frequencies(std::span<const double> frequencies) {
    std::vector<std::size_t> absent;
    for (std::size_t i = 0; i < frequencies.size(); ++i)
        if (!(frequencies[i] > 0.0)) absent.push_back(i);
    detail::reject_absent(absent);
    ClassWeights w;
    w.scheme = WeightScheme::median_frequency;
    w.frequencies.assign(frequencies.begin(), frequencies.end());
    const double med = detail::median(w.frequencies);
    for (double f : w.frequencies) w.alpha.push_back(med / f);
    return w;
}

/// `pixel_counts[i]`: pixels of class i. `presence_totals[i]`: total pixels of the
/// images that contain class i (pass the corpus pixel total for every class when
/// per-image data is unavailable).
///   median-frequency: f_i = counts_i / presence_i, alpha_i = median(f) / f_i
///   inverse-max:      alpha_i = max(counts) / counts_i
inline ClassWeights class_weights(std::span<const std::uint64_t> pixel_counts,
                                  std::span<const std::uint64_t> presence_totals, WeightScheme scheme) {
    if (pixel_counts.empty()) throw ConfigError("class weights: no classes");
    if (scheme == WeightScheme::median_frequency && presence_totals.size() != pixel_counts.size())
        throw ConfigError("class weights: presence totals length does not match class count");
    std::vector<std::size_t> absent;
    for (std::size_t i = 0; i < pixel_counts.size(); ++i)
        if (pixel_counts[i] == 0) absent.push_back(i);
    detail::reject_absent(absent);

    ClassWeights w;
    w.scheme = scheme;
    w.pixel_counts.assign(pixel_counts.begin(), pixel_counts.end());
    if (scheme == WeightScheme::median_frequency) {
        for (std::size_t i = 0; i < pixel_counts.size(); ++i)
            w.frequencies.push_back(static_cast<double>(pixel_counts[i]) / static_cast<double>(presence_totals[i]));
        const double med = detail::median(w.frequencies);
        for (double f : w.frequencies) w.alpha.push_back(med / f);
    } else {
        std::uint64_t total = 0;
        for (auto c : pixel_counts) total += c;
        const double mx = static_cast<double>(*std::max_element(pixel_counts.begin(), pixel_counts.end()));
        for (auto c : pixel_counts) {
            w.frequencies.push_back(static_cast<double>(c) / static_cast<double>(total));
            w.alpha.push_back(mx / static_cast<double>(c));
        }
    }
    return w;
}

inline ClassWeights uniform_weights(std::size_t num_classes) {
    ClassWeights w;
    w.alpha.assign(num_classes, 1.0);
    return w;
}

struct LossValue {
    double value = 0.0;
    std::vector<double> per_pixel;  // optional, filled on request
};

template <typename T>
struct LossAndGrad {
    LossValue loss;
    Tensor<T> grad_logits;
};

namespace detail {

/// Class index of a one-hot pixel, or -1 when the pixel is not one-hot.
template <typename T>
std::ptrdiff_t onehot_class(const T* y, std::size_t K) {
    std::ptrdiff_t cls = -1;
    for (std::size_t k = 0; k < K; ++k) {
        if (y[k] == T{1}) {
            if (cls >= 0) return -1;
            cls = static_cast<std::ptrdiff_t>(k);
        } else if (y[k] != T{0}) {
            return -1;
        }
    }
    return cls;
}

}  // namespace detail

/// Weighted cross-entropy -(alpha . y)^T log softmax(z), averaged over pixels and batch.
/// For a pixel of class c the gradient is alpha_c * (softmax(z) - y) / pixel_count,
/// which reduces to softmax(z) - y when alpha is all ones.
template <typename T>
LossAndGrad<T> weighted_cross_entropy(const Tensor<T>& logits, const Tensor<T>& labels,
                                      std::span<const double> alpha, bool keep_pixel_map = false) {
    require_image(logits, "weighted_cross_entropy");
    if (labels.shape() != logits.shape())
        throw RejectedInput("weighted_cross_entropy: labels shape " + shape_str(labels.shape()) +
                            " does not match logits " + shape_str(logits.shape()));
    const std::size_t K = logits.channels();
    if (alpha.size() != K) throw RejectedInput("weighted_cross_entropy: weight count does not match classes");
    const std::size_t pixels = logits.size() / K;
    const double inv_n = 1.0 / static_cast<double>(pixels);

    LossAndGrad<T> r{{}, Tensor<T>(logits.shape())};
    if (keep_pixel_map) r.loss.per_pixel.resize(pixels);
    double total = 0.0;
    for (std::size_t px = 0; px < pixels; ++px) {
        const T* z = logits.data() + px * K;
        const T* y = labels.data() + px * K;
        const auto c = detail::onehot_class(y, K);
        if (c < 0) throw RejectedInput("weighted_cross_entropy: label at pixel " + std::to_string(px) + " is not one-hot");
        T m = z[0];
        for (std::size_t k = 1; k < K; ++k) m = std::max(m, z[k]);
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += std::exp(static_cast<double>(z[k] - m));
        const double log_sum = std::log(s) + static_cast<double>(m);
        const double a = alpha[static_cast<std::size_t>(c)];
        const double pixel_loss = a * (log_sum - static_cast<double>(z[c]));
        total += pixel_loss;
        if (keep_pixel_map) r.loss.per_pixel[px] = pixel_loss;
        T* g = r.grad_logits.data() + px * K;
        for (std::size_t k = 0; k < K; ++k) {
            const double p = std::exp(static_cast<double>(z[k] - m)) / s;
            g[k] = static_cast<T>(a * (p - static_cast<double>(y[k])) * inv_n);
        }
    }
    r.loss.value = total * inv_n;
    return r;
}

namespace detail {

inline void require_same_length(std::size_t a, std::size_t b, const char* what) {
    if (a != b)
        throw RejectedInput(std::string(what) + ": length mismatch " + std::to_string(a) + " vs " + std::to_string(b));
}

}  // namespace detail

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kDiceEpsilon = 1e-7;

/// Binary cross-entropy; predictions are clamped to [1e-7, 1 - 1e-7] before the logs.
inline LossValue bce_loss(std::span<const double> truth, std::span<const double> pred) {
    detail::require_same_length(truth.size(), pred.size(), "bce_loss");
    if (truth.empty()) throw RejectedInput("bce_loss: empty input");
    double s = 0.0;
    for (std::size_t n = 0; n < truth.size(); ++n) {
        const double p = std::clamp(pred[n], kProbClamp, 1.0 - kProbClamp);
        s += truth[n] * std::log(p) + (1.0 - truth[n]) * std::log(1.0 - p);
    }
    return {-s / static_cast<double>(truth.size()), {}};
}

/// (2 sum(T*P) + eps) / (sum(T) + sum(P) + eps).
inline double dice(std::span<const double> truth, std::span<const double> pred) {
    detail::require_same_length(truth.size(), pred.size(), "dice");
    double tp = 0.0, st = 0.0, sp = 0.0;
    for (std::size_t n = 0; n < truth.size(); ++n) {
        tp += truth[n] * pred[n];
        st += truth[n];
        sp += pred[n];
    }
    return (2.0 * tp + kDiceEpsilon) / (st + sp + kDiceEpsilon);
}

inline LossValue dice_loss(std::span<const double> truth, std::span<const double> pred) {
    return {1.0 - dice(truth, pred), {}};
}

/// Training objective 1 - mean_k DC_k with DC_k computed on softmax(z) against the
/// one-hot labels, pooled over every pixel of the batch.
template <typename T>
LossAndGrad<T> multiclass_dice_loss(const Tensor<T>& logits, const Tensor<T>& labels) {
    require_image(logits, "multiclass_dice_loss");
    if (labels.shape() != logits.shape()) throw RejectedInput("multiclass_dice_loss: labels shape mismatch");
    const std::size_t K = logits.channels();
    const std::size_t pixels = logits.size() / K;
    for (std::size_t px = 0; px < pixels; ++px)
        if (detail::onehot_class(labels.data() + px * K, K) < 0)
            throw RejectedInput("multiclass_dice_loss: label at pixel " + std::to_string(px) + " is not one-hot");

    const Tensor<T> probs = softmax_channels(logits);
    std::vector<double> inter(K, 0.0), sum_t(K, 0.0), sum_p(K, 0.0);
    for (std::size_t px = 0; px < pixels; ++px)
        for (std::size_t k = 0; k < K; ++k) {
            const double p = probs[px * K + k], t = labels[px * K + k];
            inter[k] += t * p;
            sum_t[k] += t;
            sum_p[k] += p;
        }
    double mean_dc = 0.0;
    std::vector<double> num(K), den(K);
    for (std::size_t k = 0; k < K; ++k) {
        num[k] = 2.0 * inter[k] + kDiceEpsilon;
        den[k] = sum_t[k] + sum_p[k] + kDiceEpsilon;
        mean_dc += num[k] / den[k];
    }
    mean_dc /= static_cast<double>(K);

    Tensor<T> grad_p(logits.shape());
    const double scale = -1.0 / static_cast<double>(K);
    for (std::size_t px = 0; px < pixels; ++px)
        for (std::size_t k = 0; k < K; ++k) {
            const double t = labels[px * K + k];
            grad_p[px * K + k] = static_cast<T>(scale * (2.0 * t * den[k] - num[k]) / (den[k] * den[k]));
        }
    return {{1.0 - mean_dc, {}}, softmax_backward(probs, grad_p)};
}

}  // namespace crackseg
