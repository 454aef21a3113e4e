#pragma once

// ADAM with the decaying step size eta_t = eta / sqrt(t) and first-moment rate
// beta1_t = beta1 * lambda^(t-1). Epsilon sits inside the square root:
//   w <- w - eta_t * m_hat / sqrt(v_hat + eps)

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "crackseg/error.hpp"
#include "crackseg/tensor.hpp"

namespace crackseg {

struct AdamConfig {
    double eta = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double lambda = 1.0;
    double epsilon = 1e-8;
    /// Skip the 1/sqrt(t) step-size decay.
    bool constant_eta = false;

    void validate() const {
        if (!(eta > 0.0)) throw ConfigError("adam: eta must be > 0");
        if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("adam: beta1 must lie in (0, 1)");
        if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("adam: beta2 must lie in (0, 1)");
        if (!(lambda > 0.0 && lambda <= 1.0)) throw ConfigError("adam: lambda must lie in (0, 1]");
        if (!(epsilon > 0.0)) throw ConfigError("adam: epsilon must be > 0");
    }
};

template <typename T>
struct NamedTensor {
    std::string key;
    Tensor<T> value;
    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

template <typename T>
using NamedTensors = std::vector<NamedTensor<T>>;

template <typename T, typename F>
void for_each_tensor(NamedTensors<T>& set, F&& f) {
    for (auto& nt : set) f(nt.key, nt.value);
}

template <typename T, typename F>
void for_each_tensor(const NamedTensors<T>& set, F&& f) {
    for (const auto& nt : set) f(nt.key, nt.value);
}

/// Moment estimates keyed like the parameters they track.
template <typename T>
struct AdamState {
    NamedTensors<T> m;
    NamedTensors<T> v;
    std::uint64_t t = 0;

    template <typename P>
    static AdamState zeros_like(P& params) {
        AdamState s;
        for_each_tensor(params, [&](const std::string& key, const Tensor<T>& w) {
            s.m.push_back({key, Tensor<T>::zeros_like(w)});
            s.v.push_back({key, Tensor<T>::zeros_like(w)});
        });
        return s;
    }

    friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// beta1 * lambda^(t-1).
inline double adam_beta1_at(const AdamConfig& cfg, std::uint64_t t) {
    return cfg.beta1 * std::pow(cfg.lambda, static_cast<double>(t - 1));
}

/// One update of every parameter tensor. `grads` must be keyed identically to
/// `params`; a non-finite gradient aborts before anything is modified.
template <typename T, typename P>
void adam_step(AdamState<T>& state, P& params, const P& grads, const AdamConfig& cfg) {
    std::vector<std::pair<std::string, Tensor<T>*>> w_refs;
    std::vector<std::pair<std::string, const Tensor<T>*>> g_refs;
    for_each_tensor(params, [&](const std::string& k, Tensor<T>& w) { w_refs.emplace_back(k, &w); });
    for_each_tensor(grads, [&](const std::string& k, const Tensor<T>& g) { g_refs.emplace_back(k, &g); });

    if (state.m.empty() && state.v.empty() && state.t == 0) state = AdamState<T>::zeros_like(params);
    if (w_refs.size() != g_refs.size() || w_refs.size() != state.m.size() || w_refs.size() != state.v.size())
        throw TrainingError("adam_step: gradient/state set does not match parameters");
    for (std::size_t i = 0; i < w_refs.size(); ++i) {
        const auto& key = w_refs[i].first;
        if (g_refs[i].first != key || state.m[i].key != key || state.v[i].key != key ||
            g_refs[i].second->shape() != w_refs[i].second->shape() || state.m[i].value.shape() != w_refs[i].second->shape())
            throw TrainingError("adam_step: gradient for '" + key + "' does not match its parameter", key);
        if (!g_refs[i].second->all_finite()) throw TrainingError("adam_step: non-finite gradient for '" + key + "'", key);
    }

    state.t += 1;
    const double t = static_cast<double>(state.t);
    const double b1t = adam_beta1_at(cfg, state.t);
    const double b2 = cfg.beta2;
    const double bias1 = 1.0 - std::pow(cfg.beta1, t);
    const double bias2 = 1.0 - std::pow(b2, t);
    const double eta_t = cfg.constant_eta ? cfg.eta : cfg.eta / std::sqrt(t);

    for (std::size_t i = 0; i < w_refs.size(); ++i) {
        Tensor<T>& w = *w_refs[i].second;
        const Tensor<T>& g = *g_refs[i].second;
        Tensor<T>& m = state.m[i].value;
        Tensor<T>& v = state.v[i].value;
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = g[j];
            const double mj = b1t * static_cast<double>(m[j]) + (1.0 - b1t) * gj;
            const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double m_hat = mj / bias1;
            const double v_hat = vj / bias2;
            w[j] = static_cast<T>(static_cast<double>(w[j]) - eta_t * m_hat / std::sqrt(v_hat + cfg.epsilon));
        }
    }
}

/// Patience-based stop rule on a higher-is-better metric. Improvement means a
/// strict increase over the best value seen so far.
struct EarlyStopController {
    std::size_t patience = 10;
    double best_metric = -std::numeric_limits<double>::infinity();
    std::size_t epochs_since_improvement = 0;

    /// Records one epoch's metric; returns true if it set a new best.
    bool observe(double metric) {
        if (metric > best_metric) {
            best_metric = metric;
            epochs_since_improvement = 0;
            return true;
        }
        ++epochs_since_improvement;
        return false;
    }

    bool exhausted() const { return epochs_since_improvement >= patience; }
};

/// Called once per epoch. True once the metric has failed to beat the running
/// best for `patience` consecutive calls.
inline bool should_stop(EarlyStopController& c, double validation_metric) {
    c.observe(validation_metric);
    return c.exhausted();
}

}  // namespace crackseg
