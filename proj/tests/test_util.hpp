#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <unistd.h>

#include "crackseg.hpp"

namespace testutil {

using crackseg::Shape;
using crackseg::Tensor;

inline Tensor<double> random_tensor(const Shape& s, std::mt19937_64& g, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor<double> t(s);
    for (auto& v : t.values()) v = d(g);
    return t;
}

/// Values in [lo, hi] with magnitude at least `gap`, keeping ReLU inputs off the kink.
inline Tensor<double> away_from_zero(const Shape& s, std::mt19937_64& g, double gap = 0.1) {
    std::uniform_real_distribution<double> d(gap, 1.0);
    std::bernoulli_distribution sign(0.5);
    Tensor<double> t(s);
    for (auto& v : t.values()) v = sign(g) ? d(g) : -d(g);
    return t;
}

inline double rel_error(double a, double b) {
    const double scale = std::max(std::abs(a), std::abs(b));
    return scale < 1e-10 ? std::abs(a - b) : std::abs(a - b) / scale;
}

/// Worst relative error between `analytic` and central differences of the
/// scalar `loss` with respect to every entry of `x`.
inline double max_fd_error(Tensor<double>& x, const std::function<double()>& loss, const Tensor<double>& analytic,
                           double h = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double up = loss();
        x[i] = saved - h;
        const double down = loss();
        x[i] = saved;
        worst = std::max(worst, rel_error(analytic[i], (up - down) / (2.0 * h)));
    }
    return worst;
}

inline std::filesystem::path temp_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("crackseg_test_" + std::to_string(::getpid()) + "_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testutil
