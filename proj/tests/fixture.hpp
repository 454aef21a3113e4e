#pragma once

// Synthetic crack corpus: textured concrete-gray images with dark line cracks
// and a brownish delamination patch, plus matching label masks.

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "crackseg.hpp"

namespace fixture {

using namespace crackseg;

inline Sample crack_sample(std::size_t size, std::uint64_t seed, const std::string& id) {
    std::mt19937_64 g(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Sample s{Tensor<float>({size, size, 3}), LabelMask(size, size), id};
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double base = 0.62 + 0.06 * (u(g) - 0.5);
            s.image.at(y, x, 0) = static_cast<float>(base);
            s.image.at(y, x, 1) = static_cast<float>(base);
            s.image.at(y, x, 2) = static_cast<float>(base + 0.02);
        }

    // Delamination: an axis-aligned patch.
    const std::size_t pw = size / 4 + static_cast<std::size_t>(u(g) * size / 8);
    const std::size_t px = static_cast<std::size_t>(u(g) * static_cast<double>(size - pw));
    const std::size_t py = static_cast<std::size_t>(u(g) * static_cast<double>(size - pw));
    for (std::size_t y = py; y < py + pw; ++y)
        for (std::size_t x = px; x < px + pw; ++x) {
            s.image.at(y, x, 0) = static_cast<float>(0.45 + 0.04 * u(g));
            s.image.at(y, x, 1) = static_cast<float>(0.33 + 0.04 * u(g));
            s.image.at(y, x, 2) = static_cast<float>(0.22 + 0.04 * u(g));
            s.mask.at(y, x) = kDelamination;
        }

    // Crack: a 2-pixel-wide line across the image, drawn over everything.
    const double x0 = u(g) * static_cast<double>(size), x1 = u(g) * static_cast<double>(size);
    for (std::size_t y = 0; y < size; ++y) {
        const double t = static_cast<double>(y) / static_cast<double>(size - 1);
        const auto cx = static_cast<long>(std::lround(x0 + (x1 - x0) * t));
        for (long dx = 0; dx < 2; ++dx) {
            const long x = cx + dx;
            if (x < 0 || x >= static_cast<long>(size)) continue;
            const auto ux = static_cast<std::size_t>(x);
            for (std::size_t c = 0; c < 3; ++c) s.image.at(y, ux, c) = static_cast<float>(0.12 + 0.04 * u(g));
            s.mask.at(y, ux) = kCrack;
        }
    }
    return s;
}

inline std::vector<Sample> crack_corpus(std::size_t count = 10, std::size_t size = 64, std::uint64_t seed = 2024) {
    std::vector<Sample> out;
    for (std::size_t i = 0; i < count; ++i) {
        const std::string id = (i < 10 ? "crack0" : "crack") + std::to_string(i);
        out.push_back(crack_sample(size, seed * 1000 + i, id));
    }
    return out;
}

/// Writes `<root>/images/<id>.png` and `<root>/masks/<id>.png`.
inline void write_corpus(const std::filesystem::path& root, const std::vector<Sample>& corpus) {
    std::filesystem::create_directories(root / "images");
    std::filesystem::create_directories(root / "masks");
    for (const auto& s : corpus) {
        write_rgb_png(root / "images" / (s.source_id + ".png"), s.image);
        write_mask(root / "masks" / (s.source_id + ".png"), s.mask);
    }
}

/// The scaled configuration used for the memorization check.
inline UNetConfig overfit_model() {
    UNetConfig c;
    c.input_size = 64;
    c.base_filters = 8;
    c.depth = 3;
    return c;
}

inline TrainConfig overfit_train() {
    TrainConfig t;
    t.max_epochs = 200;
    t.batch_size = 2;
    t.eta = 1e-3;
    t.constant_eta = true;
    t.split_fraction = 1.0;
    t.seed = 7;
    t.target_accuracy = 0.995;
    return t;
}

/// Pixel accuracy of infer-mode predictions over `samples` (already normalized).
inline double pixel_accuracy(const UNetParams<float>& p, const std::vector<Sample>& samples) {
    std::size_t correct = 0, total = 0;
    for (const auto& s : samples) {
        const auto cls = classify(infer_logits(p, s.image));
        for (std::size_t i = 0; i < cls.size(); ++i) correct += cls.classes[i] == s.mask.classes[i];
        total += cls.size();
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace fixture
