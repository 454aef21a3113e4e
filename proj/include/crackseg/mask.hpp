#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "crackseg/error.hpp"
#include "crackseg/tensor.hpp"

namespace crackseg {

/// Class palette of label masks and predictions.
enum ClassId : std::uint8_t { kBackground = 0, kCrack = 1, kDelamination = 2 };

/// Per-pixel class indices, row-major.
struct LabelMask {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> classes;

    LabelMask() = default;
    LabelMask(std::size_t w, std::size_t h, std::uint8_t fill = kBackground)
        : width(w), height(h), classes(w * h, fill) {}

    std::uint8_t& at(std::size_t row, std::size_t col) { return classes[row * width + col]; }
    std::uint8_t at(std::size_t row, std::size_t col) const { return classes[row * width + col]; }
    std::size_t size() const { return classes.size(); }

    friend bool operator==(const LabelMask&, const LabelMask&) = default;
};

/// Expands class indices into an H x W x K one-hot tensor.
template <typename T>
Tensor<T> one_hot(const LabelMask& m, std::size_t num_classes) {
    Tensor<T> out({m.height, m.width, num_classes});
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (m.classes[i] >= num_classes)
            throw RejectedInput("one_hot: class " + std::to_string(m.classes[i]) + " out of range");
        out[i * num_classes + m.classes[i]] = T{1};
    }
    return out;
}

}  // namespace crackseg
