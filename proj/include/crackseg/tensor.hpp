#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "crackseg/error.hpp"

namespace crackseg {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ')';
    return os.str();
}

inline std::size_t shape_volume(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major tensor. Image tensors are H x W x C (rank 3) or
/// N x H x W x C (rank 4); the spatial accessors treat rank 3 as a batch of one.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{0})
        : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_volume(shape_))
            throw RejectedInput("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape_); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    bool is_image() const noexcept { return rank() == 3 || rank() == 4; }
    std::size_t batch() const { return rank() == 4 ? shape_[0] : 1; }
    std::size_t height() const { return shape_[rank() - 3]; }
    std::size_t width() const { return shape_[rank() - 2]; }
    std::size_t channels() const { return shape_[rank() - 1]; }

    std::size_t offset(std::size_t n, std::size_t h, std::size_t w, std::size_t c) const {
        return ((n * height() + h) * width() + w) * channels() + c;
    }
    T& at(std::size_t n, std::size_t h, std::size_t w, std::size_t c) {
        return data_[offset(n, h, w, c)];
    }
    const T& at(std::size_t n, std::size_t h, std::size_t w, std::size_t c) const {
        return data_[offset(n, h, w, c)];
    }
    T& at(std::size_t h, std::size_t w, std::size_t c) { return at(0, h, w, c); }
    const T& at(std::size_t h, std::size_t w, std::size_t c) const { return at(0, h, w, c); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
        return out;
    }

    Tensor& operator+=(const Tensor& o) {
        if (o.shape_ != shape_)
            throw RejectedInput("tensor add shape mismatch " + shape_str(shape_) + " vs " +
                                shape_str(o.shape_));
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

/// Shape for an image tensor with the same rank as `like`.
inline Shape image_shape(std::size_t rank, std::size_t n, std::size_t h, std::size_t w, std::size_t c) {
    return rank == 4 ? Shape{n, h, w, c} : Shape{h, w, c};
}

template <typename T>
void require_image(const Tensor<T>& x, const char* what) {
    if (!x.is_image())
        throw RejectedInput(std::string(what) + ": expected rank-3 or rank-4 tensor, got " +
                            shape_str(x.shape()));
}

template <typename T>
void require_finite(const Tensor<T>& x, const char* what) {
    if (!x.all_finite()) throw RejectedInput(std::string(what) + ": non-finite input");
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw RejectedInput("dot: shape mismatch");
    T s{0};
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace crackseg
