#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qgpt/core/error.hpp"

namespace qgpt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major array with an optional gradient buffer of the same shape.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(requires_grad) {
        for (auto extent : shape_) {
            if (extent == 0) throw DimensionError("tensor extent must be positive: " + shape_str(shape_));
        }
        if (shape_numel(shape_) != data_.size()) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor filled(Shape shape, T value, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t ndim() const noexcept { return shape_.size(); }
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    // Trailing extent; every tensor is viewed as rows() x cols() by the row-wise ops.
    std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
    std::size_t rows() const noexcept { return cols() == 0 ? 0 : numel() / cols(); }

    std::span<const T> data() const noexcept { return data_; }
    std::span<T> data() noexcept { return data_; }
    const std::vector<T>& vec() const noexcept { return data_; }

    T operator[](std::size_t i) const { return data_[i]; }
    T& operator[](std::size_t i) { return data_[i]; }

    T at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<const T> row(std::size_t r) const { return std::span<const T>(data_).subspan(r * cols(), cols()); }
    std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }

    bool requires_grad() const noexcept { return requires_grad_; }
    void set_requires_grad(bool v) {
        requires_grad_ = v;
        if (!v) grad_.reset();
    }

    bool has_grad() const noexcept { return grad_.has_value(); }
    std::span<const T> grad() const {
        if (!grad_) throw ContractError("tensor has no gradient buffer");
        return *grad_;
    }
    std::span<T> grad() {
        if (!grad_) throw ContractError("tensor has no gradient buffer");
        return *grad_;
    }

    // Allocates a zeroed gradient buffer on first use.
    std::span<T> grad_buffer() {
        if (!grad_) grad_.emplace(data_.size(), T(0));
        return *grad_;
    }

    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out), requires_grad_);
    }

    Tensor reshaped(Shape shape) const {
        return Tensor(std::move(shape), data_, requires_grad_);
    }

private:
    Shape shape_;
    std::vector<T> data_;
    std::optional<std::vector<T>> grad_;
    bool requires_grad_ = false;
};

}  // namespace qgpt
