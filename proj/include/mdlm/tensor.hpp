#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mdlm/error.hpp"

namespace mdlm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major tensor. Storage is a plain vector so tensors are regular
// value types; the autodiff tape refers to them by index, never by pointer
// into the vector.
template <class T>
struct BasicTensor {
    using value_type = T;

    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;

    BasicTensor() = default;

    explicit BasicTensor(Shape s, T fill = T{0})
        : shape(std::move(s)), data(shape_numel(shape), fill) {}

    BasicTensor(Shape s, std::vector<T> values)
        : shape(std::move(s)), data(std::move(values)) {
        if (shape_numel(shape) != data.size()) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
    }

    static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }

    // Rows/cols view for rank-2 tensors (rank-1 tensors are a single row).
    std::size_t rows() const { return rank() >= 2 ? numel() / shape.back() : 1; }
    std::size_t cols() const { return rank() == 0 ? 1 : shape.back(); }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    T& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    std::span<T> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
    std::span<const T> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

    T item() const {
        if (numel() != 1) {
            throw DimensionError("item() on tensor of shape " + shape_str(shape));
        }
        return data[0];
    }

    bool all_finite() const {
        for (const T& v : data) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    template <class U>
    BasicTensor<U> cast() const {
        BasicTensor<U> out;
        out.shape = shape;
        out.data.assign(data.begin(), data.end());
        out.requires_grad = requires_grad;
        return out;
    }

    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.shape == b.shape && a.data == b.data;
    }
};

using Tensor = BasicTensor<float>;

} // namespace mdlm
