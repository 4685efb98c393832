#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace fever::ndgrad {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major n-dimensional array with value semantics.
template <typename T>
class Array {
public:
    using value_type = T;

    Array() = default;
    explicit Array(Shape shape, T fill = T(0));
    Array(Shape shape, std::vector<T> data);

    static Array zeros(Shape shape) { return Array(std::move(shape), T(0)); }
    static Array ones(Shape shape) { return Array(std::move(shape), T(1)); }
    static Array scalar(T value) { return Array(Shape{}, std::vector<T>{value}); }
    static Array from(Shape shape, std::initializer_list<T> values) {
        return Array(std::move(shape), std::vector<T>(values));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    bool empty() const { return data_.empty(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    const std::vector<T>& values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    // Scalar value of a one-element array.
    T item() const;

    // Same data, new shape; sizes must agree.
    Array reshaped(Shape shape) const;

    bool all_finite() const;

    // Casts element type (used to run float models through double oracles).
    template <typename U>
    Array<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Array<U>(shape_, std::move(out));
    }

    friend bool operator==(const Array& a, const Array& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

// Bitwise comparison; distinguishes -0.0 and treats identical NaN payloads as equal.
template <typename T>
bool bitwise_equal(const Array<T>& a, const Array<T>& b);

extern template class Array<float>;
extern template class Array<double>;

}  // namespace fever::ndgrad
