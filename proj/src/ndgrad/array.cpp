#include "fever/ndgrad/array.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>

#include "fever/errors.hpp"

namespace fever::ndgrad {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
Array<T>::Array(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

template <typename T>
Array<T>::Array(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
        throw ShapeError("Array: shape " + shape_str(shape_) + " needs " +
                         std::to_string(shape_size(shape_)) + " values, got " +
                         std::to_string(data_.size()));
    }
}

template <typename T>
T Array<T>::item() const {
    if (data_.size() != 1) {
        throw ShapeError("item: expected one element, shape " + shape_str(shape_));
    }
    return data_[0];
}

template <typename T>
Array<T> Array<T>::reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
        throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape));
    }
    return Array(std::move(shape), data_);
}

template <typename T>
bool Array<T>::all_finite() const {
    for (T v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

template <typename T>
bool bitwise_equal(const Array<T>& a, const Array<T>& b) {
    if (a.shape() != b.shape()) return false;
    if (a.size() == 0) return true;
    return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

template class Array<float>;
template class Array<double>;
template bool bitwise_equal(const Array<float>&, const Array<float>&);
template bool bitwise_equal(const Array<double>&, const Array<double>&);

}  // namespace fever::ndgrad
