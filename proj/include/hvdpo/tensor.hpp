#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hvdpo {

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. Immutable by convention once handed to the tape.
template <typename T>
struct TensorT {
    Shape shape;
    std::vector<T> data;

    TensorT() = default;

    explicit TensorT(Shape s) : shape(std::move(s)) {
        validate_dims();
        data.assign(static_cast<size_t>(numel_of(shape)), T(0));
    }

    TensorT(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        validate_dims();
        if (static_cast<int64_t>(data.size()) != numel_of(shape)) {
            throw std::runtime_error("tensor: data length " + std::to_string(data.size()) +
                                     " does not match shape " + shape_str(shape));
        }
    }

    static TensorT zeros(Shape s) { return TensorT(std::move(s)); }

    static TensorT full(Shape s, T v) {
        TensorT t(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }

    static TensorT scalar(T v) { return TensorT({1}, {v}); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    bool same_shape(const TensorT& other) const { return shape == other.shape; }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    T operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> d(data.size());
        for (size_t i = 0; i < data.size(); ++i) d[i] = static_cast<U>(data[i]);
        return TensorT<U>(shape, std::move(d));
    }

  private:
    void validate_dims() const {
        for (int d : shape) {
            if (d <= 0) {
                throw std::runtime_error("tensor: non-positive dimension in " + shape_str(shape));
            }
        }
    }
};

using Tensor = TensorT<float>;

template <typename T>
bool all_finite(const TensorT<T>& t) {
    for (T v : t.data) {
        if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
}

}  // namespace hvdpo
