#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mc3d/errors.hpp"

namespace mc3d {

enum class Dtype : uint8_t { F32 = 0, F64 = 1, U8 = 2 };

std::size_t dtype_size(Dtype dt);
const char* dtype_name(Dtype dt);

std::string shape_string(const std::vector<int64_t>& shape);

// Dense row-major n-d array; the single value carrier for the whole project.
// Shapes are non-empty with extents >= 1. Scalars use shape {1}.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<int64_t> shape, Dtype dtype);  // zero-initialized

    static Tensor zeros(std::vector<int64_t> shape, Dtype dtype);
    static Tensor full(std::vector<int64_t> shape, double value, Dtype dtype);
    static Tensor scalar(double value, Dtype dtype);
    static Tensor from(const std::vector<double>& values, std::vector<int64_t> shape,
                       Dtype dtype);

    bool defined() const { return !shape_.empty(); }
    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t dim(std::size_t i) const;
    std::size_t ndim() const { return shape_.size(); }
    int64_t numel() const { return numel_; }
    Dtype dtype() const { return dtype_; }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    // typed flat views; T must match dtype()
    template <class T>
    std::span<T> data();
    template <class T>
    std::span<const T> data() const;

    // dtype-dispatched scalar access (slow path; tests and I/O only)
    double at(int64_t i) const;
    void set(int64_t i, double v);
    void fill(double v);

    Tensor astype(Dtype dt) const;
    std::vector<double> to_vector() const;

    bool bit_equal(const Tensor& o) const;
    bool all_finite() const;

    std::byte* raw() { return data_.data(); }
    const std::byte* raw() const { return data_.data(); }
    std::size_t nbytes() const { return data_.size(); }

private:
    std::vector<int64_t> shape_;
    int64_t numel_ = 0;
    Dtype dtype_ = Dtype::F64;
    std::vector<std::byte> data_;
};

namespace detail {
template <class T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() {
    return Dtype::F32;
}
template <>
constexpr Dtype dtype_of<double>() {
    return Dtype::F64;
}
template <>
constexpr Dtype dtype_of<uint8_t>() {
    return Dtype::U8;
}
}  // namespace detail

template <class T>
std::span<T> Tensor::data() {
    if (dtype_ != detail::dtype_of<T>())
        throw ShapeError(std::string("tensor view type mismatch: tensor is ") +
                         dtype_name(dtype_));
    return {reinterpret_cast<T*>(data_.data()), static_cast<std::size_t>(numel_)};
}

template <class T>
std::span<const T> Tensor::data() const {
    if (dtype_ != detail::dtype_of<T>())
        throw ShapeError(std::string("tensor view type mismatch: tensor is ") +
                         dtype_name(dtype_));
    return {reinterpret_cast<const T*>(data_.data()), static_cast<std::size_t>(numel_)};
}

// invoke f with a float or double tag matching dt
template <class F>
decltype(auto) dispatch_float(Dtype dt, F&& f) {
    switch (dt) {
        case Dtype::F32:
            return f(float{});
        case Dtype::F64:
            return f(double{});
        default:
            throw ShapeError("operation requires a float tensor, got u8");
    }
}

}  // namespace mc3d
