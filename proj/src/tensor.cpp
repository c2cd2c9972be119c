#include "mc3d/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace mc3d {

std::size_t dtype_size(Dtype dt) {
    switch (dt) {
        case Dtype::F32:
            return 4;
        case Dtype::F64:
            return 8;
        case Dtype::U8:
            return 1;
    }
    throw ShapeError("unknown dtype tag");
}

const char* dtype_name(Dtype dt) {
    switch (dt) {
        case Dtype::F32:
            return "f32";
        case Dtype::F64:
            return "f64";
        case Dtype::U8:
            return "u8";
    }
    return "?";
}

std::string shape_string(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<int64_t> shape, Dtype dtype) : shape_(std::move(shape)), dtype_(dtype) {
    if (shape_.empty()) throw ShapeError("tensor shape must be non-empty");
    numel_ = 1;
    for (int64_t e : shape_) {
        if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_string(shape_));
        if (numel_ > (int64_t(1) << 40) / e)
            throw ShapeError("tensor too large: " + shape_string(shape_));
        numel_ *= e;
    }
    data_.assign(static_cast<std::size_t>(numel_) * dtype_size(dtype_), std::byte{0});
}

Tensor Tensor::zeros(std::vector<int64_t> shape, Dtype dtype) {
    return Tensor(std::move(shape), dtype);
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, Dtype dtype) {
    Tensor t(std::move(shape), dtype);
    t.fill(value);
    return t;
}

Tensor Tensor::scalar(double value, Dtype dtype) {
    return full({1}, value, dtype);
}

Tensor Tensor::from(const std::vector<double>& values, std::vector<int64_t> shape, Dtype dtype) {
    Tensor t(std::move(shape), dtype);
    if (int64_t(values.size()) != t.numel())
        throw ShapeError("from: " + std::to_string(values.size()) + " values for shape " +
                         shape_string(t.shape()));
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, values[size_t(i)]);
    return t;
}

int64_t Tensor::dim(std::size_t i) const {
    if (i >= shape_.size()) throw ShapeError("dim index out of range for " + shape_string(shape_));
    return shape_[i];
}

double Tensor::at(int64_t i) const {
    switch (dtype_) {
        case Dtype::F32:
            return reinterpret_cast<const float*>(data_.data())[i];
        case Dtype::F64:
            return reinterpret_cast<const double*>(data_.data())[i];
        case Dtype::U8:
            return reinterpret_cast<const uint8_t*>(data_.data())[i];
    }
    return 0.0;
}

void Tensor::set(int64_t i, double v) {
    switch (dtype_) {
        case Dtype::F32:
            reinterpret_cast<float*>(data_.data())[i] = float(v);
            return;
        case Dtype::F64:
            reinterpret_cast<double*>(data_.data())[i] = v;
            return;
        case Dtype::U8:
            reinterpret_cast<uint8_t*>(data_.data())[i] = uint8_t(v);
            return;
    }
}

void Tensor::fill(double v) {
    for (int64_t i = 0; i < numel_; ++i) set(i, v);
}

Tensor Tensor::astype(Dtype dt) const {
    if (dt == dtype_) return *this;
    Tensor out(shape_, dt);
    for (int64_t i = 0; i < numel_; ++i) out.set(i, at(i));
    return out;
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> v(static_cast<std::size_t>(numel_));
    for (int64_t i = 0; i < numel_; ++i) v[size_t(i)] = at(i);
    return v;
}

bool Tensor::bit_equal(const Tensor& o) const {
    return dtype_ == o.dtype_ && shape_ == o.shape_ &&
           data_.size() == o.data_.size() &&
           std::memcmp(data_.data(), o.data_.data(), data_.size()) == 0;
}

bool Tensor::all_finite() const {
    if (dtype_ == Dtype::U8) return true;
    for (int64_t i = 0; i < numel_; ++i)
        if (!std::isfinite(at(i))) return false;
    return true;
}

}  // namespace mc3d
