#include "cag/numerics/tensor.hpp"

#include <cstring>

#include "cag/error.hpp"

namespace cag {

const char* dtype_name(DType dtype) {
    switch (dtype) {
        case DType::f32: return "f32";
        case DType::f64: return "f64";
        case DType::boolean: return "bool";
    }
    return "unknown";
}

std::size_t dims_product(const Dims& dims) {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

std::string dims_string(const Dims& dims) {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(dims[i]);
    }
    return s + "]";
}

Tensor::Tensor() : Tensor(DType::f32, Dims{}) {}

Tensor::Tensor(DType dtype, Dims dims) : dtype_(dtype), dims_(std::move(dims)) {
    for (auto d : dims_) {
        if (d == 0) throw ShapeError("tensor dims must be positive, got " + dims_string(dims_));
    }
    const std::size_t n = dims_product(dims_);
    switch (dtype_) {
        case DType::f32: storage_ = std::vector<float>(n, 0.0f); break;
        case DType::f64: storage_ = std::vector<double>(n, 0.0); break;
        case DType::boolean: storage_ = std::vector<std::uint8_t>(n, 0); break;
    }
}

Tensor Tensor::from_f32(Dims dims, std::vector<float> data) {
    Tensor t(DType::f32, std::move(dims));
    if (data.size() != t.numel()) throw ShapeError("payload length does not match dims " + dims_string(t.dims_));
    t.storage_ = std::move(data);
    return t;
}

Tensor Tensor::from_f64(Dims dims, std::vector<double> data) {
    Tensor t(DType::f64, std::move(dims));
    if (data.size() != t.numel()) throw ShapeError("payload length does not match dims " + dims_string(t.dims_));
    t.storage_ = std::move(data);
    return t;
}

Tensor Tensor::from_bool(Dims dims, std::vector<std::uint8_t> data) {
    Tensor t(DType::boolean, std::move(dims));
    if (data.size() != t.numel()) throw ShapeError("payload length does not match dims " + dims_string(t.dims_));
    for (auto& b : data) b = b ? 1 : 0;
    t.storage_ = std::move(data);
    return t;
}

std::size_t Tensor::numel() const noexcept { return dims_product(dims_); }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= dims_.size()) throw ShapeError("axis out of range for tensor of rank " + std::to_string(dims_.size()));
    return dims_[axis];
}

std::span<float> Tensor::f32() {
    if (dtype_ != DType::f32) throw ShapeError(std::string("tensor is ") + dtype_name(dtype_) + ", expected f32");
    return std::get<std::vector<float>>(storage_);
}
std::span<const float> Tensor::f32() const { return const_cast<Tensor*>(this)->f32(); }

std::span<double> Tensor::f64() {
    if (dtype_ != DType::f64) throw ShapeError(std::string("tensor is ") + dtype_name(dtype_) + ", expected f64");
    return std::get<std::vector<double>>(storage_);
}
std::span<const double> Tensor::f64() const { return const_cast<Tensor*>(this)->f64(); }

std::span<std::uint8_t> Tensor::boolean() {
    if (dtype_ != DType::boolean) throw ShapeError(std::string("tensor is ") + dtype_name(dtype_) + ", expected bool");
    return std::get<std::vector<std::uint8_t>>(storage_);
}
std::span<const std::uint8_t> Tensor::boolean() const { return const_cast<Tensor*>(this)->boolean(); }

double Tensor::at(std::size_t row, std::size_t col) const {
    if (dims_.size() != 2) throw ShapeError("at(row, col) needs a rank-2 tensor");
    if (row >= dims_[0] || col >= dims_[1]) throw ShapeError("index out of range");
    const std::size_t i = row * dims_[1] + col;
    switch (dtype_) {
        case DType::f32: return std::get<std::vector<float>>(storage_)[i];
        case DType::f64: return std::get<std::vector<double>>(storage_)[i];
        case DType::boolean: return std::get<std::vector<std::uint8_t>>(storage_)[i];
    }
    return 0.0;
}

Tensor Tensor::reshaped(Dims dims) const {
    if (dims_product(dims) != numel()) {
        throw ShapeError("cannot reshape " + dims_string(dims_) + " to " + dims_string(dims));
    }
    Tensor t = *this;
    t.dims_ = std::move(dims);
    return t;
}

Tensor Tensor::as(DType dtype) const {
    if (dtype == dtype_) return *this;
    Tensor out(dtype, dims_);
    const std::size_t n = numel();
    for (std::size_t i = 0; i < n; ++i) {
        double v = 0.0;
        switch (dtype_) {
            case DType::f32: v = std::get<std::vector<float>>(storage_)[i]; break;
            case DType::f64: v = std::get<std::vector<double>>(storage_)[i]; break;
            case DType::boolean: v = std::get<std::vector<std::uint8_t>>(storage_)[i]; break;
        }
        switch (dtype) {
            case DType::f32: std::get<std::vector<float>>(out.storage_)[i] = static_cast<float>(v); break;
            case DType::f64: std::get<std::vector<double>>(out.storage_)[i] = v; break;
            case DType::boolean: std::get<std::vector<std::uint8_t>>(out.storage_)[i] = v != 0.0; break;
        }
    }
    return out;
}

bool Tensor::operator==(const Tensor& other) const {
    if (dtype_ != other.dtype_ || dims_ != other.dims_) return false;
    return std::visit(
        [&](const auto& a) {
            using V = std::decay_t<decltype(a)>;
            const auto& b = std::get<V>(other.storage_);
            return a.size() == b.size() &&
                   (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(typename V::value_type)) == 0);
        },
        storage_);
}

} // namespace cag
