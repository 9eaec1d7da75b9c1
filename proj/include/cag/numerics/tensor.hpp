#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace cag {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, boolean = 2 };

const char* dtype_name(DType dtype);

using Dims = std::vector<std::size_t>;

std::size_t dims_product(const Dims& dims);

// Row-major dense array. A tensor with no dims is a scalar holding one value.
// Booleans are stored one byte per element (0 or 1).
class Tensor {
public:
    Tensor();
    Tensor(DType dtype, Dims dims);

    static Tensor zeros(DType dtype, Dims dims) { return Tensor(dtype, std::move(dims)); }
    static Tensor from_f32(Dims dims, std::vector<float> data);
    static Tensor from_f64(Dims dims, std::vector<double> data);
    static Tensor from_bool(Dims dims, std::vector<std::uint8_t> data);

    DType dtype() const noexcept { return dtype_; }
    const Dims& dims() const noexcept { return dims_; }
    std::size_t rank() const noexcept { return dims_.size(); }
    std::size_t numel() const noexcept;
    std::size_t dim(std::size_t axis) const;

    std::span<float> f32();
    std::span<const float> f32() const;
    std::span<double> f64();
    std::span<const double> f64() const;
    std::span<std::uint8_t> boolean();
    std::span<const std::uint8_t> boolean() const;

    template <class T> std::span<T> data();
    template <class T> std::span<const T> data() const;

    // Element access for rank-2 tensors, any dtype, widened to double.
    double at(std::size_t row, std::size_t col) const;

    Tensor reshaped(Dims dims) const;
    Tensor as(DType dtype) const;

    // Bitwise equality of dtype, dims and payload.
    bool operator==(const Tensor& other) const;

private:
    using Storage = std::variant<std::vector<float>, std::vector<double>, std::vector<std::uint8_t>>;

    DType dtype_;
    Dims dims_;
    Storage storage_;
};

template <> inline std::span<float> Tensor::data<float>() { return f32(); }
template <> inline std::span<const float> Tensor::data<float>() const { return f32(); }
template <> inline std::span<double> Tensor::data<double>() { return f64(); }
template <> inline std::span<const double> Tensor::data<double>() const { return f64(); }

template <class T> constexpr DType dtype_of();
template <> constexpr DType dtype_of<float>() { return DType::f32; }
template <> constexpr DType dtype_of<double>() { return DType::f64; }

std::string dims_string(const Dims& dims);

} // namespace cag
