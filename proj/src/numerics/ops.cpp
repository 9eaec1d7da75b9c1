#include "cag/numerics/ops.hpp"

#include <algorithm>
#include <cmath>

#include "cag/error.hpp"
#include "cag/numerics/kernels.hpp"

namespace cag {

namespace {

void require_float_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw ShapeError(std::string(what) + " must be rank 2, got " + dims_string(t.dims()));
    if (t.dtype() == DType::boolean) throw ShapeError(std::string(what) + " must be f32 or f64");
}

template <class T>
Tensor matmul_typed(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c(dtype_of<T>(), {m, n});
    kernels::gemm(a.data<T>().data(), b.data<T>().data(), c.data<T>().data(), m, k, n);
    return c;
}

template <class T>
Tensor softmax_typed(const Tensor& x) {
    Tensor out = x;
    auto d = out.data<T>();
    const std::size_t m = x.dim(0), n = x.dim(1);
    for (std::size_t i = 0; i < m; ++i) {
        if (!kernels::softmax_row(d.data() + i * n, n)) {
            throw DegenerateRowError("softmax row " + std::to_string(i) + " has no finite entry");
        }
    }
    return out;
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_float_matrix(a, "matmul lhs");
    require_float_matrix(b, "matmul rhs");
    if (a.dtype() != b.dtype()) throw ShapeError("matmul operands have different dtypes");
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul inner dims differ: " + dims_string(a.dims()) + " * " + dims_string(b.dims()));
    }
    return a.dtype() == DType::f32 ? matmul_typed<float>(a, b) : matmul_typed<double>(a, b);
}

Tensor softmax_rows(const Tensor& x) {
    require_float_matrix(x, "softmax input");
    return x.dtype() == DType::f32 ? softmax_typed<float>(x) : softmax_typed<double>(x);
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose needs rank 2");
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out(a.dtype(), {n, m});
    auto copy = [&](auto src, auto dst) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    };
    switch (a.dtype()) {
        case DType::f32: copy(a.f32(), out.f32()); break;
        case DType::f64: copy(a.f64(), out.f64()); break;
        case DType::boolean: copy(a.boolean(), out.boolean()); break;
    }
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.dims() != b.dims()) throw ShapeError("max_abs_diff dims differ");
    const Tensor x = a.as(DType::f64), y = b.as(DType::f64);
    double worst = 0.0;
    auto xs = x.f64(), ys = y.f64();
    for (std::size_t i = 0; i < xs.size(); ++i) worst = std::max(worst, std::abs(xs[i] - ys[i]));
    return worst;
}

} // namespace cag
