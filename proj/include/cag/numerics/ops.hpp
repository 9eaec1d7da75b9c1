#pragma once

#include "cag/numerics/tensor.hpp"

namespace cag {

// Standard matrix product of rank-2 f32/f64 tensors of the same dtype.
// f32 products accumulate in f32, matching the training path.
Tensor matmul(const Tensor& a, const Tensor& b);

// Row-wise softmax. -inf entries are allowed and map to exactly 0; a row
// that is entirely -inf throws DegenerateRowError.
Tensor softmax_rows(const Tensor& x);

Tensor transpose(const Tensor& a);

// Largest |a - b| over elements; dims and dtype family must agree.
double max_abs_diff(const Tensor& a, const Tensor& b);

} // namespace cag
