#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cag/layout/token_layout.hpp"
#include "cag/mask/attention_mask.hpp"
#include "cag/numerics/tensor.hpp"

namespace cag {

struct AttentionConfig {
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    double rope_base = 10000.0;

    std::size_t head_dim() const { return d_model / n_heads; }
    // Throws ShapeError unless d_model % n_heads == 0 and head_dim % 4 == 0.
    void validate() const;
};

struct AttentionIO {
    Tensor q, k, v;  // [n x d_model], f32 or f64, all the same dtype
    std::vector<Position> positions;
    AttentionMask mask;
};

// Per head, the first half of the head dims is rotated by row angle and the
// second half by column angle; adjacent dims (2p, 2p + 1) form a rotation
// pair with frequency rope_base^(-2p / (head_dim / 2)).
Tensor apply_rope2d(const Tensor& x, std::span<const Position> positions, const AttentionConfig& config);

// softmax(rope(q) rope(k)^T / sqrt(head_dim) + bias) v per head, heads
// concatenated. bias is 0 on allowed keys and -inf elsewhere. A query row
// with no allowed key throws DegenerateRowError.
Tensor masked_attention(const AttentionIO& io, const AttentionConfig& config);

// Attention probabilities, [n_heads x n x n].
Tensor attention_weights(const AttentionIO& io, const AttentionConfig& config);

struct AttentionGrads {
    Tensor dq, dk, dv;
};

AttentionGrads attention_backward(const AttentionIO& io, const AttentionConfig& config, const Tensor& upstream);

} // namespace cag
