#pragma once

#include <cstdint>

#include <json.hpp>

#include "cag/attention/attention.hpp"

namespace cag {

// Random attention instances in f64 with random 2D positions and random
// masks. Every row keeps at least one key; the last key is hidden from every
// query.
AttentionIO random_attention_instance(std::uint64_t seed, std::uint64_t index, std::size_t n_tokens,
                                      const AttentionConfig& cfg);

struct GradCheckResult {
    std::size_t instances = 0;
    double max_rel_error = 0;  // |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)
    bool masked_keys_zero = true;  // hidden keys get exactly zero gradient and leave the output unchanged
    nlohmann::json to_json() const;
};

// Central differences with step h on L = sum(upstream * out), every entry of q, k, v.
GradCheckResult check_attention_gradients(std::uint64_t seed, std::size_t instances, std::size_t n_tokens,
                                          const AttentionConfig& cfg, double h = 1e-5);

struct EquivCheckResult {
    std::size_t instances = 0;
    double max_abs_diff = 0;
    nlohmann::json to_json() const;
};

// Masked attention over all keys against softmax over only the allowed keys.
EquivCheckResult check_gather_equivalence(std::uint64_t seed, std::size_t instances, std::size_t n_tokens,
                                          const AttentionConfig& cfg);

} // namespace cag
