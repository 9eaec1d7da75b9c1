#pragma once

#include <cstddef>
#include <map>
#include <vector>

#include <json.hpp>

#include "cag/grounding/types.hpp"
#include "cag/layout/token_layout.hpp"
#include "cag/numerics/tensor.hpp"

namespace cag {

struct Interval {
    std::size_t start = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - start; }
    bool operator==(const Interval&) const = default;
};

// Sorted, disjoint, maximally merged half-open intervals.
class TokenSet {
public:
    TokenSet() = default;
    explicit TokenSet(std::vector<Interval> intervals);  // normalizes
    static TokenSet range(std::size_t start, std::size_t end);
    static TokenSet from_indices(std::vector<std::size_t> indices);

    const std::vector<Interval>& intervals() const { return intervals_; }
    bool empty() const { return intervals_.empty(); }
    std::size_t count() const;
    bool contains(std::size_t token) const;
    std::size_t max_end() const { return intervals_.empty() ? 0 : intervals_.back().end; }

    TokenSet unite(const TokenSet& other) const;
    TokenSet subtract(const TokenSet& other) const;
    TokenSet intersect(const TokenSet& other) const;
    std::vector<std::size_t> indices() const;

    bool operator==(const TokenSet&) const = default;

private:
    std::vector<Interval> intervals_;
};

// Allowed-key sets per query row: one shared default row plus per-query
// overrides. Overrides equal to the default row are never stored.
class AttentionMask {
public:
    AttentionMask() = default;
    AttentionMask(std::size_t n_tokens, TokenSet default_row, std::map<std::size_t, TokenSet> overrides = {});

    std::size_t n_tokens() const { return n_tokens_; }
    const TokenSet& default_row() const { return default_row_; }
    const std::map<std::size_t, TokenSet>& overrides() const { return overrides_; }
    const TokenSet& row(std::size_t query) const;
    bool allowed(std::size_t query, std::size_t key) const { return row(query).contains(key); }

    bool operator==(const AttentionMask&) const = default;

private:
    std::size_t n_tokens_ = 0;
    TokenSet default_row_;
    std::map<std::size_t, TokenSet> overrides_;
};

// All-allowed mask over n tokens.
AttentionMask full_mask(std::size_t n_tokens);

// Reference VAE tokens of `ref_id` whose patch footprint intersects the box.
// `stride_px` is the image pixel extent of one latent token on both axes.
TokenSet bbox_to_token_set(const Layout& layout, std::size_t ref_id, const BBox& bbox_px, std::size_t stride_px);

// Referential-word rows may attend only to text, target and their in-box
// reference VAE tokens; all other rows use the default row. With drop_vae the
// default row excludes every VaeRef segment and the in-box part is omitted.
AttentionMask compile_mask(const Layout& layout, const GroundingSet& groundings, bool drop_vae, std::size_t stride_px);

// dense[q][k] = 1 iff k is allowed for q.
Tensor expand_dense(const AttentionMask& mask);
// Inverse of expand_dense. The most frequent row pattern becomes the default
// row (first occurrence wins ties).
AttentionMask compress_dense(const Tensor& dense);

nlohmann::json mask_to_json(const AttentionMask& mask);
AttentionMask mask_from_json(const nlohmann::json& j);

} // namespace cag
