#include "cag/mask/attention_mask.hpp"

#include <algorithm>
#include <cmath>

#include "cag/error.hpp"

namespace cag {

TokenSet::TokenSet(std::vector<Interval> intervals) {
    std::erase_if(intervals, [](const Interval& iv) { return iv.end <= iv.start; });
    std::sort(intervals.begin(), intervals.end(), [](const Interval& a, const Interval& b) { return a.start < b.start; });
    for (const auto& iv : intervals) {
        if (!intervals_.empty() && iv.start <= intervals_.back().end) {
            intervals_.back().end = std::max(intervals_.back().end, iv.end);
        } else {
            intervals_.push_back(iv);
        }
    }
}

TokenSet TokenSet::range(std::size_t start, std::size_t end) { return TokenSet({Interval{start, end}}); }

TokenSet TokenSet::from_indices(std::vector<std::size_t> indices) {
    std::sort(indices.begin(), indices.end());
    std::vector<Interval> ivs;
    for (auto k : indices) {
        if (!ivs.empty() && k <= ivs.back().end) {
            ivs.back().end = std::max(ivs.back().end, k + 1);
        } else {
            ivs.push_back({k, k + 1});
        }
    }
    TokenSet s;
    s.intervals_ = std::move(ivs);
    return s;
}

std::size_t TokenSet::count() const {
    std::size_t n = 0;
    for (const auto& iv : intervals_) n += iv.size();
    return n;
}

bool TokenSet::contains(std::size_t token) const {
    auto it = std::upper_bound(intervals_.begin(), intervals_.end(), token,
                               [](std::size_t t, const Interval& iv) { return t < iv.start; });
    if (it == intervals_.begin()) return false;
    --it;
    return token < it->end;
}

TokenSet TokenSet::unite(const TokenSet& other) const {
    std::vector<Interval> all = intervals_;
    all.insert(all.end(), other.intervals_.begin(), other.intervals_.end());
    return TokenSet(std::move(all));
}

TokenSet TokenSet::subtract(const TokenSet& other) const {
    std::vector<Interval> out;
    for (auto iv : intervals_) {
        std::size_t cur = iv.start;
        for (const auto& cut : other.intervals_) {
            if (cut.end <= cur || cut.start >= iv.end) continue;
            if (cut.start > cur) out.push_back({cur, cut.start});
            cur = std::max(cur, cut.end);
        }
        if (cur < iv.end) out.push_back({cur, iv.end});
    }
    return TokenSet(std::move(out));
}

TokenSet TokenSet::intersect(const TokenSet& other) const {
    std::vector<Interval> out;
    std::size_t i = 0, j = 0;
    while (i < intervals_.size() && j < other.intervals_.size()) {
        const auto& a = intervals_[i];
        const auto& b = other.intervals_[j];
        const std::size_t lo = std::max(a.start, b.start), hi = std::min(a.end, b.end);
        if (lo < hi) out.push_back({lo, hi});
        (a.end < b.end) ? ++i : ++j;
    }
    return TokenSet(std::move(out));
}

std::vector<std::size_t> TokenSet::indices() const {
    std::vector<std::size_t> out;
    out.reserve(count());
    for (const auto& iv : intervals_)
        for (std::size_t k = iv.start; k < iv.end; ++k) out.push_back(k);
    return out;
}

AttentionMask::AttentionMask(std::size_t n_tokens, TokenSet default_row, std::map<std::size_t, TokenSet> overrides)
    : n_tokens_(n_tokens), default_row_(std::move(default_row)) {
    if (default_row_.max_end() > n_tokens_) throw CompileError("default row exceeds the token count");
    for (auto& [q, row] : overrides) {
        if (q >= n_tokens_) throw CompileError("override for query " + std::to_string(q) + " outside the sequence");
        if (row.max_end() > n_tokens_) throw CompileError("override row for query " + std::to_string(q) + " exceeds the token count");
        if (row == default_row_) continue;
        overrides_.emplace(q, std::move(row));
    }
}

const TokenSet& AttentionMask::row(std::size_t query) const {
    auto it = overrides_.find(query);
    return it == overrides_.end() ? default_row_ : it->second;
}

AttentionMask full_mask(std::size_t n_tokens) { return AttentionMask(n_tokens, TokenSet::range(0, n_tokens)); }

TokenSet bbox_to_token_set(const Layout& layout, std::size_t ref_id, const BBox& b, std::size_t stride_px) {
    if (ref_id >= layout.n_refs) throw MappingError("ref_id " + std::to_string(ref_id) + " out of range");
    const Segment* seg = layout.find(SegmentKind::vae_ref(ref_id));
    if (!seg) throw MappingError("layout has no VAE segment for reference " + std::to_string(ref_id));
    if (!seg->image_size || !seg->grid) throw MappingError("reference segment lacks image size or grid");
    if (stride_px == 0) throw MappingError("token stride must be positive");
    const ImageSize img = *seg->image_size;
    const GridShape grid = *seg->grid;
    if (img.height % stride_px != 0 || img.width % stride_px != 0) {
        throw MappingError("stride " + std::to_string(stride_px) + " does not divide image size " +
                           std::to_string(img.height) + "x" + std::to_string(img.width));
    }
    if (img.height / stride_px != grid.rows || img.width / stride_px != grid.cols) {
        throw MappingError("image size / stride does not match the latent grid of reference " + std::to_string(ref_id));
    }
    if (!(0.0 <= b.x1 && b.x1 < b.x2 && b.x2 <= static_cast<double>(img.width) && 0.0 <= b.y1 && b.y1 < b.y2 &&
          b.y2 <= static_cast<double>(img.height))) {
        throw MappingError("bbox outside or degenerate for reference " + std::to_string(ref_id));
    }
    const double s = static_cast<double>(stride_px);
    const auto r0 = static_cast<std::size_t>(std::floor(b.y1 / s));
    const auto r1 = static_cast<std::size_t>(std::ceil(b.y2 / s));
    const auto c0 = static_cast<std::size_t>(std::floor(b.x1 / s));
    const auto c1 = static_cast<std::size_t>(std::ceil(b.x2 / s));
    std::vector<Interval> rows;
    for (std::size_t r = r0; r < r1; ++r) {
        rows.push_back({seg->start + r * grid.cols + c0, seg->start + r * grid.cols + c1});
    }
    return TokenSet(std::move(rows));
}

AttentionMask compile_mask(const Layout& layout, const GroundingSet& groundings, bool drop_vae, std::size_t stride_px) {
    const std::size_t n = layout.total_len;
    TokenSet default_row = TokenSet::range(0, n);
    if (drop_vae) {
        for (const auto& s : layout.segments) {
            if (s.kind.type == SegmentType::vae_ref) default_row = default_row.subtract(TokenSet::range(s.start, s.end));
        }
    }
    const Segment& text = layout.text();
    const Segment& target = layout.target();
    const TokenSet base = TokenSet::range(text.start, text.end).unite(TokenSet::range(target.start, target.end));

    std::map<std::size_t, TokenSet> overrides;
    for (const auto& g : groundings.groundings) {
        if (g.ref_id >= layout.n_refs) {
            throw CompileError("grounding '" + g.word.text + "' references missing reference " + std::to_string(g.ref_id));
        }
        TokenSet allowed = base;
        if (!drop_vae) {
            if (!layout.find(SegmentKind::vae_ref(g.ref_id))) {
                throw CompileError("grounding '" + g.word.text + "' references a VAE segment absent from the layout");
            }
            allowed = allowed.unite(bbox_to_token_set(layout, g.ref_id, g.bbox_px, stride_px));
        }
        for (const auto& sp : g.word.token_spans) {
            if (sp.end > text.size() || sp.end <= sp.start) {
                throw CompileError("span of '" + g.word.text + "' does not fit the text segment");
            }
            for (std::size_t t = sp.start; t < sp.end; ++t) {
                const std::size_t q = text.start + t;
                auto [it, inserted] = overrides.try_emplace(q, allowed);
                if (!inserted) it->second = it->second.unite(allowed);
            }
        }
    }
    return AttentionMask(n, std::move(default_row), std::move(overrides));
}

Tensor expand_dense(const AttentionMask& mask) {
    const std::size_t n = mask.n_tokens();
    Tensor dense(DType::boolean, {n, n});
    auto d = dense.boolean();
    for (std::size_t q = 0; q < n; ++q) {
        for (const auto& iv : mask.row(q).intervals()) {
            std::fill(d.begin() + static_cast<std::ptrdiff_t>(q * n + iv.start), d.begin() + static_cast<std::ptrdiff_t>(q * n + iv.end), 1);
        }
    }
    return dense;
}

AttentionMask compress_dense(const Tensor& dense) {
    if (dense.dtype() != DType::boolean || dense.rank() != 2 || dense.dim(0) != dense.dim(1)) {
        throw ShapeError("compress_dense needs a square bool tensor");
    }
    const std::size_t n = dense.dim(0);
    auto d = dense.boolean();
    std::vector<TokenSet> rows(n);
    for (std::size_t q = 0; q < n; ++q) {
        std::vector<Interval> ivs;
        for (std::size_t k = 0; k < n; ++k) {
            if (!d[q * n + k]) continue;
            if (!ivs.empty() && ivs.back().end == k) {
                ++ivs.back().end;
            } else {
                ivs.push_back({k, k + 1});
            }
        }
        rows[q] = TokenSet(std::move(ivs));
    }
    std::size_t best = 0, best_count = 0;
    std::vector<bool> seen(n, false);
    for (std::size_t q = 0; q < n; ++q) {
        if (seen[q]) continue;
        std::size_t c = 0;
        for (std::size_t r = q; r < n; ++r) {
            if (!seen[r] && rows[r] == rows[q]) {
                seen[r] = true;
                ++c;
            }
        }
        if (c > best_count) {
            best_count = c;
            best = q;
        }
    }
    std::map<std::size_t, TokenSet> overrides;
    for (std::size_t q = 0; q < n; ++q) {
        if (!(rows[q] == rows[best])) overrides.emplace(q, rows[q]);
    }
    return AttentionMask(n, rows[best], std::move(overrides));
}

namespace {

nlohmann::json intervals_json(const TokenSet& s) {
    auto arr = nlohmann::json::array();
    for (const auto& iv : s.intervals()) arr.push_back(nlohmann::json::array({iv.start, iv.end}));
    return arr;
}

TokenSet intervals_from_json(const nlohmann::json& j) {
    std::vector<Interval> ivs;
    for (const auto& iv : j) {
        const auto s = iv.at(0).get<std::size_t>(), e = iv.at(1).get<std::size_t>();
        if (e <= s) throw CompileError("mask JSON holds an empty interval");
        ivs.push_back({s, e});
    }
    const TokenSet set(ivs);
    if (set.intervals() != ivs) throw CompileError("mask JSON intervals are not sorted, disjoint and merged");
    return set;
}

} // namespace

nlohmann::json mask_to_json(const AttentionMask& mask) {
    nlohmann::json ov = nlohmann::json::object();
    for (const auto& [q, row] : mask.overrides()) ov[std::to_string(q)] = intervals_json(row);
    return {{"n_tokens", mask.n_tokens()}, {"default_row", intervals_json(mask.default_row())}, {"overrides", std::move(ov)}};
}

AttentionMask mask_from_json(const nlohmann::json& j) {
    try {
        std::map<std::size_t, TokenSet> overrides;
        for (const auto& [key, row] : j.at("overrides").items()) {
            std::size_t pos = 0;
            const std::size_t q = std::stoul(key, &pos);
            if (pos != key.size()) throw CompileError("override key '" + key + "' is not an index");
            overrides.emplace(q, intervals_from_json(row));
        }
        return AttentionMask(j.at("n_tokens").get<std::size_t>(), intervals_from_json(j.at("default_row")), std::move(overrides));
    } catch (const nlohmann::json::exception& e) {
        throw CompileError(std::string("malformed mask JSON: ") + e.what());
    } catch (const std::invalid_argument&) {
        throw CompileError("override key is not an index");
    }
}

} // namespace cag
