#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace cag {

enum class SegmentType : std::uint8_t { vlm_ref, vlm_text, vae_target, vae_ref };

const char* segment_type_name(SegmentType t);
SegmentType segment_type_from_name(const std::string& name);

struct SegmentKind {
    SegmentType type = SegmentType::vlm_text;
    std::optional<std::size_t> ref_id;

    static SegmentKind vlm_ref(std::size_t i) { return {SegmentType::vlm_ref, i}; }
    static SegmentKind vlm_text() { return {SegmentType::vlm_text, std::nullopt}; }
    static SegmentKind vae_target() { return {SegmentType::vae_target, std::nullopt}; }
    static SegmentKind vae_ref(std::size_t i) { return {SegmentType::vae_ref, i}; }

    bool is_image() const { return type == SegmentType::vae_target || type == SegmentType::vae_ref; }
    bool operator==(const SegmentKind&) const = default;
};

std::string to_string(const SegmentKind& kind);

struct GridShape {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t area() const { return rows * cols; }
    bool operator==(const GridShape&) const = default;
};

struct ImageSize {
    std::size_t height = 0;
    std::size_t width = 0;
    bool operator==(const ImageSize&) const = default;
};

struct Position {
    std::int64_t row = 0;
    std::int64_t col = 0;
    auto operator<=>(const Position&) const = default;
    Position operator+(const Position& o) const { return {row + o.row, col + o.col}; }
};

struct Segment {
    SegmentKind kind;
    std::size_t start = 0;  // half-open [start, end) in the global sequence
    std::size_t end = 0;
    std::optional<GridShape> grid;
    std::optional<ImageSize> image_size;

    std::size_t size() const { return end - start; }
    bool contains(std::size_t token) const { return token >= start && token < end; }
    bool operator==(const Segment&) const = default;
};

// Token layout of one DiT input sequence:
//   VlmRef(0..N) | VlmText | VaeTarget | VaeRef(0..N)
// A layout may omit every VaeRef segment (reference VAE features dropped);
// positions of the remaining tokens are unchanged in that case.
struct Layout {
    std::size_t n_refs = 0;
    std::vector<Segment> segments;
    std::vector<Position> positions;  // empty until assign_positions
    std::size_t total_len = 0;

    const Segment* find(const SegmentKind& kind) const;
    const Segment& get(const SegmentKind& kind) const;  // throws LayoutError when absent
    const Segment& text() const { return get(SegmentKind::vlm_text()); }
    const Segment& target() const { return get(SegmentKind::vae_target()); }
    bool has_vae_refs() const;
    // Segment holding a global token index.
    const Segment& segment_of(std::size_t token) const;

    bool operator==(const Layout&) const = default;
};

struct LayoutRequest {
    std::size_t n_refs = 0;
    std::vector<std::size_t> vlm_ref_lens;
    std::size_t text_len = 0;
    GridShape target_grid;
    std::vector<GridShape> ref_grids;
    std::vector<ImageSize> ref_image_sizes;
    std::optional<ImageSize> target_image_size;
};

// Canonical segment order with contiguous token ranges. Positions are left
// empty; see assign_positions.
Layout build_layout(const LayoutRequest& request);

// Text token j sits at (j, j). The target grid starts at (text_len, text_len).
// Each following VAE grid starts one step down the diagonal from the last
// token of the previous one: first(next) = last(prev) + (1, 1). VLM reference
// tokens occupy a diagonal band at negative coordinates ending at (-1, -1),
// ordered by reference index.
Layout assign_positions(Layout layout);

inline Layout make_layout(const LayoutRequest& request) { return assign_positions(build_layout(request)); }

// Removes every VaeRef segment. Remaining tokens keep their positions.
Layout without_vae_refs(const Layout& layout);

// Throws LayoutError describing the first violated invariant.
void validate_layout(const Layout& layout);

nlohmann::json layout_to_json(const Layout& layout);
Layout layout_from_json(const nlohmann::json& j);

} // namespace cag
