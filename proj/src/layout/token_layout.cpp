#include "cag/layout/token_layout.hpp"

#include <set>

#include "cag/error.hpp"

namespace cag {

const char* segment_type_name(SegmentType t) {
    switch (t) {
        case SegmentType::vlm_ref: return "vlm_ref";
        case SegmentType::vlm_text: return "vlm_text";
        case SegmentType::vae_target: return "vae_target";
        case SegmentType::vae_ref: return "vae_ref";
    }
    return "unknown";
}

SegmentType segment_type_from_name(const std::string& name) {
    if (name == "vlm_ref") return SegmentType::vlm_ref;
    if (name == "vlm_text") return SegmentType::vlm_text;
    if (name == "vae_target") return SegmentType::vae_target;
    if (name == "vae_ref") return SegmentType::vae_ref;
    throw LayoutError("unknown segment kind '" + name + "'");
}

std::string to_string(const SegmentKind& kind) {
    std::string s = segment_type_name(kind.type);
    if (kind.ref_id) s += "(" + std::to_string(*kind.ref_id) + ")";
    return s;
}

const Segment* Layout::find(const SegmentKind& kind) const {
    for (const auto& s : segments) {
        if (s.kind == kind) return &s;
    }
    return nullptr;
}

const Segment& Layout::get(const SegmentKind& kind) const {
    if (const Segment* s = find(kind)) return *s;
    throw LayoutError("layout has no " + to_string(kind) + " segment");
}

bool Layout::has_vae_refs() const {
    for (const auto& s : segments) {
        if (s.kind.type == SegmentType::vae_ref) return true;
    }
    return false;
}

const Segment& Layout::segment_of(std::size_t token) const {
    for (const auto& s : segments) {
        if (s.contains(token)) return s;
    }
    throw LayoutError("token " + std::to_string(token) + " outside layout of length " + std::to_string(total_len));
}

Layout build_layout(const LayoutRequest& r) {
    if (r.n_refs == 0) throw LayoutError("n_refs must be at least 1");
    if (r.vlm_ref_lens.size() != r.n_refs) throw LayoutError("vlm_ref_lens length differs from n_refs");
    if (r.ref_grids.size() != r.n_refs) throw LayoutError("ref_grids length differs from n_refs");
    if (r.ref_image_sizes.size() != r.n_refs) throw LayoutError("ref_image_sizes length differs from n_refs");
    if (r.text_len == 0) throw LayoutError("text_len must be positive");
    if (r.target_grid.area() == 0) throw LayoutError("target grid has zero size");

    Layout layout;
    layout.n_refs = r.n_refs;
    std::size_t cursor = 0;
    auto push = [&](SegmentKind kind, std::size_t len, std::optional<GridShape> grid, std::optional<ImageSize> img) {
        layout.segments.push_back(Segment{kind, cursor, cursor + len, grid, img});
        cursor += len;
    };
    for (std::size_t i = 0; i < r.n_refs; ++i) {
        if (r.vlm_ref_lens[i] == 0) throw LayoutError("vlm_ref_lens[" + std::to_string(i) + "] is zero");
        push(SegmentKind::vlm_ref(i), r.vlm_ref_lens[i], std::nullopt, std::nullopt);
    }
    push(SegmentKind::vlm_text(), r.text_len, std::nullopt, std::nullopt);
    push(SegmentKind::vae_target(), r.target_grid.area(), r.target_grid, r.target_image_size);
    for (std::size_t i = 0; i < r.n_refs; ++i) {
        if (r.ref_grids[i].area() == 0) throw LayoutError("ref grid " + std::to_string(i) + " has zero size");
        const auto& img = r.ref_image_sizes[i];
        if (img.height == 0 || img.width == 0) throw LayoutError("ref image " + std::to_string(i) + " has zero size");
        push(SegmentKind::vae_ref(i), r.ref_grids[i].area(), r.ref_grids[i], img);
    }
    layout.total_len = cursor;
    return layout;
}

namespace {

GridShape grid_of(const Segment& s) {
    if (!s.grid) throw LayoutError(to_string(s.kind) + " segment has no grid");
    return *s.grid;
}

} // namespace

Layout assign_positions(Layout layout) {
    validate_layout(layout);
    layout.positions.assign(layout.total_len, Position{});

    std::size_t vlm_total = 0;
    for (const auto& s : layout.segments) {
        if (s.kind.type == SegmentType::vlm_ref) vlm_total += s.size();
    }

    const Segment& text = layout.text();
    const auto text_len = static_cast<std::int64_t>(text.size());

    std::int64_t vlm_cursor = -static_cast<std::int64_t>(vlm_total);
    Position next_origin{text_len, text_len};
    for (const auto& s : layout.segments) {
        switch (s.kind.type) {
            case SegmentType::vlm_ref:
                for (std::size_t t = s.start; t < s.end; ++t, ++vlm_cursor) layout.positions[t] = {vlm_cursor, vlm_cursor};
                break;
            case SegmentType::vlm_text:
                for (std::size_t t = s.start; t < s.end; ++t) {
                    const auto j = static_cast<std::int64_t>(t - s.start);
                    layout.positions[t] = {j, j};
                }
                break;
            case SegmentType::vae_target:
            case SegmentType::vae_ref: {
                const GridShape g = grid_of(s);
                const Position origin = next_origin;
                for (std::size_t r = 0; r < g.rows; ++r) {
                    for (std::size_t c = 0; c < g.cols; ++c) {
                        layout.positions[s.start + r * g.cols + c] =
                            origin + Position{static_cast<std::int64_t>(r), static_cast<std::int64_t>(c)};
                    }
                }
                const Position last = layout.positions[s.end - 1];
                next_origin = last + Position{1, 1};
                break;
            }
        }
    }
    return layout;
}

Layout without_vae_refs(const Layout& layout) {
    Layout out;
    out.n_refs = layout.n_refs;
    for (const auto& s : layout.segments) {
        if (s.kind.type == SegmentType::vae_ref) continue;
        out.segments.push_back(s);
    }
    out.total_len = out.segments.empty() ? 0 : out.segments.back().end;
    if (!layout.positions.empty()) {
        out.positions.assign(layout.positions.begin(), layout.positions.begin() + static_cast<std::ptrdiff_t>(out.total_len));
    }
    return out;
}

void validate_layout(const Layout& layout) {
    if (layout.n_refs == 0) throw LayoutError("n_refs must be at least 1");
    std::vector<SegmentKind> expected;
    for (std::size_t i = 0; i < layout.n_refs; ++i) expected.push_back(SegmentKind::vlm_ref(i));
    expected.push_back(SegmentKind::vlm_text());
    expected.push_back(SegmentKind::vae_target());
    const bool with_refs = layout.segments.size() > expected.size();
    if (with_refs) {
        for (std::size_t i = 0; i < layout.n_refs; ++i) expected.push_back(SegmentKind::vae_ref(i));
    }
    if (layout.segments.size() != expected.size()) {
        throw LayoutError("layout has " + std::to_string(layout.segments.size()) + " segments, expected " +
                          std::to_string(expected.size()));
    }
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const Segment& s = layout.segments[i];
        if (!(s.kind == expected[i])) {
            throw LayoutError("segment " + std::to_string(i) + " is " + to_string(s.kind) + ", expected " +
                              to_string(expected[i]));
        }
        if (s.start != cursor) throw LayoutError(to_string(s.kind) + " does not start where the previous segment ends");
        if (s.end <= s.start) throw LayoutError(to_string(s.kind) + " is empty");
        if (s.kind.is_image()) {
            if (!s.grid) throw LayoutError(to_string(s.kind) + " needs a grid");
            if (s.grid->area() != s.size()) throw LayoutError(to_string(s.kind) + " length differs from its grid area");
        } else if (s.grid) {
            throw LayoutError(to_string(s.kind) + " must not carry a grid");
        }
        cursor = s.end;
    }
    if (cursor != layout.total_len) throw LayoutError("segments do not cover [0, total_len)");
    if (!layout.positions.empty() && layout.positions.size() != layout.total_len) {
        throw LayoutError("positions length differs from total_len");
    }
    if (!layout.positions.empty()) {
        std::set<Position> seen;
        for (const auto& s : layout.segments) {
            if (!s.kind.is_image()) continue;
            for (std::size_t k = s.start; k < s.end; ++k) {
                if (!seen.insert(layout.positions[k]).second) {
                    throw LayoutError("image token " + std::to_string(k) + " shares its position with another image token");
                }
            }
        }
    }
}

nlohmann::json layout_to_json(const Layout& layout) {
    using nlohmann::json;
    json segs = json::array();
    for (const auto& s : layout.segments) {
        json js;
        js["kind"] = segment_type_name(s.kind.type);
        js["ref_id"] = s.kind.ref_id ? json(*s.kind.ref_id) : json(nullptr);
        js["start"] = s.start;
        js["end"] = s.end;
        js["grid"] = s.grid ? json::array({s.grid->rows, s.grid->cols}) : json(nullptr);
        js["image_size"] = s.image_size ? json::array({s.image_size->height, s.image_size->width}) : json(nullptr);
        segs.push_back(std::move(js));
    }
    json pos = json::array();
    for (const auto& p : layout.positions) pos.push_back(json::array({p.row, p.col}));
    return json{{"n_refs", layout.n_refs}, {"total_len", layout.total_len}, {"segments", std::move(segs)},
                {"positions", std::move(pos)}};
}

Layout layout_from_json(const nlohmann::json& j) {
    try {
        Layout layout;
        layout.n_refs = j.at("n_refs").get<std::size_t>();
        layout.total_len = j.at("total_len").get<std::size_t>();
        for (const auto& js : j.at("segments")) {
            Segment s;
            s.kind.type = segment_type_from_name(js.at("kind").get<std::string>());
            if (!js.at("ref_id").is_null()) s.kind.ref_id = js.at("ref_id").get<std::size_t>();
            s.start = js.at("start").get<std::size_t>();
            s.end = js.at("end").get<std::size_t>();
            if (!js.at("grid").is_null()) s.grid = GridShape{js["grid"].at(0).get<std::size_t>(), js["grid"].at(1).get<std::size_t>()};
            if (!js.at("image_size").is_null()) {
                s.image_size = ImageSize{js["image_size"].at(0).get<std::size_t>(), js["image_size"].at(1).get<std::size_t>()};
            }
            layout.segments.push_back(s);
        }
        for (const auto& p : j.at("positions")) layout.positions.push_back({p.at(0).get<std::int64_t>(), p.at(1).get<std::int64_t>()});
        validate_layout(layout);
        return layout;
    } catch (const nlohmann::json::exception& e) {
        throw LayoutError(std::string("malformed layout JSON: ") + e.what());
    }
}

} // namespace cag
