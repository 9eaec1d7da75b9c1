#include <set>

#include <gtest/gtest.h>

#include "cag/error.hpp"
#include "cag/layout/token_layout.hpp"

using namespace cag;

namespace {

LayoutRequest request(std::size_t n, std::size_t text, GridShape target, std::vector<GridShape> refs,
                      std::size_t vlm = 1) {
    LayoutRequest r;
    r.n_refs = n;
    r.text_len = text;
    r.target_grid = target;
    r.ref_grids = refs;
    for (std::size_t i = 0; i < n; ++i) {
        r.vlm_ref_lens.push_back(vlm);
        r.ref_image_sizes.push_back({refs[i].rows * 16, refs[i].cols * 16});
    }
    return r;
}

} // namespace

TEST(Layout, CanonicalOrderAndLength) {
    LayoutRequest r = request(2, 12, {32, 32}, {{32, 32}, {32, 32}}, 64);
    const Layout l = build_layout(r);
    EXPECT_EQ(l.total_len, 3212u);
    const std::vector<SegmentKind> order{SegmentKind::vlm_ref(0), SegmentKind::vlm_ref(1), SegmentKind::vlm_text(),
                                         SegmentKind::vae_target(), SegmentKind::vae_ref(0), SegmentKind::vae_ref(1)};
    ASSERT_EQ(l.segments.size(), order.size());
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        EXPECT_EQ(l.segments[i].kind, order[i]);
        EXPECT_EQ(l.segments[i].start, cursor);
        cursor = l.segments[i].end;
    }
    EXPECT_EQ(cursor, 3212u);
    EXPECT_TRUE(l.positions.empty());
}

TEST(Layout, MinimalCase) {
    EXPECT_EQ(build_layout(request(1, 1, {1, 1}, {{1, 1}})).total_len, 4u);
}

TEST(Layout, PositionsByHand) {
    const Layout l = make_layout(request(2, 3, {2, 2}, {{2, 2}, {2, 2}}, 2));
    const auto& p = l.positions;
    const auto& t = l.text();
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(p[t.start + j], (Position{std::int64_t(j), std::int64_t(j)}));
    const auto& tg = l.target();
    EXPECT_EQ(p[tg.start + 0], (Position{3, 3}));
    EXPECT_EQ(p[tg.start + 1], (Position{3, 4}));
    EXPECT_EQ(p[tg.start + 2], (Position{4, 3}));
    EXPECT_EQ(p[tg.start + 3], (Position{4, 4}));
    const auto& r0 = l.get(SegmentKind::vae_ref(0));
    const auto& r1 = l.get(SegmentKind::vae_ref(1));
    EXPECT_EQ(p[r0.start], (Position{5, 5}));
    EXPECT_EQ(p[r1.start], (p[r0.end - 1] + Position{1, 1}));
    // VLM reference tokens sit on the negative diagonal, ending at (-1, -1).
    EXPECT_EQ(p[l.get(SegmentKind::vlm_ref(1)).end - 1], (Position{-1, -1}));
    EXPECT_EQ(p[0], (Position{-4, -4}));
}

TEST(Layout, NonSquareGridsChainOnTheDiagonal) {
    const Layout l = make_layout(request(3, 2, {3, 5}, {{1, 4}, {6, 2}, {2, 2}}));
    const SegmentKind kinds[] = {SegmentKind::vae_target(), SegmentKind::vae_ref(0), SegmentKind::vae_ref(1),
                                 SegmentKind::vae_ref(2)};
    for (std::size_t i = 1; i < 4; ++i) {
        const auto& prev = l.get(kinds[i - 1]);
        const auto& cur = l.get(kinds[i]);
        EXPECT_EQ(l.positions[cur.start], (l.positions[prev.end - 1] + Position{1, 1}));
        for (std::size_t k = cur.start; k < cur.end; ++k) {
            const std::size_t local = k - cur.start;
            EXPECT_EQ(l.positions[k], (l.positions[cur.start] + Position{std::int64_t(local / cur.grid->cols),
                                                                          std::int64_t(local % cur.grid->cols)}));
        }
    }
    std::set<Position> seen;
    for (const auto& s : l.segments) {
        if (!s.kind.is_image()) continue;
        for (std::size_t k = s.start; k < s.end; ++k) EXPECT_TRUE(seen.insert(l.positions[k]).second);
    }
    validate_layout(l);
}

TEST(Layout, Errors) {
    EXPECT_THROW(build_layout(request(0, 1, {1, 1}, {})), LayoutError);
    EXPECT_THROW(build_layout(request(1, 1, {0, 1}, {{1, 1}})), LayoutError);
    EXPECT_THROW(build_layout(request(1, 0, {1, 1}, {{1, 1}})), LayoutError);
    auto r = request(2, 1, {1, 1}, {{1, 1}, {1, 1}});
    r.vlm_ref_lens.pop_back();
    EXPECT_THROW(build_layout(r), LayoutError);
    r = request(2, 1, {1, 1}, {{1, 1}, {1, 1}});
    r.ref_image_sizes.pop_back();
    EXPECT_THROW(build_layout(r), LayoutError);
    r = request(1, 1, {1, 1}, {{1, 1}});
    r.vlm_ref_lens = {0};
    EXPECT_THROW(build_layout(r), LayoutError);
}

TEST(Layout, ValidateCatchesBrokenLayouts) {
    Layout l = make_layout(request(2, 3, {2, 2}, {{2, 2}, {2, 2}}));
    validate_layout(l);
    Layout overlap = l;
    overlap.positions[overlap.get(SegmentKind::vae_ref(1)).start] = overlap.positions[overlap.target().start];
    EXPECT_THROW(validate_layout(overlap), LayoutError);
    Layout gap = l;
    gap.segments[1].start += 1;
    EXPECT_THROW(validate_layout(gap), LayoutError);
    Layout swapped = l;
    std::swap(swapped.segments[0].kind, swapped.segments[1].kind);
    EXPECT_THROW(validate_layout(swapped), LayoutError);
}

TEST(Layout, WithoutVaeRefsKeepsPositions) {
    const Layout l = make_layout(request(2, 3, {2, 2}, {{2, 2}, {3, 3}}));
    const Layout r = without_vae_refs(l);
    EXPECT_FALSE(r.has_vae_refs());
    EXPECT_TRUE(l.has_vae_refs());
    EXPECT_EQ(r.total_len, l.total_len - 4 - 9);
    for (std::size_t k = 0; k < r.total_len; ++k) EXPECT_EQ(r.positions[k], l.positions[k]);
    validate_layout(r);
    EXPECT_THROW(r.get(SegmentKind::vae_ref(0)), LayoutError);
}

TEST(Layout, SegmentOf) {
    const Layout l = make_layout(request(1, 2, {1, 2}, {{1, 1}}, 3));
    EXPECT_EQ(l.segment_of(0).kind, SegmentKind::vlm_ref(0));
    EXPECT_EQ(l.segment_of(3).kind, SegmentKind::vlm_text());
    EXPECT_EQ(l.segment_of(l.total_len - 1).kind, SegmentKind::vae_ref(0));
    EXPECT_THROW(l.segment_of(l.total_len), LayoutError);
}

TEST(Layout, JsonRoundTrip) {
    auto r = request(3, 5, {4, 3}, {{2, 2}, {1, 5}, {3, 3}}, 2);
    r.target_image_size = ImageSize{64, 48};
    const Layout l = make_layout(r);
    const auto j = layout_to_json(l);
    const Layout back = layout_from_json(j);
    EXPECT_EQ(back, l);
    EXPECT_EQ(layout_to_json(back).dump(), j.dump());
    EXPECT_EQ(layout_from_json(layout_to_json(without_vae_refs(l))), without_vae_refs(l));
}

TEST(Layout, JsonRejectsBadInput) {
    const Layout l = make_layout(request(1, 1, {1, 1}, {{1, 1}}));
    auto j = layout_to_json(l);
    j["segments"][0]["kind"] = "bogus";
    EXPECT_ANY_THROW(layout_from_json(j));
    auto k = layout_to_json(l);
    k["positions"].erase(0);
    EXPECT_ANY_THROW(layout_from_json(k));
}
