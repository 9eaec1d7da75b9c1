#include <cmath>

#include <gtest/gtest.h>

#include "cag/dropout/conditioning.hpp"
#include "cag/error.hpp"

using namespace cag;

namespace {

ConditioningBundle bundle() {
    ConditioningBundle b;
    b.vlm_ref = std::vector<Tensor>{Tensor::from_f32({1, 2}, {1, 2}), Tensor::from_f32({1, 2}, {3, 4})};
    b.vlm_text = Tensor::from_f32({3, 2}, {1, 1, 1, 1, 1, 1});
    b.vae_ref = std::vector<Tensor>{Tensor::from_f32({4, 2}, std::vector<float>(8, 5.0f))};
    b.vae_target = Tensor::from_f32({4, 2}, std::vector<float>(8, 7.0f));
    return b;
}

Layout layout() {
    LayoutRequest r;
    r.n_refs = 1;
    r.vlm_ref_lens = {2};
    r.text_len = 3;
    r.target_grid = {2, 2};
    r.ref_grids = {{2, 2}};
    r.ref_image_sizes = {{32, 32}};
    return make_layout(r);
}

} // namespace

TEST(Dropout, ConfigValidation) {
    EXPECT_NO_THROW(DropoutConfig{}.validate());
    EXPECT_THROW((DropoutConfig{1.5, 0.1}.validate()), InputError);
    EXPECT_THROW((DropoutConfig{0.5, -0.1}.validate()), InputError);
    EXPECT_THROW((DropoutConfig{std::nan(""), 0.1}.validate()), InputError);
}

TEST(Dropout, DeterministicPerKey) {
    const DropoutConfig c{0.5, 0.5};
    for (std::uint64_t i = 0; i < 100; ++i) {
        const RngKey k = RngKey{3, 0, 0}.split(i);
        EXPECT_EQ(sample_drop(c, k), sample_drop(c, k));
    }
}

TEST(Dropout, ExtremeProbabilities) {
    for (std::uint64_t i = 0; i < 1000; ++i) {
        const RngKey k = RngKey{4, 0, 0}.split(i);
        EXPECT_FALSE(sample_drop({0.0, 0.0}, k).drop_vae);
        EXPECT_FALSE(sample_drop({0.0, 0.0}, k).drop_text);
        EXPECT_TRUE(sample_drop({1.0, 1.0}, k).drop_vae);
        EXPECT_TRUE(sample_drop({1.0, 1.0}, k).drop_text);
    }
}

TEST(Dropout, RatesWithinBinomialBounds) {
    const std::size_t n = 10000;
    for (double p : {0.1, 0.3, 0.5, 0.7}) {
        std::size_t vae = 0, text = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto d = sample_drop({p, p}, RngKey{5, 0, 0}.split(i));
            vae += d.drop_vae;
            text += d.drop_text;
        }
        const double sigma = std::sqrt(n * p * (1 - p));
        EXPECT_LE(std::abs(vae - n * p), 3 * sigma) << p;
        EXPECT_LE(std::abs(text - n * p), 3 * sigma) << p;
    }
}

TEST(Dropout, DecisionsIndependent) {
    const std::size_t n = 100000;
    double sv = 0, st = 0, svt = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto d = sample_drop({0.5, 0.3}, RngKey{6, 0, 0}.split(i));
        sv += d.drop_vae, st += d.drop_text, svt += d.drop_vae && d.drop_text;
    }
    const double mv = sv / n, mt = st / n;
    const double corr = (svt / n - mv * mt) / std::sqrt(mv * (1 - mv) * mt * (1 - mt));
    EXPECT_LT(std::abs(corr), 0.02);
}

TEST(Dropout, ApplyDropRemovesVaeAsASet) {
    const auto b = bundle();
    const auto out = apply_drop(b, {true, false}, false);
    EXPECT_FALSE(out.vae_ref.has_value());
    EXPECT_TRUE(out.drop_vae);
    EXPECT_EQ(*out.vlm_text, *b.vlm_text);
    EXPECT_EQ(out.vae_target, b.vae_target);
}

TEST(Dropout, TextDropUsesNullOfSameShape) {
    const auto b = bundle();
    const auto zeroed = apply_drop(b, {false, true}, false);
    EXPECT_EQ(*zeroed.vlm_text, Tensor(DType::f32, {3, 2}));
    EXPECT_EQ((*zeroed.vlm_ref)[0], (*b.vlm_ref)[0]);
    EXPECT_TRUE(zeroed.vae_ref.has_value());
    const Tensor null = Tensor::from_f32({3, 2}, {9, 9, 9, 9, 9, 9});
    EXPECT_EQ(*apply_drop(b, {false, true}, false, &null).vlm_text, null);
    const Tensor wrong(DType::f32, {2, 2});
    EXPECT_THROW(apply_drop(b, {false, true}, false, &wrong), ShapeError);
    const auto full = apply_drop(b, {false, true}, true);
    EXPECT_EQ((*full.vlm_ref)[1], Tensor(DType::f32, {1, 2}));
}

TEST(Dropout, SampleConditioningNeedsFullBundle) {
    auto b = bundle();
    b.vae_ref.reset();
    EXPECT_THROW(sample_conditioning(b, {}, RngKey{}), InputError);
    const auto ok = sample_conditioning(bundle(), {1.0, 0.0}, RngKey{});
    EXPECT_FALSE(ok.vae_ref.has_value());
}

TEST(Dropout, ConditionSequence) {
    const Layout l = layout();
    GroundingSet gs;
    gs.groundings.push_back({{"cup", {{0, 1}}}, 0, {0, 0, 16, 32}});
    const auto kept = condition_sequence(l, gs, false, true, 16);
    EXPECT_EQ(kept.layout, l);
    EXPECT_EQ(kept.mask, compile_mask(l, gs, false, 16));
    const auto dropped = condition_sequence(l, gs, true, true, 16);
    EXPECT_EQ(dropped.layout, without_vae_refs(l));
    EXPECT_EQ(dropped.mask.n_tokens(), dropped.layout.total_len);
    const auto full = condition_sequence(l, gs, true, false, 16);
    EXPECT_EQ(full.mask, full_mask(dropped.layout.total_len));
}

TEST(Cfg, CombineIsExactAtEndpoints) {
    const Tensor c = Tensor::from_f64({3}, {1.0, 0.1, -7.3}), u = Tensor::from_f64({3}, {0.3, 2.0, 1e-9});
    EXPECT_EQ(cfg_combine(c, u, 1.0), c);
    EXPECT_EQ(cfg_combine(c, u, 0.0), u);
    const Tensor s = cfg_combine(c, u, 3.0);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s.f64()[i], u.f64()[i] + 3.0 * (c.f64()[i] - u.f64()[i]), 1e-12);
    EXPECT_THROW(cfg_combine(c, Tensor(DType::f64, {2}), 1.0), ShapeError);
    EXPECT_THROW(cfg_combine(c, u.as(DType::f32), 1.0), ShapeError);
}
