#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cag/attention/dit.hpp"
#include "cag/error.hpp"
#include "cag/mask/attention_mask.hpp"
#include "cag/numerics/ops.hpp"

using namespace cag;

namespace {

Layout small_layout() {
    LayoutRequest r;
    r.n_refs = 2;
    r.vlm_ref_lens = {1, 1};
    r.text_len = 3;
    r.target_grid = {2, 2};
    r.ref_grids = {{2, 2}, {2, 2}};
    r.ref_image_sizes = {{32, 32}, {32, 32}};
    return make_layout(r);
}

DitConfig small_config(std::size_t layers = 2) {
    DitConfig c;
    c.attn = {16, 2};
    c.n_layers = layers;
    c.d_ff = 24;
    c.in_dim = 5;
    c.out_dim = 3;
    c.init_std = 0.3;  // large enough that every path carries signal
    return c;
}

std::vector<double> randn(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
    std::normal_distribution<double> nd;
    std::vector<double> x(n);
    for (auto& v : x) v = scale * nd(rng);
    return x;
}

GroundingSet one_word() {
    GroundingSet gs;
    gs.groundings.push_back({{"fox", {{1, 2}}}, 0, {0, 0, 16, 16}});
    return gs;
}

} // namespace

TEST(DitConfig, ValidateAndJson) {
    DitConfig c = small_config();
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(DitConfig::from_json(c.to_json()).to_json(), c.to_json());
    c.attn.d_model = 18;
    EXPECT_THROW(c.validate(), ShapeError);
}

TEST(PositionEmbedding, SinCosPerAxis) {
    const std::vector<Position> pos{{0, 0}, {3, -2}};
    const auto e = position_embedding(pos, 16);
    ASSERT_EQ(e.size(), 32u);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_DOUBLE_EQ(e[2 * i], 0.0);
        EXPECT_DOUBLE_EQ(e[2 * i + 1], 1.0);
        const double w = std::pow(100.0, -static_cast<double>(i) / 4.0);
        EXPECT_NEAR(e[16 + 2 * i], std::sin(3 * w), 1e-15);
        EXPECT_NEAR(e[16 + 8 + 2 * i + 1], std::cos(-2 * w), 1e-15);
    }
}

TEST(DitBlock, ZeroOutputProjectionsGiveIdentity) {
    const Layout l = small_layout();
    const DitConfig cfg = small_config();
    ParamSet p = init_dit_params(cfg, RngKey{1, 0, 0}, DType::f64);
    for (const char* name : {"wo", "w2", "b2"}) {
        for (auto& v : p.get(block_param(0, name)).f64()) v = 0;
    }
    std::mt19937_64 rng(1);
    const Tensor x = Tensor::from_f64({l.total_len, 16}, randn(rng, l.total_len * 16));
    EXPECT_EQ(dit_block_forward(x, l, full_mask(l.total_len), p, 0, cfg), x);
}

TEST(DitBlock, BackwardMatchesFiniteDifferences) {
    const Layout l = small_layout();
    const DitConfig cfg = small_config();
    const AttentionMask mask = compile_mask(l, one_word(), false, 16);
    ParamSet p = init_dit_params(cfg, RngKey{2, 0, 0}, DType::f64);
    std::mt19937_64 rng(2);
    const std::size_t n = l.total_len;
    Tensor x = Tensor::from_f64({n, 16}, randn(rng, n * 16));
    const auto up = randn(rng, n * 16);
    const Tensor dy = Tensor::from_f64({n, 16}, up);
    ParamSet grads = p.zeros_like();
    const Tensor dx = dit_block_backward(x, l, mask, p, 1, cfg, dy, &grads);
    auto loss = [&] {
        const Tensor y = dit_block_forward(x, l, mask, p, 1, cfg);
        double s = 0;
        for (std::size_t i = 0; i < up.size(); ++i) s += y.f64()[i] * up[i];
        return s;
    };
    const double h = 1e-6;
    auto check = [&](std::span<double> v, std::span<const double> g, const std::string& what) {
        for (std::size_t i = 0; i < v.size(); i += 7) {
            const double o = v[i];
            v[i] = o + h;
            const double lp = loss();
            v[i] = o - h;
            const double lm = loss();
            v[i] = o;
            const double num = (lp - lm) / (2 * h);
            EXPECT_NEAR(g[i], num, 1e-6 * std::max(1.0, std::abs(num))) << what << "[" << i << "]";
        }
    };
    check(x.f64(), dx.f64(), "x");
    for (const char* name : {"ln1.g", "ln1.b", "wq", "wk", "wv", "wo", "ln2.g", "w1", "b1", "w2", "b2"}) {
        check(p.get(block_param(1, name)).f64(), grads.get(block_param(1, name)).f64(), name);
    }
    // Layer 0 parameters are untouched by a layer 1 backward.
    for (auto v : grads.get(block_param(0, "wq")).f64()) EXPECT_EQ(v, 0.0);
}

TEST(DitModel, BackwardMatchesFiniteDifferences) {
    const Layout l = small_layout();
    const DitConfig cfg = small_config();
    const AttentionMask mask = compile_mask(l, one_word(), false, 16);
    DitModel model(cfg, init_dit_params(cfg, RngKey{3, 0, 0}, DType::f64));
    std::mt19937_64 rng(3);
    const std::size_t n = l.total_len;
    std::vector<double> feat = randn(rng, n * cfg.in_dim);
    const auto up = randn(rng, n * cfg.out_dim);
    detail::ModelCache<double> cache;
    model.forward<double>(l, feat, mask, &cache);
    ParamSet grads = model.params().zeros_like();
    std::vector<double> dfeat;
    model.backward<double>(cache, up, grads, &dfeat);
    auto loss = [&] {
        const auto y = model.forward<double>(l, feat, mask);
        double s = 0;
        for (std::size_t i = 0; i < up.size(); ++i) s += y[i] * up[i];
        return s;
    };
    const double h = 1e-6;
    auto check = [&](std::span<double> v, std::span<const double> g, const std::string& what) {
        for (std::size_t i = 0; i < v.size(); i += 5) {
            const double o = v[i];
            v[i] = o + h;
            const double lp = loss();
            v[i] = o - h;
            const double lm = loss();
            v[i] = o;
            const double num = (lp - lm) / (2 * h);
            EXPECT_NEAR(g[i], num, 1e-6 * std::max(1.0, std::abs(num))) << what << "[" << i << "]";
        }
    };
    check(feat, dfeat, "features");
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        check(model.params().tensors()[i].f64(), grads.tensors()[i].f64(), model.params().names()[i]);
    }
}

TEST(DitModel, MaskedWordIgnoresOutOfBoxReferenceTokensInOneLayer) {
    const Layout l = small_layout();
    const DitConfig cfg = small_config(1);
    const AttentionMask mask = compile_mask(l, one_word(), false, 16);
    DitModel model(cfg, init_dit_params(cfg, RngKey{4, 0, 0}, DType::f64));
    std::mt19937_64 rng(4);
    std::vector<double> feat = randn(rng, l.total_len * cfg.in_dim);
    const auto y0 = model.forward<double>(l, feat, mask);
    const std::size_t word = l.text().start + 1;
    const auto& ref0 = l.get(SegmentKind::vae_ref(0));
    const auto& ref1 = l.get(SegmentKind::vae_ref(1));
    // Change an out-of-box cell of reference 0, all of reference 1, and the VLM tokens.
    for (std::size_t t : {ref0.start + 3, ref1.start, ref1.start + 2, std::size_t{0}, std::size_t{1}}) {
        for (std::size_t j = 0; j < cfg.in_dim; ++j) feat[t * cfg.in_dim + j] += 1.0;
    }
    const auto y1 = model.forward<double>(l, feat, mask);
    for (std::size_t j = 0; j < cfg.out_dim; ++j) EXPECT_EQ(y0[word * cfg.out_dim + j], y1[word * cfg.out_dim + j]);
    // The in-box cell does reach the word.
    for (std::size_t j = 0; j < cfg.in_dim; ++j) feat[ref0.start * cfg.in_dim + j] += 1.0;
    const auto y2 = model.forward<double>(l, feat, mask);
    EXPECT_NE(y1[word * cfg.out_dim], y2[word * cfg.out_dim]);
}

TEST(DitModel, GradientReachesEveryParameter) {
    const Layout l = small_layout();
    const DitConfig cfg = small_config();
    DitModel model(cfg, init_dit_params(cfg, RngKey{5, 0, 0}, DType::f32));
    std::mt19937_64 rng(5);
    const auto fd = randn(rng, l.total_len * cfg.in_dim);
    const std::vector<float> feat(fd.begin(), fd.end());
    detail::ModelCache<float> cache;
    model.forward<float>(l, feat, full_mask(l.total_len), &cache);
    const std::vector<float> up(l.total_len * cfg.out_dim, 1.0f);
    ParamSet grads = model.params().zeros_like();
    model.backward<float>(cache, up, grads);
    for (std::size_t i = 0; i < grads.size(); ++i) {
        double norm = 0;
        for (float g : grads.tensors()[i].f32()) {
            ASSERT_TRUE(std::isfinite(g));
            norm += std::abs(g);
        }
        // Type embedding rows 0..3 are all used by this layout, so every tensor moves.
        EXPECT_GT(norm, 0.0) << grads.names()[i];
    }
}

TEST(DitModel, F32AgreesWithF64) {
    const Layout l = small_layout();
    const DitConfig cfg = small_config();
    const ParamSet p = init_dit_params(cfg, RngKey{6, 0, 0}, DType::f64);
    const DitModel m64(cfg, p), m32(cfg, p.as(DType::f32));
    std::mt19937_64 rng(6);
    const auto fd = randn(rng, l.total_len * cfg.in_dim);
    const Tensor f = Tensor::from_f64({l.total_len, cfg.in_dim}, fd);
    const AttentionMask mask = compile_mask(l, one_word(), false, 16);
    const Tensor a = m64.forward(l, f, mask), b = m32.forward(l, f, mask);
    EXPECT_LT(max_abs_diff(a, b.as(DType::f64)), 1e-4);
}

TEST(DitModel, RejectsMismatchedParams) {
    const DitConfig cfg = small_config();
    ParamSet p = init_dit_params(cfg, RngKey{}, DType::f32);
    DitConfig other = cfg;
    other.d_ff = 8;
    EXPECT_THROW(DitModel(other, p), ShapeError);
}

TEST(Checkpoint, RoundTrip) {
    const DitConfig cfg = small_config();
    const ParamSet p = init_dit_params(cfg, RngKey{7, 0, 0}, DType::f32);
    const auto dir = std::filesystem::temp_directory_path() / "cag_test_ckpt";
    std::filesystem::remove_all(dir);
    save_checkpoint(dir, cfg, p, {{"mask_mode", "masked"}});
    nlohmann::json manifest;
    const DitModel m = load_checkpoint(dir, &manifest);
    EXPECT_EQ(m.params(), p);
    EXPECT_EQ(m.config().to_json(), cfg.to_json());
    EXPECT_EQ(manifest["extra"]["mask_mode"], "masked");
    std::filesystem::remove(dir / (p.names()[0] + ".cagt"));
    EXPECT_ANY_THROW(load_checkpoint(dir));
    std::filesystem::remove_all(dir);
}
