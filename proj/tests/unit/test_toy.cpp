#include <cmath>

#include <gtest/gtest.h>

#include "cag/error.hpp"
#include "cag/harness/config.hpp"
#include "cag/harness/toy.hpp"
#include "cag/harness/train.hpp"
#include "cag/mask/attention_mask.hpp"

using namespace cag;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    auto d = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(d);
    return d;
}

TrainOptions quick(std::size_t steps) {
    TrainOptions o;
    o.steps = steps;
    o.batch = 4;
    o.sampler_steps = 2;
    o.eval_scenes = 8;
    o.model.n_layers = 1;
    o.model.attn = {32, 2};
    o.model.d_ff = 32;
    return o;
}

const ToyDataset& dataset() {
    static const ToyDataset ds = gen_toy_dataset(3, 64, 16, ToySpec{});
    return ds;
}

} // namespace

TEST(ToyData, Deterministic) {
    const auto a = gen_toy_dataset(5, 8, 4, ToySpec{});
    const auto b = gen_toy_dataset(5, 8, 4, ToySpec{});
    EXPECT_EQ(a.train.target, b.train.target);
    EXPECT_EQ(a.eval.ref_vae, b.eval.ref_vae);
    EXPECT_EQ(a.train.scenes, b.train.scenes);
    const auto c = gen_toy_dataset(6, 8, 4, ToySpec{});
    EXPECT_FALSE(a.train.target == c.train.target);
    // The eval split does not depend on the train size.
    EXPECT_EQ(gen_toy_dataset(5, 20, 4, ToySpec{}).eval.target, a.eval.target);
}

TEST(ToyData, ScenesAreConsistent) {
    const auto& ds = dataset();
    const ToySpec& sp = ds.spec;
    const std::size_t G = sp.grid, F = sp.feat_dim, N = sp.n_refs, A = G * G;
    const Layout L = ds.layout();
    for (std::size_t s = 0; s < ds.train.size(); ++s) {
        const ToyScene& sc = ds.train.scenes[s];
        ASSERT_EQ(sc.tokens.size(), 2 * N - 1);
        EXPECT_NE(sc.ref_class[0], sc.ref_class[1]);
        validate_grounding_set(sc.groundings, ref_image_sizes(L));
        // Each grounding box covers exactly the subject rectangle of its reference.
        for (const auto& g : sc.groundings.groundings) {
            const TokenSet cells = bbox_to_token_set(L, g.ref_id, g.bbox_px, sp.stride_px);
            const auto& seg = L.get(SegmentKind::vae_ref(g.ref_id));
            const CellRect& r = sc.subject[g.ref_id];
            EXPECT_EQ(cells.count(), r.rows * r.cols);
            for (std::size_t k : cells.indices()) EXPECT_TRUE(r.contains((k - seg.start) / G, (k - seg.start) % G));
            EXPECT_EQ(g.word.text, ds.vocab[sc.ref_class[g.ref_id]]);
        }
        // Subject cells hold the appearance code exactly.
        for (std::size_t i = 0; i < N; ++i) {
            for (std::size_t cell = 0; cell < A; ++cell) {
                if (!sc.subject[i].contains(cell / G, cell % G)) continue;
                for (std::size_t f = 0; f < F; ++f)
                    ASSERT_EQ(ds.train.ref_vae.f32()[((s * N + i) * A + cell) * F + f], ds.train.colors.f32()[(s * N + i) * F + f]);
            }
        }
        const auto replay = replay_target(ds, ds.train, s);
        for (std::size_t i = 0; i < A * F; ++i) ASSERT_EQ(replay[i], ds.train.target.f32()[s * A * F + i]);
    }
}

TEST(ToyData, FullBboxPolicy) {
    ToySpec sp;
    sp.bbox_policy = "full";
    const auto ds = gen_toy_dataset(1, 4, 1, sp);
    for (const auto& sc : ds.train.scenes)
        for (const auto& r : sc.subject) EXPECT_EQ(r, (CellRect{0, 0, sp.grid, sp.grid}));
    sp.bbox_policy = "nope";
    EXPECT_THROW(sp.validate(), InputError);
}

TEST(ToyData, SaveLoadRoundTrip) {
    const auto dir = temp_dir("cag_test_toy");
    const auto& ds = dataset();
    save_toy_dataset(ds, dir);
    const ToyDataset back = load_toy_dataset(dir);
    EXPECT_EQ(back.seed, ds.seed);
    EXPECT_EQ(back.vocab, ds.vocab);
    EXPECT_EQ(back.vocab_emb, ds.vocab_emb);
    EXPECT_EQ(back.train.scenes, ds.train.scenes);
    EXPECT_EQ(back.train.target, ds.train.target);
    EXPECT_EQ(back.eval.vlm_ref, ds.eval.vlm_ref);
    EXPECT_EQ(back.spec.to_json(), ds.spec.to_json());
    std::filesystem::remove(dir / "eval_target.cagt");
    EXPECT_ANY_THROW(load_toy_dataset(dir));
    std::filesystem::remove_all(dir);
}

TEST(ToyData, FeaturesFollowTheStreamLayout) {
    const auto& ds = dataset();
    const Layout L = ds.layout();
    const std::size_t F = ds.spec.feat_dim, D = ds.spec.in_dim(), A = ds.spec.grid * ds.spec.grid;
    std::vector<float> xt(A * F, 0.25f);
    const auto f = toy_features(ds, ds.train, 0, L, xt, 0.3f, false);
    ASSERT_EQ(f.size(), L.total_len * D);
    for (std::size_t t = 0; t < L.total_len; ++t) EXPECT_FLOAT_EQ(f[t * D + D - 1], 0.3f);
    const auto& tgt = L.target();
    EXPECT_EQ(f[tgt.start * D], 0.25f);
    EXPECT_EQ(f[tgt.start * D + F], 0.0f);  // no semantics on target tokens
    const auto& ref0 = L.get(SegmentKind::vae_ref(0));
    EXPECT_EQ(f[ref0.start * D], ds.train.ref_vae.f32()[0]);
    const auto& text = L.text();
    const std::size_t id = ds.train.scenes[0].token_ids[0];
    EXPECT_EQ(f[text.start * D + F], ds.vocab_emb.f32()[id * F]);
    const auto dropped = toy_features(ds, ds.train, 0, L, xt, 0.3f, true);
    for (std::size_t j = 0; j < 2 * F; ++j) EXPECT_EQ(dropped[text.start * D + j], 0.0f);
    const Layout R = without_vae_refs(L);
    EXPECT_EQ(toy_features(ds, ds.train, 0, R, xt, 0.3f, false).size(), R.total_len * D);
}

TEST(Train, LossIsDeterministicAndDecreases) {
    const auto& ds = dataset();
    const auto a = train_toy(ds, quick(30));
    const auto b = train_toy(ds, quick(30));
    EXPECT_EQ(a.losses, b.losses);
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.recon_with_vae, b.recon_with_vae);
    double early = 0, late = 0;
    for (std::size_t i = 0; i < 5; ++i) early += a.losses[i], late += a.losses[25 + i];
    EXPECT_LT(late, early);
    auto o = quick(30);
    o.seed = 1;
    EXPECT_NE(train_toy(ds, o).losses, a.losses);
}

TEST(Train, UntrainedAttentionSitsAtTheUniformFloor) {
    const auto& ds = dataset();
    auto o = quick(0);
    o.eval_scenes = 16;
    const auto run = train_toy(ds, o);
    EXPECT_TRUE(run.losses.empty());
    EXPECT_GT(run.attn.rows, 0u);
    EXPECT_LE(std::abs(run.attn.in_bbox - run.attn.floor), 3 * run.attn.floor_stderr + 0.01);
    // Masked word rows see no reference key outside their box.
    EXPECT_EQ(run.attn.in_bbox, run.attn.on_refs);
}

TEST(Train, FullAttentionSpreadsOverAllReferences) {
    const auto& ds = dataset();
    auto o = quick(0);
    o.masked = false;
    const auto run = train_toy(ds, o);
    EXPECT_LT(run.attn.in_bbox, run.attn.on_refs);
}

TEST(Train, NonFiniteLossWritesDump) {
    const auto& ds = dataset();
    auto o = quick(50);
    o.lr = 1e38;
    o.grad_clip = 0;
    o.warmup = 1;
    const auto dir = temp_dir("cag_test_nan");
    std::filesystem::create_directories(dir);
    EXPECT_THROW(train_toy(ds, o, dir), NumericError);
    EXPECT_TRUE(std::filesystem::exists(dir / "nan_dump.json"));
    std::filesystem::remove_all(dir);
}

TEST(Viz, MaskedMapsAreZeroOutsideTheBox) {
    const auto& ds = dataset();
    const auto run = train_toy(ds, quick(5));
    const DitModel model(run.model_config, run.params);
    const ToyScene& sc = ds.eval.scenes[0];
    const Layout L = ds.layout();
    for (const auto& g : sc.groundings.groundings) {
        const auto maps = word_attention_maps(model, ds, ds.eval, 0, g.word.text, 0, 1, true);
        ASSERT_EQ(maps.size(), ds.spec.n_refs);
        const TokenSet box = bbox_to_token_set(L, g.ref_id, g.bbox_px, ds.spec.stride_px);
        double mass = 0;
        for (std::size_t i = 0; i < maps.size(); ++i) {
            const auto& seg = L.get(SegmentKind::vae_ref(i));
            for (std::size_t k = 0; k < seg.size(); ++k) {
                const double v = maps[i].f64()[k];
                if (i == g.ref_id && box.contains(seg.start + k)) {
                    EXPECT_GT(v, 0.0);
                    mass += v;
                } else {
                    EXPECT_EQ(v, 0.0);
                }
            }
        }
        EXPECT_LT(mass, 1.0);
        const auto full = word_attention_maps(model, ds, ds.eval, 0, g.word.text, 0, 1, false);
        for (const auto& m : full)
            for (double v : m.f64()) EXPECT_GT(v, 0.0);
    }
    EXPECT_THROW(word_attention_maps(model, ds, ds.eval, 0, "and", 0, 0, true), InputError);
    EXPECT_THROW(word_attention_maps(model, ds, ds.eval, 0, sc.tokens[0], 5, 0, true), InputError);
}

TEST(Ablation, ReportShape) {
    const auto& ds = dataset();
    AblationOptions ab;
    ab.p_list = {0.0, 1.0};
    ab.seeds = {0};
    std::string csv;
    const auto rep = ablate_dropout(ds, quick(3), ab, &csv);
    EXPECT_EQ(rep["schema"], "cag-ablation-report/1");
    EXPECT_EQ(rep["runs"].size(), 2u);
    EXPECT_EQ(rep["summary"].size(), 2u);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "p,seed,eval_mode,recon_error");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
    EXPECT_EQ(rep["summary"][0]["with_vae"]["per_seed"].size(), 1u);
}

TEST(Config, NestedAndDottedKeys) {
    const auto c = config_from_json(nlohmann::json::parse(R"({
        "dropout": {"p_vae": 0.25},
        "train.steps": 12,
        "train": {"mask_mode": "full"},
        "model": {"n_layers": 3},
        "ablate.p_list": [0.0, 0.3],
        "toy": {"bbox_policy": "full", "n_train": 10}
    })"));
    EXPECT_EQ(c.train.dropout.p_vae, 0.25);
    EXPECT_EQ(c.train.steps, 12u);
    EXPECT_FALSE(c.train.masked);
    EXPECT_EQ(c.train.model.n_layers, 3u);
    EXPECT_EQ(c.ablate.p_list, (std::vector<double>{0.0, 0.3}));
    EXPECT_EQ(c.toy.bbox_policy, "full");
    EXPECT_EQ(c.n_train, 10u);
    // Round trip through the flat form.
    EXPECT_EQ(config_from_json(c.to_json()).to_json(), c.to_json());
}

TEST(Config, Errors) {
    using nlohmann::json;
    EXPECT_THROW(config_from_json(json::parse(R"({"dropout": {"p_vea": 0.5}})")), InputError);
    EXPECT_THROW(config_from_json(json::parse(R"({"train.steps": "ten"})")), InputError);
    EXPECT_THROW(config_from_json(json::parse(R"({"train.steps": -1})")), InputError);
    EXPECT_THROW(config_from_json(json::parse(R"({"dropout.p_vae": 2})")), InputError);
    EXPECT_THROW(config_from_json(json::parse(R"({"dropout": {"p_vae": 0.1}, "dropout.p_vae": 0.2})")), InputError);
    EXPECT_THROW(config_from_json(json::parse(R"({"train.mask_mode": "half"})")), InputError);
    EXPECT_THROW(config_from_json(json::parse("[1]")), InputError);
    EXPECT_THROW(load_config("/nonexistent/cfg.json"), InputError);
}
