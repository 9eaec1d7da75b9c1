#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cag/attention/attention.hpp"
#include "cag/attention/checks.hpp"
#include "cag/error.hpp"
#include "../support/oracles.hpp"

using namespace cag;

namespace {

struct Case {
    std::vector<double> q, k, v;
    std::vector<Position> pos;
    oracle::Dense allowed;
};

Case random_case(std::mt19937_64& rng, std::size_t n, std::size_t d) {
    std::normal_distribution<double> nd;
    Case c;
    for (auto* x : {&c.q, &c.k, &c.v}) {
        x->resize(n * d);
        for (auto& v : *x) v = nd(rng);
    }
    for (std::size_t i = 0; i < n; ++i) c.pos.push_back({std::int64_t(rng() % 21) - 10, std::int64_t(rng() % 21) - 10});
    c.allowed.assign(n, std::vector<std::uint8_t>(n, 0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) c.allowed[i][j] = rng() % 3 != 0;
        c.allowed[i][rng() % n] = 1;
    }
    return c;
}

AttentionIO to_io(const Case& c, std::size_t d) {
    const std::size_t n = c.pos.size();
    std::map<std::size_t, TokenSet> rows;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> keys;
        for (std::size_t j = 0; j < n; ++j)
            if (c.allowed[i][j]) keys.push_back(j);
        rows[i] = TokenSet::from_indices(keys);
    }
    return AttentionIO{Tensor::from_f64({n, d}, c.q), Tensor::from_f64({n, d}, c.k), Tensor::from_f64({n, d}, c.v), c.pos,
                       AttentionMask(n, TokenSet::range(0, n), rows)};
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

} // namespace

TEST(AttentionConfig, Validate) {
    EXPECT_NO_THROW((AttentionConfig{64, 4}.validate()));
    EXPECT_THROW((AttentionConfig{64, 5}.validate()), ShapeError);
    EXPECT_THROW((AttentionConfig{24, 4}.validate()), ShapeError);  // head_dim 6 is not a multiple of 4
}

TEST(Rope, MatchesOracleAndPreservesNorms) {
    std::mt19937_64 rng(31);
    const AttentionConfig cfg{32, 2};
    const Case c = random_case(rng, 9, 32);
    const Tensor r = apply_rope2d(Tensor::from_f64({9, 32}, c.q), c.pos, cfg);
    const auto want = oracle::rope(c.q, c.pos, 32, 2, cfg.rope_base);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(r.f64()[i], want[i], 1e-12);
    for (std::size_t i = 0; i < 9; ++i)
        for (std::size_t h = 0; h < 2; ++h) {
            const std::span<const double> a(c.q.data() + i * 32 + h * 16, 16), b(r.f64().data() + i * 32 + h * 16, 16);
            EXPECT_NEAR(dot(a, a), dot(b, b), 1e-10);
        }
}

TEST(Rope, OriginIsIdentity) {
    const AttentionConfig cfg{16, 1};
    std::vector<double> x(16);
    for (std::size_t i = 0; i < 16; ++i) x[i] = 0.1 * i;
    const std::vector<Position> pos{{0, 0}};
    EXPECT_EQ(apply_rope2d(Tensor::from_f64({1, 16}, x), pos, cfg), Tensor::from_f64({1, 16}, x));
}

TEST(Rope, DotProductDependsOnlyOnRelativePosition) {
    std::mt19937_64 rng(32);
    const AttentionConfig cfg{16, 1};
    const Case c = random_case(rng, 2, 16);
    auto score = [&](Position a, Position b) {
        const std::vector<Position> pa{a}, pb{b};
        const Tensor qa = apply_rope2d(Tensor::from_f64({1, 16}, {c.q.begin(), c.q.begin() + 16}), pa, cfg);
        const Tensor kb = apply_rope2d(Tensor::from_f64({1, 16}, {c.k.begin(), c.k.begin() + 16}), pb, cfg);
        return dot(qa.f64(), kb.f64());
    };
    const double s0 = score({2, -3}, {5, 1});
    EXPECT_NEAR(s0, score({12, 7}, {15, 11}), 1e-10);
    EXPECT_NEAR(s0, score({-2, -3}, {1, 1}), 1e-10);
    // Row and column offsets are distinguished.
    EXPECT_GT(std::abs(score({0, 0}, {1, 0}) - score({0, 0}, {0, 1})), 1e-6);
}

TEST(MaskedAttention, MatchesGatheredOracle) {
    std::mt19937_64 rng(33);
    const AttentionConfig cfg{32, 4};
    for (int t = 0; t < 20; ++t) {
        const std::size_t n = rng() % 20 + 1;
        const Case c = random_case(rng, n, 32);
        const Tensor out = masked_attention(to_io(c, 32), cfg);
        const auto want = oracle::attention(c.q, c.k, c.v, c.pos, c.allowed, 32, 4, cfg.rope_base);
        for (std::size_t i = 0; i < want.size(); ++i) ASSERT_NEAR(out.f64()[i], want[i], 1e-12);
    }
}

TEST(MaskedAttention, F32Path) {
    std::mt19937_64 rng(34);
    const AttentionConfig cfg{16, 2};
    const Case c = random_case(rng, 10, 16);
    AttentionIO io = to_io(c, 16);
    io.q = io.q.as(DType::f32), io.k = io.k.as(DType::f32), io.v = io.v.as(DType::f32);
    const Tensor out = masked_attention(io, cfg);
    ASSERT_EQ(out.dtype(), DType::f32);
    const auto want = oracle::attention(c.q, c.k, c.v, c.pos, c.allowed, 16, 2, cfg.rope_base);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(out.f32()[i], want[i], 1e-4);
}

TEST(MaskedAttention, WeightsAreZeroExactlyOnMaskedKeys) {
    std::mt19937_64 rng(35);
    const AttentionConfig cfg{16, 2};
    const Case c = random_case(rng, 12, 16);
    const Tensor w = attention_weights(to_io(c, 16), cfg);
    ASSERT_EQ(w.dims(), (Dims{2, 12, 12}));
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t i = 0; i < 12; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < 12; ++j) {
                const double p = w.f64()[(h * 12 + i) * 12 + j];
                if (!c.allowed[i][j]) {
                    EXPECT_EQ(p, 0.0);
                }
                s += p;
            }
            EXPECT_NEAR(s, 1.0, 1e-13);
        }
}

TEST(MaskedAttention, DegenerateRowThrows) {
    const AttentionConfig cfg{16, 2};
    std::map<std::size_t, TokenSet> rows{{1, TokenSet()}};
    AttentionIO io{Tensor(DType::f64, {2, 16}), Tensor(DType::f64, {2, 16}), Tensor(DType::f64, {2, 16}), {{0, 0}, {1, 1}},
                   AttentionMask(2, TokenSet::range(0, 2), rows)};
    EXPECT_THROW(masked_attention(io, cfg), DegenerateRowError);
}

TEST(MaskedAttention, ShapeErrors) {
    const AttentionConfig cfg{16, 2};
    AttentionIO io{Tensor(DType::f64, {2, 16}), Tensor(DType::f64, {3, 16}), Tensor(DType::f64, {2, 16}), {{0, 0}, {1, 1}},
                   full_mask(2)};
    EXPECT_THROW(masked_attention(io, cfg), ShapeError);
    io.k = Tensor(DType::f64, {2, 16});
    io.positions.pop_back();
    EXPECT_THROW(masked_attention(io, cfg), ShapeError);
}

// Central differences computed here against the oracle forward.
TEST(AttentionBackward, MatchesFiniteDifferencesOfOracle) {
    std::mt19937_64 rng(36);
    const AttentionConfig cfg{16, 2};
    const std::size_t n = 7, d = 16;
    Case c = random_case(rng, n, d);
    std::normal_distribution<double> nd;
    std::vector<double> up(n * d);
    for (auto& u : up) u = nd(rng);
    const AttentionGrads g = attention_backward(to_io(c, d), cfg, Tensor::from_f64({n, d}, up));
    auto loss = [&] {
        const auto o = oracle::attention(c.q, c.k, c.v, c.pos, c.allowed, d, 2, cfg.rope_base);
        double l = 0;
        for (std::size_t i = 0; i < o.size(); ++i) l += o[i] * up[i];
        return l;
    };
    const double h = 1e-5;
    std::vector<double>* xs[] = {&c.q, &c.k, &c.v};
    const Tensor* gs[] = {&g.dq, &g.dk, &g.dv};
    for (int w = 0; w < 3; ++w)
        for (std::size_t i = 0; i < n * d; ++i) {
            const double orig = (*xs[w])[i];
            (*xs[w])[i] = orig + h;
            const double lp = loss();
            (*xs[w])[i] = orig - h;
            const double lm = loss();
            (*xs[w])[i] = orig;
            const double num = (lp - lm) / (2 * h), ana = gs[w]->f64()[i];
            EXPECT_LE(std::abs(num - ana), 1e-6 * std::max(1.0, std::abs(num))) << "input " << w << " index " << i;
        }
}

TEST(AttentionBackward, UnseenKeysGetZeroGradient) {
    std::mt19937_64 rng(37);
    const AttentionConfig cfg{16, 2};
    Case c = random_case(rng, 8, 16);
    for (auto& row : c.allowed) row[5] = 0, row[4] = 1;
    std::vector<double> up(8 * 16, 1.0);
    const AttentionGrads g = attention_backward(to_io(c, 16), cfg, Tensor::from_f64({8, 16}, up));
    for (std::size_t j = 0; j < 16; ++j) {
        EXPECT_EQ(g.dk.f64()[5 * 16 + j], 0.0);
        EXPECT_EQ(g.dv.f64()[5 * 16 + j], 0.0);
    }
}

TEST(Checks, LibraryChecksPassOnSmallRuns) {
    const AttentionConfig cfg{16, 2};
    const auto gr = check_attention_gradients(1, 3, 6, cfg);
    EXPECT_LT(gr.max_rel_error, 1e-4);
    EXPECT_TRUE(gr.masked_keys_zero);
    EXPECT_LT(check_gather_equivalence(1, 5, 16, cfg).max_abs_diff, 1e-12);
    // Every query hides the last key from itself.
    const AttentionIO io = random_attention_instance(3, 0, 8, cfg);
    for (std::size_t q = 0; q < 8; ++q) {
        EXPECT_FALSE(io.mask.allowed(q, 7));
        EXPECT_FALSE(io.mask.row(q).empty());
    }
}
