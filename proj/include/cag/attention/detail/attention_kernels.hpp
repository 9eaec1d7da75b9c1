#pragma once

// Templated forward/backward kernels behind the Tensor-level attention API.
// The toy model calls these directly in f32; the checks run them in f64.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "cag/attention/attention.hpp"
#include "cag/error.hpp"
#include "cag/numerics/kernels.hpp"

namespace cag::detail {

template <class T>
struct RopeTable {
    std::size_t n = 0;
    std::size_t pairs = 0;  // rotation pairs per axis per head = head_dim / 4
    std::vector<T> cos_row, sin_row, cos_col, sin_col;  // [n x pairs]
};

template <class T>
RopeTable<T> make_rope_table(std::span<const Position> positions, const AttentionConfig& cfg) {
    cfg.validate();
    RopeTable<T> t;
    t.n = positions.size();
    t.pairs = cfg.head_dim() / 4;
    const std::size_t half = cfg.head_dim() / 2;
    t.cos_row.resize(t.n * t.pairs);
    t.sin_row.resize(t.n * t.pairs);
    t.cos_col.resize(t.n * t.pairs);
    t.sin_col.resize(t.n * t.pairs);
    for (std::size_t i = 0; i < t.n; ++i) {
        for (std::size_t p = 0; p < t.pairs; ++p) {
            const double freq = std::pow(cfg.rope_base, -static_cast<double>(2 * p) / static_cast<double>(half));
            const double ar = static_cast<double>(positions[i].row) * freq;
            const double ac = static_cast<double>(positions[i].col) * freq;
            t.cos_row[i * t.pairs + p] = static_cast<T>(std::cos(ar));
            t.sin_row[i * t.pairs + p] = static_cast<T>(std::sin(ar));
            t.cos_col[i * t.pairs + p] = static_cast<T>(std::cos(ac));
            t.sin_col[i * t.pairs + p] = static_cast<T>(std::sin(ac));
        }
    }
    return t;
}

// In place. inverse = true applies the transpose rotation (used by backward).
template <class T>
void rope_apply(T* x, const AttentionConfig& cfg, const RopeTable<T>& tab, bool inverse) {
    const std::size_t d = cfg.d_model, hd = cfg.head_dim(), half = hd / 2;
    const T sign = inverse ? T(-1) : T(1);
    for (std::size_t i = 0; i < tab.n; ++i) {
        T* row = x + i * d;
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            for (std::size_t axis = 0; axis < 2; ++axis) {
                const T* cs = (axis == 0 ? tab.cos_row : tab.cos_col).data() + i * tab.pairs;
                const T* sn = (axis == 0 ? tab.sin_row : tab.sin_col).data() + i * tab.pairs;
                T* base = row + h * hd + axis * half;
                for (std::size_t p = 0; p < tab.pairs; ++p) {
                    const T c = cs[p], s = sign * sn[p];
                    const T x0 = base[2 * p], x1 = base[2 * p + 1];
                    base[2 * p] = x0 * c - x1 * s;
                    base[2 * p + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

struct MaskBits {
    std::size_t n = 0;
    std::vector<std::uint8_t> allowed;  // [n x n]

    static MaskBits from(const AttentionMask& mask) {
        MaskBits b;
        b.n = mask.n_tokens();
        b.allowed.assign(b.n * b.n, 0);
        for (std::size_t q = 0; q < b.n; ++q) {
            for (const auto& iv : mask.row(q).intervals()) {
                for (std::size_t k = iv.start; k < iv.end; ++k) b.allowed[q * b.n + k] = 1;
            }
        }
        return b;
    }
};

template <class T>
struct AttentionCache {
    std::size_t n = 0;
    std::vector<T> qr, kr, v;  // rotated q, k and raw v, [n x d]
    std::vector<T> probs;      // [heads x n x n]
};

template <class T>
void attention_forward(const T* q, const T* k, const T* v, std::size_t n, const AttentionConfig& cfg,
                       const RopeTable<T>& rope, const MaskBits& mask, T* out, AttentionCache<T>& cache) {
    const std::size_t d = cfg.d_model, hd = cfg.head_dim(), H = cfg.n_heads;
    if (mask.n != n || rope.n != n) throw ShapeError("attention mask/positions do not match the token count");
    cache.n = n;
    cache.qr.assign(q, q + n * d);
    cache.kr.assign(k, k + n * d);
    cache.v.assign(v, v + n * d);
    rope_apply(cache.qr.data(), cfg, rope, false);
    rope_apply(cache.kr.data(), cfg, rope, false);
    cache.probs.assign(H * n * n, T(0));

    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const T neg_inf = -std::numeric_limits<T>::infinity();
    std::vector<T> qh(n * hd), kh(n * hd), vh(n * hd), oh(n * hd);
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < hd; ++c) {
                qh[i * hd + c] = cache.qr[i * d + h * hd + c];
                kh[i * hd + c] = cache.kr[i * d + h * hd + c];
                vh[i * hd + c] = v[i * d + h * hd + c];
            }
        }
        T* P = cache.probs.data() + h * n * n;
        kernels::gemm_nt(qh.data(), kh.data(), P, n, hd, n);
        for (std::size_t i = 0; i < n; ++i) {
            T* row = P + i * n;
            const std::uint8_t* ok = mask.allowed.data() + i * n;
            bool any = false;
            for (std::size_t j = 0; j < n; ++j) {
                row[j] = ok[j] ? row[j] * scale : neg_inf;
                any = any || ok[j];
            }
            if (!any) throw DegenerateRowError("attention query " + std::to_string(i) + " has no allowed key");
            // Non-finite logits propagate as NaN so callers see a non-finite output.
            if (!kernels::softmax_row(row, n)) std::fill(row, row + n, std::numeric_limits<T>::quiet_NaN());
        }
        kernels::gemm(P, vh.data(), oh.data(), n, n, hd);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < hd; ++c) out[i * d + h * hd + c] = oh[i * hd + c];
        }
    }
}

template <class T>
void attention_backward(const AttentionCache<T>& cache, const AttentionConfig& cfg, const RopeTable<T>& rope,
                        const T* dout, T* dq, T* dk, T* dv) {
    const std::size_t n = cache.n, d = cfg.d_model, hd = cfg.head_dim(), H = cfg.n_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    std::vector<T> qh(n * hd), kh(n * hd), vh(n * hd), doh(n * hd), dqh(n * hd), dkh(n * hd), dvh(n * hd);
    std::vector<T> dP(n * n);
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < hd; ++c) {
                const std::size_t g = i * d + h * hd + c;
                qh[i * hd + c] = cache.qr[g];
                kh[i * hd + c] = cache.kr[g];
                vh[i * hd + c] = cache.v[g];
                doh[i * hd + c] = dout[g];
            }
        }
        const T* P = cache.probs.data() + h * n * n;
        kernels::gemm_tn(P, doh.data(), dvh.data(), n, n, hd);
        kernels::gemm_nt(doh.data(), vh.data(), dP.data(), n, hd, n);
        for (std::size_t i = 0; i < n; ++i) {
            const T* p = P + i * n;
            T* g = dP.data() + i * n;
            T dot = T(0);
            for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
            // Masked entries have p == 0 exactly, so their logit gradient is 0.
            for (std::size_t j = 0; j < n; ++j) g[j] = p[j] * (g[j] - dot) * scale;
        }
        kernels::gemm(dP.data(), kh.data(), dqh.data(), n, n, hd);
        kernels::gemm_tn(dP.data(), qh.data(), dkh.data(), n, n, hd);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < hd; ++c) {
                const std::size_t g = i * d + h * hd + c;
                dq[g] = dqh[i * hd + c];
                dk[g] = dkh[i * hd + c];
                dv[g] = dvh[i * hd + c];
            }
        }
    }
    rope_apply(dq, cfg, rope, true);
    rope_apply(dk, cfg, rope, true);
}

} // namespace cag::detail
