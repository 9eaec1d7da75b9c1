#include "cag/attention/checks.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "cag/numerics/rng.hpp"

namespace cag {

AttentionIO random_attention_instance(std::uint64_t seed, std::uint64_t index, std::size_t n, const AttentionConfig& cfg) {
    cfg.validate();
    RngCursor rng(RngKey{seed, stream_label("attn.instance"), 0}.split(index));
    const std::size_t d = cfg.d_model;
    auto rand_matrix = [&] {
        std::vector<double> x(n * d);
        for (auto& v : x) v = rng.normal();
        return Tensor::from_f64({n, d}, std::move(x));
    };
    AttentionIO io{rand_matrix(), rand_matrix(), rand_matrix(), {}, {}};
    for (std::size_t i = 0; i < n; ++i) {
        io.positions.push_back({static_cast<std::int64_t>(rng.below(17)) - 8, static_cast<std::int64_t>(rng.below(17)) - 8});
    }
    // Keys are drawn from [0, n - 1), so the last key is hidden from every query.
    std::map<std::size_t, TokenSet> rows;
    for (std::size_t q = 0; q < n; ++q) {
        std::vector<std::size_t> keys;
        for (std::size_t k = 0; k + 1 < n; ++k) {
            if (rng.uniform() < 0.5) keys.push_back(k);
        }
        if (keys.empty()) keys.push_back(rng.below(std::max<std::size_t>(1, n - 1)));
        if (n == 1) keys = {0};
        rows[q] = TokenSet::from_indices(keys);
    }
    io.mask = AttentionMask(n, TokenSet::range(0, n), std::move(rows));
    return io;
}

nlohmann::json GradCheckResult::to_json() const {
    return {{"instances", instances}, {"max_rel_error", max_rel_error}, {"masked_keys_zero", masked_keys_zero}};
}

nlohmann::json EquivCheckResult::to_json() const { return {{"instances", instances}, {"max_abs_diff", max_abs_diff}}; }

GradCheckResult check_attention_gradients(std::uint64_t seed, std::size_t instances, std::size_t n,
                                          const AttentionConfig& cfg, double h) {
    GradCheckResult res;
    res.instances = instances;
    for (std::size_t idx = 0; idx < instances; ++idx) {
        AttentionIO io = random_attention_instance(seed, idx, n, cfg);
        RngCursor rng(RngKey{seed, stream_label("attn.upstream"), idx});
        std::vector<double> up(n * cfg.d_model);
        for (auto& u : up) u = rng.normal();
        const Tensor upstream = Tensor::from_f64({n, cfg.d_model}, up);
        const AttentionGrads g = attention_backward(io, cfg, upstream);
        auto loss = [&](const AttentionIO& x) {
            const Tensor out = masked_attention(x, cfg);
            double l = 0;
            const auto o = out.f64();
            for (std::size_t i = 0; i < o.size(); ++i) l += o[i] * up[i];
            return l;
        };
        Tensor* inputs[] = {&io.q, &io.k, &io.v};
        const Tensor* grads[] = {&g.dq, &g.dk, &g.dv};
        for (std::size_t which = 0; which < 3; ++which) {
            auto x = inputs[which]->f64();
            const auto a = grads[which]->f64();
            for (std::size_t i = 0; i < x.size(); ++i) {
                const double orig = x[i];
                x[i] = orig + h;
                const double lp = loss(io);
                x[i] = orig - h;
                const double lm = loss(io);
                x[i] = orig;
                const double num = (lp - lm) / (2 * h);
                const double rel = std::abs(a[i] - num) / std::max({std::abs(a[i]), std::abs(num), 1e-6});
                res.max_rel_error = std::max(res.max_rel_error, rel);
            }
        }
        // The last key is hidden from every query: its k and v rows must get
        // exactly zero gradient and perturbing them must leave the output as is.
        const std::size_t hidden = n - 1;
        bool visible = false;
        for (std::size_t q = 0; q < n; ++q) visible = visible || io.mask.allowed(q, hidden);
        if (visible) continue;
        const Tensor before = masked_attention(io, cfg);
        for (std::size_t c = 0; c < cfg.d_model; ++c) {
            if (g.dk.f64()[hidden * cfg.d_model + c] != 0.0 || g.dv.f64()[hidden * cfg.d_model + c] != 0.0) res.masked_keys_zero = false;
            io.k.f64()[hidden * cfg.d_model + c] += 1.0;
        }
        if (!(masked_attention(io, cfg) == before)) res.masked_keys_zero = false;
    }
    return res;
}

EquivCheckResult check_gather_equivalence(std::uint64_t seed, std::size_t instances, std::size_t n,
                                          const AttentionConfig& cfg) {
    EquivCheckResult res;
    res.instances = instances;
    const std::size_t d = cfg.d_model, hd = cfg.head_dim();
    for (std::size_t idx = 0; idx < instances; ++idx) {
        const AttentionIO io = random_attention_instance(seed ^ 0x9e3779b97f4a7c15ULL, idx, n, cfg);
        const Tensor out = masked_attention(io, cfg);
        const Tensor qr = apply_rope2d(io.q, io.positions, cfg), kr = apply_rope2d(io.k, io.positions, cfg);
        const auto q = qr.f64(), k = kr.f64(), v = io.v.f64(), o = out.f64();
        for (std::size_t i = 0; i < n; ++i) {
            const auto keys = io.mask.row(i).indices();
            for (std::size_t h = 0; h < cfg.n_heads; ++h) {
                std::vector<double> logits;
                for (std::size_t key : keys) {
                    double s = 0;
                    for (std::size_t c = 0; c < hd; ++c) s += q[i * d + h * hd + c] * k[key * d + h * hd + c];
                    logits.push_back(s / std::sqrt(static_cast<double>(hd)));
                }
                const double mx = *std::max_element(logits.begin(), logits.end());
                double z = 0;
                for (auto& l : logits) z += (l = std::exp(l - mx));
                for (std::size_t c = 0; c < hd; ++c) {
                    double acc = 0;
                    for (std::size_t j = 0; j < keys.size(); ++j) acc += logits[j] / z * v[keys[j] * d + h * hd + c];
                    res.max_abs_diff = std::max(res.max_abs_diff, std::abs(acc - o[i * d + h * hd + c]));
                }
            }
        }
    }
    return res;
}

} // namespace cag
