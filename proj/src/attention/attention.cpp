#include "cag/attention/attention.hpp"

#include "cag/attention/detail/attention_kernels.hpp"
#include "cag/error.hpp"

namespace cag {

void AttentionConfig::validate() const {
    if (n_heads == 0 || d_model == 0) throw ShapeError("attention needs d_model > 0 and n_heads > 0");
    if (d_model % n_heads != 0) throw ShapeError("d_model must be divisible by n_heads");
    if (head_dim() % 4 != 0) throw ShapeError("head_dim must be divisible by 4 for 2D rotary embedding");
    if (!(rope_base > 0.0)) throw ShapeError("rope_base must be positive");
}

namespace {

void check_matrix(const Tensor& t, std::size_t n, const AttentionConfig& cfg, const char* what) {
    if (t.rank() != 2 || t.dim(0) != n || t.dim(1) != cfg.d_model) {
        throw ShapeError(std::string(what) + " must be [" + std::to_string(n) + " x " + std::to_string(cfg.d_model) +
                         "], got " + dims_string(t.dims()));
    }
    if (t.dtype() == DType::boolean) throw ShapeError(std::string(what) + " must be f32 or f64");
}

std::size_t check_io(const AttentionIO& io, const AttentionConfig& cfg) {
    cfg.validate();
    const std::size_t n = io.positions.size();
    check_matrix(io.q, n, cfg, "q");
    check_matrix(io.k, n, cfg, "k");
    check_matrix(io.v, n, cfg, "v");
    if (io.q.dtype() != io.k.dtype() || io.q.dtype() != io.v.dtype()) throw ShapeError("q, k, v dtypes differ");
    if (io.mask.n_tokens() != n) throw ShapeError("mask token count differs from positions length");
    return n;
}

template <class T>
Tensor forward_typed(const AttentionIO& io, const AttentionConfig& cfg, detail::AttentionCache<T>& cache) {
    const std::size_t n = io.positions.size();
    const auto rope = detail::make_rope_table<T>(io.positions, cfg);
    const auto bits = detail::MaskBits::from(io.mask);
    Tensor out(dtype_of<T>(), {n, cfg.d_model});
    detail::attention_forward(io.q.data<T>().data(), io.k.data<T>().data(), io.v.data<T>().data(), n, cfg, rope, bits,
                              out.data<T>().data(), cache);
    return out;
}

template <class T>
AttentionGrads backward_typed(const AttentionIO& io, const AttentionConfig& cfg, const Tensor& upstream) {
    detail::AttentionCache<T> cache;
    forward_typed<T>(io, cfg, cache);
    const std::size_t n = io.positions.size();
    const auto rope = detail::make_rope_table<T>(io.positions, cfg);
    AttentionGrads g{Tensor(dtype_of<T>(), {n, cfg.d_model}), Tensor(dtype_of<T>(), {n, cfg.d_model}),
                     Tensor(dtype_of<T>(), {n, cfg.d_model})};
    detail::attention_backward(cache, cfg, rope, upstream.data<T>().data(), g.dq.data<T>().data(), g.dk.data<T>().data(),
                               g.dv.data<T>().data());
    return g;
}

} // namespace

Tensor apply_rope2d(const Tensor& x, std::span<const Position> positions, const AttentionConfig& cfg) {
    cfg.validate();
    check_matrix(x, positions.size(), cfg, "rope input");
    Tensor out = x;
    if (x.dtype() == DType::f32) {
        detail::rope_apply(out.f32().data(), cfg, detail::make_rope_table<float>(positions, cfg), false);
    } else {
        detail::rope_apply(out.f64().data(), cfg, detail::make_rope_table<double>(positions, cfg), false);
    }
    return out;
}

Tensor masked_attention(const AttentionIO& io, const AttentionConfig& cfg) {
    check_io(io, cfg);
    if (io.q.dtype() == DType::f32) {
        detail::AttentionCache<float> cache;
        return forward_typed<float>(io, cfg, cache);
    }
    detail::AttentionCache<double> cache;
    return forward_typed<double>(io, cfg, cache);
}

Tensor attention_weights(const AttentionIO& io, const AttentionConfig& cfg) {
    const std::size_t n = check_io(io, cfg);
    const Dims dims{cfg.n_heads, n, n};
    if (io.q.dtype() == DType::f32) {
        detail::AttentionCache<float> cache;
        forward_typed<float>(io, cfg, cache);
        return Tensor::from_f32(dims, std::move(cache.probs));
    }
    detail::AttentionCache<double> cache;
    forward_typed<double>(io, cfg, cache);
    return Tensor::from_f64(dims, std::move(cache.probs));
}

AttentionGrads attention_backward(const AttentionIO& io, const AttentionConfig& cfg, const Tensor& upstream) {
    const std::size_t n = check_io(io, cfg);
    check_matrix(upstream, n, cfg, "upstream gradient");
    if (upstream.dtype() != io.q.dtype()) throw ShapeError("upstream gradient dtype differs from q");
    return io.q.dtype() == DType::f32 ? backward_typed<float>(io, cfg, upstream) : backward_typed<double>(io, cfg, upstream);
}

} // namespace cag
