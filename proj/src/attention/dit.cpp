#include "cag/attention/dit.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "cag/error.hpp"
#include "cag/numerics/tensor_io.hpp"

namespace cag {

void DitConfig::validate() const {
    attn.validate();
    if (n_layers == 0) throw ShapeError("model needs at least one layer");
    if (d_ff == 0 || in_dim == 0 || out_dim == 0) throw ShapeError("model widths must be positive");
    if (attn.d_model % 4 != 0) throw ShapeError("d_model must be divisible by 4 for the position embedding");
}

nlohmann::json DitConfig::to_json() const {
    return {{"d_model", attn.d_model}, {"n_heads", attn.n_heads}, {"rope_base", attn.rope_base},
            {"n_layers", n_layers},    {"d_ff", d_ff},            {"in_dim", in_dim},
            {"out_dim", out_dim},      {"init_std", init_std},    {"pos_scale", pos_scale}};
}

DitConfig DitConfig::from_json(const nlohmann::json& j) {
    DitConfig c;
    c.attn.d_model = j.value("d_model", c.attn.d_model);
    c.attn.n_heads = j.value("n_heads", c.attn.n_heads);
    c.attn.rope_base = j.value("rope_base", c.attn.rope_base);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.in_dim = j.value("in_dim", c.in_dim);
    c.out_dim = j.value("out_dim", c.out_dim);
    c.init_std = j.value("init_std", c.init_std);
    c.pos_scale = j.value("pos_scale", c.pos_scale);
    c.validate();
    return c;
}

void ParamSet::add(std::string name, Tensor t) {
    if (has(name)) throw InputError("duplicate parameter " + name);
    if (!tensors_.empty() && tensors_.front().dtype() != t.dtype()) throw ShapeError("parameter dtypes must agree");
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(t));
}

bool ParamSet::has(const std::string& name) const {
    for (const auto& n : names_) {
        if (n == name) return true;
    }
    return false;
}

Tensor& ParamSet::get(const std::string& name) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
        if (names_[i] == name) return tensors_[i];
    }
    throw InputError("unknown parameter " + name);
}

const Tensor& ParamSet::get(const std::string& name) const { return const_cast<ParamSet*>(this)->get(name); }

std::size_t ParamSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
}

ParamSet ParamSet::zeros_like() const {
    ParamSet z;
    for (std::size_t i = 0; i < names_.size(); ++i) z.add(names_[i], Tensor(tensors_[i].dtype(), tensors_[i].dims()));
    return z;
}

ParamSet ParamSet::as(DType dtype) const {
    ParamSet out;
    for (std::size_t i = 0; i < names_.size(); ++i) out.add(names_[i], tensors_[i].as(dtype));
    return out;
}

void ParamSet::fill_zero() {
    for (auto& t : tensors_) t = Tensor(t.dtype(), t.dims());
}

std::string block_param(std::size_t layer, const char* name) {
    return "blocks." + std::to_string(layer) + "." + name;
}

ParamSet init_dit_params(const DitConfig& cfg, RngKey key, DType dtype) {
    cfg.validate();
    const std::size_t d = cfg.attn.d_model;
    ParamSet p;
    RngCursor rng(key.split("dit.init"));
    auto normal = [&](Dims dims) {
        Tensor t(DType::f64, dims);
        for (auto& x : t.f64()) x = rng.normal() * cfg.init_std;
        return t.as(dtype);
    };
    auto ones = [&](std::size_t n) {
        Tensor t(DType::f64, {n});
        for (auto& x : t.f64()) x = 1.0;
        return t.as(dtype);
    };
    auto zeros = [&](Dims dims) { return Tensor(dtype, std::move(dims)); };

    p.add("embed.w", normal({cfg.in_dim, d}));
    p.add("embed.b", zeros({d}));
    p.add("embed.type", normal({4, d}));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        p.add(block_param(l, "ln1.g"), ones(d));
        p.add(block_param(l, "ln1.b"), zeros({d}));
        p.add(block_param(l, "wq"), normal({d, d}));
        p.add(block_param(l, "wk"), normal({d, d}));
        p.add(block_param(l, "wv"), normal({d, d}));
        p.add(block_param(l, "wo"), normal({d, d}));
        p.add(block_param(l, "ln2.g"), ones(d));
        p.add(block_param(l, "ln2.b"), zeros({d}));
        p.add(block_param(l, "w1"), normal({d, cfg.d_ff}));
        p.add(block_param(l, "b1"), zeros({cfg.d_ff}));
        p.add(block_param(l, "w2"), normal({cfg.d_ff, d}));
        p.add(block_param(l, "b2"), zeros({d}));
    }
    p.add("final.ln.g", ones(d));
    p.add("final.ln.b", zeros({d}));
    p.add("head.w", normal({d, cfg.out_dim}));
    p.add("head.b", zeros({cfg.out_dim}));
    return p;
}

std::vector<double> position_embedding(std::span<const Position> positions, std::size_t d_model) {
    const std::size_t quarter = d_model / 4;
    std::vector<double> e(positions.size() * d_model);
    for (std::size_t t = 0; t < positions.size(); ++t) {
        for (std::size_t axis = 0; axis < 2; ++axis) {
            const double pos = static_cast<double>(axis == 0 ? positions[t].row : positions[t].col);
            for (std::size_t i = 0; i < quarter; ++i) {
                const double w = std::pow(100.0, -static_cast<double>(i) / static_cast<double>(quarter));
                const std::size_t base = t * d_model + axis * (d_model / 2) + 2 * i;
                e[base] = std::sin(pos * w);
                e[base + 1] = std::cos(pos * w);
            }
        }
    }
    return e;
}

namespace detail {

namespace {

constexpr double kLnEps = 1e-5;

template <class T>
std::span<const T> P(const ParamSet& p, const std::string& name) {
    return p.get(name).data<T>();
}

template <class T>
std::span<T> G(ParamSet& g, const std::string& name) {
    return g.get(name).data<T>();
}

template <class T>
void linear_forward(const T* x, std::span<const T> w, const T* b, T* y, std::size_t n, std::size_t in, std::size_t out) {
    kernels::gemm(x, w.data(), y, n, in, out);
    if (b) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < out; ++j) y[i * out + j] += b[j];
    }
}

// dW += x^T dy, db += colsum(dy), dx (+)= dy W^T
template <class T>
void linear_backward(const T* x, std::span<const T> w, const T* dy, std::size_t n, std::size_t in, std::size_t out,
                     std::span<T> dw, T* db, T* dx, bool accumulate_dx) {
    kernels::gemm_tn(x, dy, dw.data(), n, in, out, true);
    if (db) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < out; ++j) db[j] += dy[i * out + j];
    }
    if (dx) kernels::gemm_nt(dy, w.data(), dx, n, out, in, accumulate_dx);
}

template <class T>
void layernorm_forward(const T* x, std::span<const T> g, std::span<const T> b, T* y, std::size_t n, std::size_t d,
                       LayerNormCache<T>& c) {
    c.xhat.resize(n * d);
    c.rstd.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const T* xr = x + i * d;
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<T>(d);
        const T rstd = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
        c.rstd[i] = rstd;
        for (std::size_t j = 0; j < d; ++j) {
            const T xh = (xr[j] - mean) * rstd;
            c.xhat[i * d + j] = xh;
            y[i * d + j] = xh * g[j] + b[j];
        }
    }
}

template <class T>
void layernorm_backward(const LayerNormCache<T>& c, std::span<const T> g, const T* dy, std::size_t n, std::size_t d,
                        std::span<T> dg, std::span<T> db, T* dx, bool accumulate_dx) {
    std::vector<T> dxh(d);
    for (std::size_t i = 0; i < n; ++i) {
        const T* xh = c.xhat.data() + i * d;
        const T* dyr = dy + i * d;
        T m1 = 0, m2 = 0;
        for (std::size_t j = 0; j < d; ++j) {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxh[j] = dyr[j] * g[j];
            m1 += dxh[j];
            m2 += dxh[j] * xh[j];
        }
        m1 /= static_cast<T>(d);
        m2 /= static_cast<T>(d);
        for (std::size_t j = 0; j < d; ++j) {
            const T v = c.rstd[i] * (dxh[j] - m1 - xh[j] * m2);
            dx[i * d + j] = accumulate_dx ? dx[i * d + j] + v : v;
        }
    }
}

template <class T>
T gelu(T u) {
    return T(0.5) * u * (T(1) + std::erf(u / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T u) {
    const T cdf = T(0.5) * (T(1) + std::erf(u / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(T(-0.5) * u * u) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    return cdf + u * pdf;
}

} // namespace

template <class T>
void block_forward(const ParamSet& p, std::size_t l, const DitConfig& cfg, const T* x, std::size_t n,
                   const RopeTable<T>& rope, const MaskBits& mask, T* y, BlockCache<T>& c) {
    const std::size_t d = cfg.attn.d_model, f = cfg.d_ff;
    c.x.assign(x, x + n * d);
    c.h1.resize(n * d);
    c.q.resize(n * d);
    c.k.resize(n * d);
    c.v.resize(n * d);
    c.a.resize(n * d);
    c.x1.resize(n * d);
    c.h2.resize(n * d);
    c.u.resize(n * f);
    c.g.resize(n * f);

    layernorm_forward(x, P<T>(p, block_param(l, "ln1.g")), P<T>(p, block_param(l, "ln1.b")), c.h1.data(), n, d, c.ln1);
    linear_forward<T>(c.h1.data(), P<T>(p, block_param(l, "wq")), nullptr, c.q.data(), n, d, d);
    linear_forward<T>(c.h1.data(), P<T>(p, block_param(l, "wk")), nullptr, c.k.data(), n, d, d);
    linear_forward<T>(c.h1.data(), P<T>(p, block_param(l, "wv")), nullptr, c.v.data(), n, d, d);
    attention_forward(c.q.data(), c.k.data(), c.v.data(), n, cfg.attn, rope, mask, c.a.data(), c.attn);
    linear_forward<T>(c.a.data(), P<T>(p, block_param(l, "wo")), nullptr, c.x1.data(), n, d, d);
    for (std::size_t i = 0; i < n * d; ++i) c.x1[i] += x[i];
    layernorm_forward(c.x1.data(), P<T>(p, block_param(l, "ln2.g")), P<T>(p, block_param(l, "ln2.b")), c.h2.data(), n, d, c.ln2);
    linear_forward<T>(c.h2.data(), P<T>(p, block_param(l, "w1")), P<T>(p, block_param(l, "b1")).data(), c.u.data(), n, d, f);
    for (std::size_t i = 0; i < n * f; ++i) c.g[i] = gelu(c.u[i]);
    linear_forward<T>(c.g.data(), P<T>(p, block_param(l, "w2")), P<T>(p, block_param(l, "b2")).data(), y, n, f, d);
    for (std::size_t i = 0; i < n * d; ++i) y[i] += c.x1[i];
}

template <class T>
void block_backward(const ParamSet& p, std::size_t l, const DitConfig& cfg, const BlockCache<T>& c,
                    const RopeTable<T>& rope, const T* dy, T* dx, ParamSet& grads) {
    const std::size_t d = cfg.attn.d_model, f = cfg.d_ff, n = c.x.size() / d;
    std::vector<T> dx1(dy, dy + n * d), dg(n * f), dh2(n * d), da(n * d), dq(n * d), dk(n * d), dv(n * d), dh1(n * d);

    linear_backward<T>(c.g.data(), P<T>(p, block_param(l, "w2")), dy, n, f, d, G<T>(grads, block_param(l, "w2")),
                       G<T>(grads, block_param(l, "b2")).data(), dg.data(), false);
    for (std::size_t i = 0; i < n * f; ++i) dg[i] *= gelu_grad(c.u[i]);
    linear_backward<T>(c.h2.data(), P<T>(p, block_param(l, "w1")), dg.data(), n, d, f, G<T>(grads, block_param(l, "w1")),
                       G<T>(grads, block_param(l, "b1")).data(), dh2.data(), false);
    layernorm_backward(c.ln2, P<T>(p, block_param(l, "ln2.g")), dh2.data(), n, d, G<T>(grads, block_param(l, "ln2.g")),
                       G<T>(grads, block_param(l, "ln2.b")), dx1.data(), true);

    linear_backward<T>(c.a.data(), P<T>(p, block_param(l, "wo")), dx1.data(), n, d, d, G<T>(grads, block_param(l, "wo")),
                       nullptr, da.data(), false);
    attention_backward(c.attn, cfg.attn, rope, da.data(), dq.data(), dk.data(), dv.data());
    linear_backward<T>(c.h1.data(), P<T>(p, block_param(l, "wq")), dq.data(), n, d, d, G<T>(grads, block_param(l, "wq")),
                       nullptr, dh1.data(), false);
    linear_backward<T>(c.h1.data(), P<T>(p, block_param(l, "wk")), dk.data(), n, d, d, G<T>(grads, block_param(l, "wk")),
                       nullptr, dh1.data(), true);
    linear_backward<T>(c.h1.data(), P<T>(p, block_param(l, "wv")), dv.data(), n, d, d, G<T>(grads, block_param(l, "wv")),
                       nullptr, dh1.data(), true);
    for (std::size_t i = 0; i < n * d; ++i) dx[i] = dx1[i];
    layernorm_backward(c.ln1, P<T>(p, block_param(l, "ln1.g")), dh1.data(), n, d, G<T>(grads, block_param(l, "ln1.g")),
                       G<T>(grads, block_param(l, "ln1.b")), dx, true);
}

template void block_forward<float>(const ParamSet&, std::size_t, const DitConfig&, const float*, std::size_t,
                                   const RopeTable<float>&, const MaskBits&, float*, BlockCache<float>&);
template void block_forward<double>(const ParamSet&, std::size_t, const DitConfig&, const double*, std::size_t,
                                    const RopeTable<double>&, const MaskBits&, double*, BlockCache<double>&);
template void block_backward<float>(const ParamSet&, std::size_t, const DitConfig&, const BlockCache<float>&,
                                    const RopeTable<float>&, const float*, float*, ParamSet&);
template void block_backward<double>(const ParamSet&, std::size_t, const DitConfig&, const BlockCache<double>&,
                                     const RopeTable<double>&, const double*, double*, ParamSet&);

} // namespace detail

namespace {

void check_block_input(const Tensor& x, const Layout& layout, const AttentionMask& mask, const DitConfig& cfg) {
    if (x.rank() != 2 || x.dim(0) != layout.total_len || x.dim(1) != cfg.attn.d_model) {
        throw ShapeError("block input must be [total_len x d_model], got " + dims_string(x.dims()));
    }
    if (layout.positions.size() != layout.total_len) throw LayoutError("layout positions are not assigned");
    if (mask.n_tokens() != layout.total_len) throw ShapeError("mask size differs from layout length");
}

template <class T>
Tensor block_forward_typed(const Tensor& x, const Layout& layout, const AttentionMask& mask, const ParamSet& p,
                           std::size_t layer, const DitConfig& cfg, detail::BlockCache<T>& cache) {
    const auto rope = detail::make_rope_table<T>(layout.positions, cfg.attn);
    const auto bits = detail::MaskBits::from(mask);
    Tensor y(dtype_of<T>(), x.dims());
    detail::block_forward(p, layer, cfg, x.data<T>().data(), layout.total_len, rope, bits, y.data<T>().data(), cache);
    return y;
}

} // namespace

Tensor dit_block_forward(const Tensor& x, const Layout& layout, const AttentionMask& mask, const ParamSet& params,
                         std::size_t layer, const DitConfig& cfg) {
    cfg.validate();
    check_block_input(x, layout, mask, cfg);
    if (layer >= cfg.n_layers) throw ShapeError("layer index out of range");
    if (params.tensors().empty() || params.tensors().front().dtype() != x.dtype()) throw ShapeError("params dtype differs from input");
    if (x.dtype() == DType::f32) {
        detail::BlockCache<float> c;
        return block_forward_typed<float>(x, layout, mask, params, layer, cfg, c);
    }
    detail::BlockCache<double> c;
    return block_forward_typed<double>(x, layout, mask, params, layer, cfg, c);
}

Tensor dit_block_backward(const Tensor& x, const Layout& layout, const AttentionMask& mask, const ParamSet& params,
                          std::size_t layer, const DitConfig& cfg, const Tensor& dy, ParamSet* grads) {
    cfg.validate();
    check_block_input(x, layout, mask, cfg);
    if (dy.dims() != x.dims() || dy.dtype() != x.dtype()) throw ShapeError("upstream gradient must match block input");
    ParamSet local = params.zeros_like();
    ParamSet& g = grads ? *grads : local;
    Tensor dx(x.dtype(), x.dims());
    auto run = [&]<class T>(T) {
        detail::BlockCache<T> c;
        block_forward_typed<T>(x, layout, mask, params, layer, cfg, c);
        const auto rope = detail::make_rope_table<T>(layout.positions, cfg.attn);
        detail::block_backward(params, layer, cfg, c, rope, dy.data<T>().data(), dx.data<T>().data(), g);
    };
    if (x.dtype() == DType::f32) {
        run(0.0f);
    } else {
        run(0.0);
    }
    return dx;
}

DitModel::DitModel(DitConfig cfg, ParamSet params) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    const ParamSet expect = init_dit_params(cfg_, RngKey{}, params_.tensors().empty() ? DType::f32 : params_.tensors().front().dtype());
    if (expect.names() != params_.names()) throw InputError("parameter set does not match the model config");
    for (std::size_t i = 0; i < expect.size(); ++i) {
        if (expect.tensors()[i].dims() != params_.tensors()[i].dims()) {
            throw ShapeError("parameter " + expect.names()[i] + " has the wrong shape");
        }
    }
}

template <class T>
std::vector<T> DitModel::forward(const Layout& layout, std::span<const T> features, const AttentionMask& mask,
                                 detail::ModelCache<T>* cache_out) const {
    const std::size_t n = layout.total_len, d = cfg_.attn.d_model, in = cfg_.in_dim, out = cfg_.out_dim;
    if (features.size() != n * in) throw ShapeError("features must be [total_len x in_dim]");
    if (layout.positions.size() != n) throw LayoutError("layout positions are not assigned");
    if (mask.n_tokens() != n) throw ShapeError("mask size differs from layout length");

    detail::ModelCache<T> local;
    detail::ModelCache<T>& c = cache_out ? *cache_out : local;
    c.n = n;
    c.features.assign(features.begin(), features.end());
    c.type_ids.resize(n);
    for (const auto& s : layout.segments) {
        for (std::size_t t = s.start; t < s.end; ++t) c.type_ids[t] = static_cast<std::size_t>(s.kind.type);
    }
    c.rope = detail::make_rope_table<T>(layout.positions, cfg_.attn);
    c.mask = detail::MaskBits::from(mask);

    c.xs.assign(cfg_.n_layers + 1, std::vector<T>(n * d));
    c.blocks.resize(cfg_.n_layers);
    std::vector<T>& x0 = c.xs[0];
    detail::linear_forward<T>(features.data(), detail::P<T>(params_, "embed.w"), detail::P<T>(params_, "embed.b").data(),
                              x0.data(), n, in, d);
    const auto type = detail::P<T>(params_, "embed.type");
    const auto pos = position_embedding(layout.positions, d);
    const T ps = static_cast<T>(cfg_.pos_scale);
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t j = 0; j < d; ++j) x0[t * d + j] += type[c.type_ids[t] * d + j] + ps * static_cast<T>(pos[t * d + j]);
    }
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        detail::block_forward(params_, l, cfg_, c.xs[l].data(), n, c.rope, c.mask, c.xs[l + 1].data(), c.blocks[l]);
    }
    c.hf.resize(n * d);
    detail::layernorm_forward(c.xs.back().data(), detail::P<T>(params_, "final.ln.g"), detail::P<T>(params_, "final.ln.b"),
                              c.hf.data(), n, d, c.lnf);
    std::vector<T> y(n * out);
    detail::linear_forward<T>(c.hf.data(), detail::P<T>(params_, "head.w"), detail::P<T>(params_, "head.b").data(), y.data(),
                              n, d, out);
    return y;
}

template <class T>
void DitModel::backward(const detail::ModelCache<T>& c, std::span<const T> dout, ParamSet& grads,
                        std::vector<T>* dfeatures) const {
    const std::size_t n = c.n, d = cfg_.attn.d_model, in = cfg_.in_dim, out = cfg_.out_dim;
    if (dout.size() != n * out) throw ShapeError("output gradient must be [total_len x out_dim]");
    std::vector<T> dhf(n * d), dx(n * d), dprev(n * d);
    detail::linear_backward<T>(c.hf.data(), detail::P<T>(params_, "head.w"), dout.data(), n, d, out,
                               detail::G<T>(grads, "head.w"), detail::G<T>(grads, "head.b").data(), dhf.data(), false);
    detail::layernorm_backward(c.lnf, detail::P<T>(params_, "final.ln.g"), dhf.data(), n, d, detail::G<T>(grads, "final.ln.g"),
                               detail::G<T>(grads, "final.ln.b"), dx.data(), false);
    for (std::size_t l = cfg_.n_layers; l-- > 0;) {
        detail::block_backward(params_, l, cfg_, c.blocks[l], c.rope, dx.data(), dprev.data(), grads);
        std::swap(dx, dprev);
    }
    auto dtype = detail::G<T>(grads, "embed.type");
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t j = 0; j < d; ++j) dtype[c.type_ids[t] * d + j] += dx[t * d + j];
    if (dfeatures) dfeatures->assign(n * in, T(0));
    detail::linear_backward<T>(c.features.data(), detail::P<T>(params_, "embed.w"), dx.data(), n, in, d,
                               detail::G<T>(grads, "embed.w"), detail::G<T>(grads, "embed.b").data(),
                               dfeatures ? dfeatures->data() : nullptr, false);
}

template std::vector<float> DitModel::forward<float>(const Layout&, std::span<const float>, const AttentionMask&,
                                                     detail::ModelCache<float>*) const;
template std::vector<double> DitModel::forward<double>(const Layout&, std::span<const double>, const AttentionMask&,
                                                       detail::ModelCache<double>*) const;
template void DitModel::backward<float>(const detail::ModelCache<float>&, std::span<const float>, ParamSet&,
                                        std::vector<float>*) const;
template void DitModel::backward<double>(const detail::ModelCache<double>&, std::span<const double>, ParamSet&,
                                         std::vector<double>*) const;

Tensor DitModel::forward(const Layout& layout, const Tensor& features, const AttentionMask& mask) const {
    const DType dt = params_.tensors().front().dtype();
    const Dims dims{layout.total_len, cfg_.out_dim};
    if (dt == DType::f32) return Tensor::from_f32(dims, forward<float>(layout, features.as(DType::f32).f32(), mask));
    return Tensor::from_f64(dims, forward<double>(layout, features.as(DType::f64).f64(), mask));
}

void save_checkpoint(const std::filesystem::path& dir, const DitConfig& cfg, const ParamSet& params,
                     const nlohmann::json& extra) {
    std::filesystem::create_directories(dir);
    nlohmann::json tensors = nlohmann::json::array();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::string file = params.names()[i] + ".cagt";
        write_tensor(dir / file, params.tensors()[i]);
        tensors.push_back({{"name", params.names()[i]}, {"shape", params.tensors()[i].dims()}, {"file", file}});
    }
    nlohmann::json manifest{{"format", "cag-checkpoint/1"}, {"config", cfg.to_json()}, {"tensors", tensors}, {"extra", extra}};
    std::ofstream f(dir / "manifest.json");
    f << manifest.dump(2) << "\n";
    if (!f) throw FormatError("cannot write checkpoint manifest in " + dir.string());
}

DitModel load_checkpoint(const std::filesystem::path& dir, nlohmann::json* manifest_out) {
    std::ifstream f(dir / "manifest.json");
    if (!f) throw FormatError("no checkpoint manifest in " + dir.string());
    nlohmann::json manifest;
    try {
        f >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed checkpoint manifest: ") + e.what());
    }
    const DitConfig cfg = DitConfig::from_json(manifest.at("config"));
    ParamSet params;
    for (const auto& t : manifest.at("tensors")) {
        Tensor v = read_tensor(dir / t.at("file").get<std::string>());
        if (v.dims() != t.at("shape").get<Dims>()) throw FormatError("checkpoint tensor shape differs from manifest");
        params.add(t.at("name").get<std::string>(), std::move(v));
    }
    if (manifest_out) *manifest_out = manifest;
    return DitModel(cfg, std::move(params));
}

} // namespace cag
