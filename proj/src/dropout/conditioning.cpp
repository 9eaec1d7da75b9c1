#include "cag/dropout/conditioning.hpp"

#include "cag/error.hpp"

namespace cag {

void DropoutConfig::validate() const {
    if (!(p_vae >= 0.0 && p_vae <= 1.0)) throw InputError("dropout.p_vae must lie in [0, 1]");
    if (!(p_text >= 0.0 && p_text <= 1.0)) throw InputError("dropout.p_text must lie in [0, 1]");
}

DropDecision sample_drop(const DropoutConfig& config, const RngKey& key) {
    config.validate();
    // u < p, so p = 0 never drops and p = 1 always does.
    return {rng_uniform(key.split("dropout.vae")) < config.p_vae, rng_uniform(key.split("dropout.text")) < config.p_text};
}

namespace {

Tensor null_like(const Tensor& t, const Tensor* null_value) {
    if (!null_value) return Tensor(t.dtype(), t.dims());
    if (null_value->dims() != t.dims() || null_value->dtype() != t.dtype()) {
        throw ShapeError("null embedding must match the text features, got " + dims_string(null_value->dims()));
    }
    return *null_value;
}

} // namespace

ConditioningBundle apply_drop(const ConditioningBundle& bundle, DropDecision decision, bool full_unconditional,
                              const Tensor* null_text) {
    ConditioningBundle out = bundle;
    out.drop_vae = bundle.drop_vae || decision.drop_vae;
    out.drop_text = bundle.drop_text || decision.drop_text;
    if (out.drop_vae) out.vae_ref.reset();
    if (decision.drop_text) {
        if (out.vlm_text) out.vlm_text = null_like(*out.vlm_text, null_text);
        if (full_unconditional && out.vlm_ref) {
            for (auto& t : *out.vlm_ref) t = Tensor(t.dtype(), t.dims());
        }
    }
    return out;
}

ConditioningBundle sample_conditioning(const ConditioningBundle& bundle, const DropoutConfig& config, const RngKey& key,
                                       const Tensor* null_text) {
    if (!bundle.vae_ref || !bundle.vlm_text || !bundle.vlm_ref) throw InputError("dropout sampling needs a full bundle");
    return apply_drop(bundle, sample_drop(config, key), config.full_unconditional, null_text);
}

ConditionedSequence condition_sequence(const Layout& full_layout, const GroundingSet& groundings, bool drop_vae,
                                       bool masked, std::size_t stride_px) {
    ConditionedSequence s{drop_vae ? without_vae_refs(full_layout) : full_layout, {}};
    s.mask = masked ? compile_mask(s.layout, groundings, drop_vae, stride_px) : full_mask(s.layout.total_len);
    return s;
}

Tensor cfg_combine(const Tensor& cond_out, const Tensor& uncond_out, double scale) {
    if (cond_out.dims() != uncond_out.dims() || cond_out.dtype() != uncond_out.dtype()) {
        throw ShapeError("cfg_combine needs equal shapes, got " + dims_string(cond_out.dims()) + " and " +
                         dims_string(uncond_out.dims()));
    }
    Tensor out(cond_out.dtype(), cond_out.dims());
    auto run = [&]<class T>(T) {
        const auto c = cond_out.data<T>(), u = uncond_out.data<T>();
        auto o = out.data<T>();
        // (1 - s) u + s c is exact at s = 0 and s = 1, unlike u + s (c - u).
        const T s = static_cast<T>(scale), r = static_cast<T>(1.0 - scale);
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = r * u[i] + s * c[i];
    };
    if (cond_out.dtype() == DType::f32) {
        run(0.0f);
    } else if (cond_out.dtype() == DType::f64) {
        run(0.0);
    } else {
        throw ShapeError("cfg_combine needs f32 or f64 tensors");
    }
    return out;
}

} // namespace cag
