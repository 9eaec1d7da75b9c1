#pragma once

#include <optional>
#include <vector>

#include "cag/grounding/types.hpp"
#include "cag/layout/token_layout.hpp"
#include "cag/mask/attention_mask.hpp"
#include "cag/numerics/rng.hpp"
#include "cag/numerics/tensor.hpp"

namespace cag {

struct DropoutConfig {
    double p_vae = 0.5;
    double p_text = 0.1;
    // Text dropout also nulls the VLM reference features when set.
    bool full_unconditional = false;

    void validate() const;  // InputError unless both probabilities lie in [0, 1]
};

struct DropDecision {
    bool drop_vae = false;
    bool drop_text = false;
    bool operator==(const DropDecision&) const = default;
};

// The two decisions use separate child streams of `key`, so they are
// independent and each is a pure function of the key.
DropDecision sample_drop(const DropoutConfig& config, const RngKey& key);

struct ConditioningBundle {
    std::optional<std::vector<Tensor>> vlm_ref;  // h_i^r, one per reference
    std::optional<Tensor> vlm_text;              // h^e
    std::optional<std::vector<Tensor>> vae_ref;  // v_i^r
    Tensor vae_target;                           // noised target latents
    bool drop_vae = false;
    bool drop_text = false;
};

// Applies sampled dropout to a full bundle. Dropped reference VAE features are
// removed as a set. Dropped text is replaced by `null_text` (zeros of the same
// shape when not given) so sequence length and positions stay fixed.
ConditioningBundle sample_conditioning(const ConditioningBundle& bundle, const DropoutConfig& config, const RngKey& key,
                                       const Tensor* null_text = nullptr);

// Same substitution for a known decision (used for the CFG unconditional pass).
ConditioningBundle apply_drop(const ConditioningBundle& bundle, DropDecision decision, bool full_unconditional,
                              const Tensor* null_text = nullptr);

// Sequence layout and mask matching a bundle: without VaeRef segments when the
// VAE references are dropped, and with the correspondence mask when `masked`.
struct ConditionedSequence {
    Layout layout;
    AttentionMask mask;
};

ConditionedSequence condition_sequence(const Layout& full_layout, const GroundingSet& groundings, bool drop_vae,
                                       bool masked, std::size_t stride_px);

// uncond + scale * (cond - uncond)
Tensor cfg_combine(const Tensor& cond_out, const Tensor& uncond_out, double scale);

} // namespace cag
