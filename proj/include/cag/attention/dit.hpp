#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cag/attention/attention.hpp"
#include "cag/attention/detail/attention_kernels.hpp"
#include "cag/numerics/rng.hpp"

namespace cag {

// Toy DiT: input projection + stream-type embedding + fixed sin-cos position
// embedding, then n_layers pre-norm blocks
//   x + attn(LN(x)) -> x1 + ffn(LN(x1))
// sharing one correspondence mask, then a final LN and a linear head.
struct DitConfig {
    AttentionConfig attn;
    std::size_t n_layers = 2;
    std::size_t d_ff = 128;
    std::size_t in_dim = 8;
    std::size_t out_dim = 8;
    double init_std = 0.02;
    double pos_scale = 1.0;  // multiplier on the fixed position embedding; 0 disables it

    void validate() const;
    nlohmann::json to_json() const;
    static DitConfig from_json(const nlohmann::json& j);
};

// Ordered named parameter tensors, all of one dtype.
class ParamSet {
public:
    void add(std::string name, Tensor t);
    bool has(const std::string& name) const;
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;

    const std::vector<std::string>& names() const { return names_; }
    std::vector<Tensor>& tensors() { return tensors_; }
    const std::vector<Tensor>& tensors() const { return tensors_; }
    std::size_t size() const { return names_.size(); }
    std::size_t scalar_count() const;

    ParamSet zeros_like() const;
    ParamSet as(DType dtype) const;
    void fill_zero();

    bool operator==(const ParamSet&) const = default;

private:
    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
};

std::string block_param(std::size_t layer, const char* name);

ParamSet init_dit_params(const DitConfig& cfg, RngKey key, DType dtype = DType::f32);

// Fixed 2D sin-cos embedding of layout positions, [n x d_model].
std::vector<double> position_embedding(std::span<const Position> positions, std::size_t d_model);

namespace detail {

template <class T>
struct LayerNormCache {
    std::vector<T> xhat, rstd;
};

template <class T>
struct BlockCache {
    std::vector<T> x, h1, q, k, v, a, x1, h2, u, g;
    LayerNormCache<T> ln1, ln2;
    AttentionCache<T> attn;
};

template <class T>
struct ModelCache {
    std::size_t n = 0;
    std::vector<T> features;
    std::vector<std::size_t> type_ids;
    std::vector<std::vector<T>> xs;  // xs[l] is the input to block l, xs[L] the last block output
    std::vector<BlockCache<T>> blocks;
    LayerNormCache<T> lnf;
    std::vector<T> hf;
    RopeTable<T> rope;
    MaskBits mask;
};

template <class T>
void block_forward(const ParamSet& p, std::size_t layer, const DitConfig& cfg, const T* x, std::size_t n,
                   const RopeTable<T>& rope, const MaskBits& mask, T* y, BlockCache<T>& cache);

// Accumulates parameter gradients into `grads` and writes dL/dx.
template <class T>
void block_backward(const ParamSet& p, std::size_t layer, const DitConfig& cfg, const BlockCache<T>& cache,
                    const RopeTable<T>& rope, const T* dy, T* dx, ParamSet& grads);

} // namespace detail

// One block on a laid-out sequence x [n x d_model].
Tensor dit_block_forward(const Tensor& x, const Layout& layout, const AttentionMask& mask, const ParamSet& params,
                         std::size_t layer, const DitConfig& cfg);
// dL/dx for upstream dL/dy; parameter gradients are added into `grads` when given.
Tensor dit_block_backward(const Tensor& x, const Layout& layout, const AttentionMask& mask, const ParamSet& params,
                          std::size_t layer, const DitConfig& cfg, const Tensor& dy, ParamSet* grads = nullptr);

// Whole-model pass. `features` is [n x in_dim]; the output is [n x out_dim]
// for every token (callers read the target rows).
class DitModel {
public:
    DitModel(DitConfig cfg, ParamSet params);

    const DitConfig& config() const { return cfg_; }
    const ParamSet& params() const { return params_; }
    ParamSet& params() { return params_; }

    template <class T>
    std::vector<T> forward(const Layout& layout, std::span<const T> features, const AttentionMask& mask,
                           detail::ModelCache<T>* cache = nullptr) const;

    // Gradient of a loss whose derivative w.r.t. the output is `dout`.
    template <class T>
    void backward(const detail::ModelCache<T>& cache, std::span<const T> dout, ParamSet& grads,
                  std::vector<T>* dfeatures = nullptr) const;

    Tensor forward(const Layout& layout, const Tensor& features, const AttentionMask& mask) const;

private:
    DitConfig cfg_;
    ParamSet params_;
};

// Checkpoint directory: one CAGT file per parameter plus manifest.json with
// the config, tensor names and shapes.
void save_checkpoint(const std::filesystem::path& dir, const DitConfig& cfg, const ParamSet& params,
                     const nlohmann::json& extra = nlohmann::json::object());
DitModel load_checkpoint(const std::filesystem::path& dir, nlohmann::json* manifest = nullptr);

} // namespace cag
