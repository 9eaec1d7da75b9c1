#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cag/grounding/types.hpp"
#include "cag/layout/token_layout.hpp"
#include "cag/numerics/tensor.hpp"

namespace cag {

// Synthetic "referential copy" task. Each reference grid holds one subject: a
// rectangle filled with a single appearance code, surrounded by per-cell
// clutter. The instruction names the reference subjects by class word in some
// order, e.g. "fox and cup"; the target is split into vertical strips and the
// k-th strip must reproduce the appearance of the k-th named subject.
//
// Streams seen by the model, per token, in a feature vector of width
// 2 * feat_dim + 1 laid out as [appearance | semantics | t]:
//   VlmRef(i)  appearance = lossy copy of subject i (first half of the dims
//              plus noise), semantics = class embedding of subject i
//   VlmText    semantics = word embedding (zero when text is dropped)
//   VaeTarget  appearance = noised target cell
//   VaeRef(i)  appearance = exact cell values of reference grid i
// The VAE stream is exact and carries no class; the VLM stream carries the
// class but only part of the appearance.
struct ToySpec {
    std::size_t n_refs = 2;
    std::size_t grid = 4;  // reference and target grids are grid x grid
    std::size_t feat_dim = 8;
    std::size_t vlm_len = 2;  // VLM tokens per reference
    std::size_t stride_px = 16;
    std::size_t n_classes = 8;
    double vlm_noise = 0.1;
    std::string bbox_policy = "random";  // random | full

    std::size_t in_dim() const { return 2 * feat_dim + 1; }
    void validate() const;
    nlohmann::json to_json() const;
    static ToySpec from_json(const nlohmann::json& j);
};

struct CellRect {
    std::size_t row = 0, col = 0, rows = 0, cols = 0;
    bool contains(std::size_t r, std::size_t c) const { return r >= row && r < row + rows && c >= col && c < col + cols; }
    bool operator==(const CellRect&) const = default;
};

struct ToyScene {
    std::vector<std::size_t> ref_class;  // class of each reference subject
    std::vector<std::size_t> order;      // order[k] = reference placed in strip k
    std::vector<CellRect> subject;       // subject rectangle in each reference grid
    std::vector<std::string> tokens;     // instruction tokens
    std::vector<std::size_t> token_ids;  // vocabulary ids of the tokens
    GroundingSet groundings;
    bool operator==(const ToyScene&) const = default;
};

// Tensors are stacked over scenes:
//   colors  [S, N, F]        subject appearance codes
//   ref_vae [S, N, G*G, F]   reference grids
//   vlm_ref [S, N, L, F]     VLM reference tokens
//   target  [S, G*G, F]      clean target grid
struct ToySplit {
    std::vector<ToyScene> scenes;
    Tensor colors, ref_vae, vlm_ref, target;
    std::size_t size() const { return scenes.size(); }
};

struct ToyDataset {
    ToySpec spec;
    std::uint64_t seed = 0;
    std::vector<std::string> vocab;  // class words, then "and"
    Tensor vocab_emb;                  // [V, F]
    ToySplit train, eval;

    Layout layout() const;  // full layout shared by every scene
};

std::vector<std::string> toy_class_words(std::size_t n_classes);

// Deterministic per (seed, spec, sizes); the eval split uses its own stream.
ToyDataset gen_toy_dataset(std::uint64_t seed, std::size_t n_train, std::size_t n_eval, const ToySpec& spec);

// Directory of CAGT tensors (train_*.cagt, eval_*.cagt, vocab.cagt) plus scenes.json.
void save_toy_dataset(const ToyDataset& ds, const std::filesystem::path& dir);
ToyDataset load_toy_dataset(const std::filesystem::path& dir);

// Rebuilds the target from the scene program; used to check a dataset.
std::vector<float> replay_target(const ToyDataset& ds, const ToySplit& split, std::size_t scene);

// Per-token model input, [layout.total_len x in_dim], for a layout that is
// either the full one or the full one without VaeRef segments.
std::vector<float> toy_features(const ToyDataset& ds, const ToySplit& split, std::size_t scene, const Layout& layout,
                                std::span<const float> x_t, float t, bool drop_text);

} // namespace cag
