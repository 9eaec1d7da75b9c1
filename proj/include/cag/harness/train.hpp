#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cag/attention/dit.hpp"
#include "cag/dropout/conditioning.hpp"
#include "cag/harness/toy.hpp"

namespace cag {

struct TrainOptions {
    DitConfig model;  // in_dim/out_dim are taken from the dataset
    bool masked = true;
    DropoutConfig dropout;
    std::size_t steps = 800;
    std::size_t batch = 16;
    double lr = 3e-3;
    std::size_t warmup = 50;
    double grad_clip = 1.0;
    double t_power = 2.0;  // training times are u^t_power, u uniform; > 1 favours the noisy end
    std::uint64_t seed = 0;
    double cfg_scale = 1.0;  // 1 = conditional output only
    std::size_t sampler_steps = 25;
    std::size_t eval_scenes = 0;  // 0 = whole eval split

    nlohmann::json to_json() const;
};

// Fraction of a referential word's attention that lands on its grounded
// reference tokens, averaged over word rows, layers, heads and scenes.
struct AttnMass {
    double in_bbox = 0;      // over all keys
    double on_refs = 0;      // over every reference VAE key
    double floor = 0;        // uniform-attention expectation |bbox| / |allowed|
    double floor_stderr = 0; // standard error of the per-row floor values
    std::size_t rows = 0;
    nlohmann::json to_json() const;
};

struct TrainRun {
    TrainOptions options;
    std::vector<double> losses;
    double recon_with_vae = 0;
    double recon_without_vae = 0;
    AttnMass attn;
    double wall_s = 0;
    DitConfig model_config;
    ParamSet params;

    nlohmann::json to_json() const;  // everything but the parameters
};

using ProgressFn = std::function<void(std::size_t step, double loss)>;

// A non-finite loss writes <dump_dir>/nan_dump.json (when dump_dir is set)
// and throws NumericError.
TrainRun train_toy(const ToyDataset& ds, const TrainOptions& options, const std::filesystem::path& dump_dir = {},
                   const ProgressFn& progress = {});

DitConfig toy_model_config(const ToyDataset& ds, DitConfig base);

// Euler sampling of the target from keyed noise; mean squared error against
// the clean target over the eval split. Without VAE the reference VAE
// segments are removed from the sequence.
double eval_recon(const DitModel& model, const ToyDataset& ds, bool masked, bool with_vae, double cfg_scale,
                  std::size_t steps, std::size_t max_scenes, std::uint64_t seed);

// Attention mass at a fixed mid-trajectory noise level, VAE references present.
AttnMass eval_attn_mass(const DitModel& model, const ToyDataset& ds, bool masked, std::size_t max_scenes,
                        std::uint64_t seed);

// Attention of one referential word over each reference grid, [rows x cols]
// per reference, averaged over the word's tokens. Throws InputError naming
// the valid words when `word` is not referential in the scene.
std::vector<Tensor> word_attention_maps(const DitModel& model, const ToyDataset& ds, const ToySplit& split,
                                        std::size_t scene, const std::string& word, std::size_t layer,
                                        std::size_t head, bool masked);

// Binary PGM (P5, maxval 255) of a [rows x cols] f64 map scaled so that
// max_value maps to 255. Zero stays exactly zero.
std::string encode_pgm(const Tensor& map, double max_value);

struct AblationOptions {
    std::vector<double> p_list{0.0, 0.5, 1.0};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    bool eval_with_vae = true;
    bool eval_without_vae = true;
};

// One model per (p, seed); returns the report JSON and fills `csv`.
// `on_run` sees every finished run, parameters included.
nlohmann::json ablate_dropout(const ToyDataset& ds, const TrainOptions& base, const AblationOptions& ab,
                              std::string* csv, const std::function<void(const std::string&)>& log = {},
                              const std::function<void(const TrainRun&)>& on_run = {});

} // namespace cag
