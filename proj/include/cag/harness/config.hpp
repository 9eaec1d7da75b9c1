#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "cag/grounding/vlm.hpp"
#include "cag/harness/toy.hpp"
#include "cag/harness/train.hpp"

namespace cag {

struct HarnessConfig {
    TrainOptions train;
    ToySpec toy;
    std::size_t n_train = 4096;
    std::size_t n_eval = 64;
    AblationOptions ablate;
    RemoteConfig vlm;
    std::filesystem::path cache_dir;

    nlohmann::json to_json() const;  // flat dotted keys
};

// Accepts nested objects ({"dropout": {"p_vae": 0.5}}), dotted keys
// ({"dropout.p_vae": 0.5}) or a mix. Unknown keys and wrongly typed values
// throw InputError.
HarnessConfig config_from_json(const nlohmann::json& j, HarnessConfig base = {});
HarnessConfig load_config(const std::filesystem::path& path, HarnessConfig base = {});

} // namespace cag
