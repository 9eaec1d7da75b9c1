#include "cag/harness/config.hpp"

#include <fstream>
#include <map>

#include "cag/error.hpp"

namespace cag {

namespace {

void flatten(const nlohmann::json& j, const std::string& prefix, std::map<std::string, nlohmann::json>& out) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (it->is_object()) {
            flatten(*it, key, out);
        } else {
            if (out.count(key)) throw InputError("config key '" + key + "' given twice");
            out[key] = *it;
        }
    }
}

template <class T>
void take(std::map<std::string, nlohmann::json>& kv, const std::string& key, T& dst) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    try {
        if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
            if (!it->second.is_number_unsigned()) throw InputError("");
        } else if constexpr (std::is_same_v<T, double>) {
            if (!it->second.is_number()) throw InputError("");
        } else if constexpr (std::is_same_v<T, bool>) {
            if (!it->second.is_boolean()) throw InputError("");
        }
        dst = it->second.get<T>();
    } catch (const std::exception&) {
        throw InputError("config key '" + key + "' has the wrong type: " + it->second.dump());
    }
    kv.erase(it);
}

} // namespace

HarnessConfig config_from_json(const nlohmann::json& j, HarnessConfig c) {
    if (!j.is_object()) throw InputError("config must be a JSON object");
    std::map<std::string, nlohmann::json> kv;
    flatten(j, "", kv);

    take(kv, "dropout.p_vae", c.train.dropout.p_vae);
    take(kv, "dropout.p_text", c.train.dropout.p_text);
    take(kv, "dropout.full_unconditional", c.train.dropout.full_unconditional);
    take(kv, "cfg.scale", c.train.cfg_scale);
    take(kv, "sampler.steps", c.train.sampler_steps);

    auto& m = c.train.model;
    take(kv, "model.d_model", m.attn.d_model);
    take(kv, "model.n_heads", m.attn.n_heads);
    take(kv, "model.rope_base", m.attn.rope_base);
    take(kv, "model.n_layers", m.n_layers);
    take(kv, "model.d_ff", m.d_ff);
    take(kv, "model.init_std", m.init_std);
    take(kv, "model.pos_scale", m.pos_scale);

    std::string mode;
    take(kv, "train.mask_mode", mode);
    if (!mode.empty()) {
        if (mode != "masked" && mode != "full") throw InputError("train.mask_mode must be masked or full");
        c.train.masked = mode == "masked";
    }
    take(kv, "train.steps", c.train.steps);
    take(kv, "train.batch", c.train.batch);
    take(kv, "train.lr", c.train.lr);
    take(kv, "train.warmup", c.train.warmup);
    take(kv, "train.grad_clip", c.train.grad_clip);
    take(kv, "train.t_power", c.train.t_power);
    take(kv, "train.eval_scenes", c.train.eval_scenes);

    take(kv, "toy.n_refs", c.toy.n_refs);
    take(kv, "toy.grid", c.toy.grid);
    take(kv, "toy.feat_dim", c.toy.feat_dim);
    take(kv, "toy.vlm_len", c.toy.vlm_len);
    take(kv, "toy.stride_px", c.toy.stride_px);
    take(kv, "toy.n_classes", c.toy.n_classes);
    take(kv, "toy.vlm_noise", c.toy.vlm_noise);
    take(kv, "toy.bbox_policy", c.toy.bbox_policy);
    take(kv, "toy.n_train", c.n_train);
    take(kv, "toy.n_eval", c.n_eval);

    take(kv, "ablate.p_list", c.ablate.p_list);
    take(kv, "ablate.seeds", c.ablate.seeds);

    take(kv, "vlm.url", c.vlm.base_url);
    take(kv, "vlm.model", c.vlm.model);
    take(kv, "vlm.key", c.vlm.api_key);
    take(kv, "vlm.timeout_s", c.vlm.timeout_s);
    std::string cache;
    take(kv, "vlm.cache_dir", cache);
    if (!cache.empty()) c.cache_dir = cache;

    if (!kv.empty()) throw InputError("unknown config key '" + kv.begin()->first + "'");
    c.train.dropout.validate();
    c.train.model.validate();
    c.toy.validate();
    return c;
}

HarnessConfig load_config(const std::filesystem::path& path, HarnessConfig base) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j, std::move(base));
}

nlohmann::json HarnessConfig::to_json() const {
    const auto& m = train.model;
    return {{"dropout.p_vae", train.dropout.p_vae},
            {"dropout.p_text", train.dropout.p_text},
            {"dropout.full_unconditional", train.dropout.full_unconditional},
            {"cfg.scale", train.cfg_scale},
            {"sampler.steps", train.sampler_steps},
            {"model.d_model", m.attn.d_model},
            {"model.n_heads", m.attn.n_heads},
            {"model.rope_base", m.attn.rope_base},
            {"model.n_layers", m.n_layers},
            {"model.d_ff", m.d_ff},
            {"model.init_std", m.init_std},
            {"model.pos_scale", m.pos_scale},
            {"train.mask_mode", train.masked ? "masked" : "full"},
            {"train.steps", train.steps},
            {"train.batch", train.batch},
            {"train.lr", train.lr},
            {"train.warmup", train.warmup},
            {"train.grad_clip", train.grad_clip},
            {"train.t_power", train.t_power},
            {"train.eval_scenes", train.eval_scenes},
            {"toy.n_refs", toy.n_refs},
            {"toy.grid", toy.grid},
            {"toy.feat_dim", toy.feat_dim},
            {"toy.vlm_len", toy.vlm_len},
            {"toy.stride_px", toy.stride_px},
            {"toy.n_classes", toy.n_classes},
            {"toy.vlm_noise", toy.vlm_noise},
            {"toy.bbox_policy", toy.bbox_policy},
            {"toy.n_train", n_train},
            {"toy.n_eval", n_eval},
            {"ablate.p_list", ablate.p_list},
            {"ablate.seeds", ablate.seeds},
            {"vlm.url", vlm.base_url},
            {"vlm.model", vlm.model},
            {"vlm.timeout_s", vlm.timeout_s},
            {"vlm.cache_dir", cache_dir.string()}};
}

} // namespace cag
