#include "cag/harness/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "cag/error.hpp"
#include "cag/numerics/rng.hpp"

namespace cag {

nlohmann::json TrainOptions::to_json() const {
    return {{"model", model.to_json()},
            {"mask_mode", masked ? "masked" : "full"},
            {"dropout", {{"p_vae", dropout.p_vae}, {"p_text", dropout.p_text}, {"full_unconditional", dropout.full_unconditional}}},
            {"steps", steps},
            {"batch", batch},
            {"lr", lr},
            {"warmup", warmup},
            {"grad_clip", grad_clip},
            {"t_power", t_power},
            {"seed", seed},
            {"cfg_scale", cfg_scale},
            {"sampler_steps", sampler_steps},
            {"eval_scenes", eval_scenes}};
}

nlohmann::json AttnMass::to_json() const {
    return {{"in_bbox", in_bbox}, {"on_refs", on_refs}, {"floor", floor}, {"floor_stderr", floor_stderr}, {"rows", rows}};
}

nlohmann::json TrainRun::to_json() const {
    return {{"config", options.to_json()},
            {"model", model_config.to_json()},
            {"seed", options.seed},
            {"losses", losses},
            {"metrics", {{"recon_error", recon_with_vae}, {"recon_error_without_vae", recon_without_vae}, {"attn_mass_in_bbox", attn.in_bbox}}},
            {"attn", attn.to_json()},
            {"wall_s", wall_s}};
}

DitConfig toy_model_config(const ToyDataset& ds, DitConfig base) {
    base.in_dim = ds.spec.in_dim();
    base.out_dim = ds.spec.feat_dim;
    base.validate();
    return base;
}

namespace {

struct SceneSeqs {
    ConditionedSequence with_vae, without_vae;
};

std::vector<SceneSeqs> compile_sequences(const ToyDataset& ds, const ToySplit& split, bool masked, std::size_t n) {
    const Layout full = ds.layout();
    std::vector<SceneSeqs> out;
    out.reserve(n);
    for (std::size_t s = 0; s < n; ++s) {
        const auto& g = split.scenes[s].groundings;
        out.push_back({condition_sequence(full, g, false, masked, ds.spec.stride_px),
                       condition_sequence(full, g, true, masked, ds.spec.stride_px)});
    }
    return out;
}

std::size_t eval_count(const ToyDataset& ds, std::size_t max_scenes) {
    if (ds.eval.size() == 0) throw InputError("dataset has no eval split");
    return max_scenes == 0 ? ds.eval.size() : std::min(max_scenes, ds.eval.size());
}

// Predicted clean target rows of a forward pass.
std::vector<float> target_rows(const std::vector<float>& out, const Layout& layout, std::size_t F) {
    const Segment& t = layout.target();
    return {out.begin() + static_cast<std::ptrdiff_t>(t.start * F), out.begin() + static_cast<std::ptrdiff_t>(t.end * F)};
}

void write_nan_dump(const std::filesystem::path& dir, std::size_t step, const nlohmann::json& batch, double loss) {
    if (dir.empty()) return;
    std::filesystem::create_directories(dir);
    std::ofstream f(dir / "nan_dump.json");
    f << nlohmann::json{{"step", step}, {"loss", std::isnan(loss) ? "nan" : "inf"}, {"batch", batch}}.dump(2) << "\n";
}

} // namespace

TrainRun train_toy(const ToyDataset& ds, const TrainOptions& opt, const std::filesystem::path& dump_dir,
                   const ProgressFn& progress) {
    opt.dropout.validate();
    if (opt.batch == 0) throw InputError("batch size must be positive");
    const auto t0 = std::chrono::steady_clock::now();
    TrainRun run;
    run.options = opt;
    run.model_config = toy_model_config(ds, opt.model);
    const std::size_t F = ds.spec.feat_dim, A = ds.spec.grid * ds.spec.grid;
    const RngKey root{opt.seed, stream_label("train"), 0};

    DitModel model(run.model_config, init_dit_params(run.model_config, root.split("init"), DType::f32));
    ParamSet grads = model.params().zeros_like();
    std::vector<std::vector<float>> m, v;
    for (const auto& t : model.params().tensors()) {
        m.emplace_back(t.numel(), 0.0f);
        v.emplace_back(t.numel(), 0.0f);
    }
    const auto seqs = compile_sequences(ds, ds.train, opt.masked, ds.train.size());
    const auto target = ds.train.target.f32();
    detail::ModelCache<float> cache;
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;

    for (std::size_t step = 0; step < opt.steps; ++step) {
        grads.fill_zero();
        RngCursor rng(root.split("batch").split(static_cast<std::uint64_t>(step)));
        double loss = 0;
        nlohmann::json batch_info = nlohmann::json::array();
        for (std::size_t b = 0; b < opt.batch; ++b) {
            const std::size_t s = rng.below(ds.train.size());
            const DropDecision d = sample_drop(opt.dropout, rng.key().split("drop").with_counter(b));
            const float t = static_cast<float>(std::pow(rng.uniform(), opt.t_power));
            const float* x1 = target.data() + s * A * F;
            std::vector<float> xt(A * F);
            for (std::size_t i = 0; i < A * F; ++i) xt[i] = (1.0f - t) * static_cast<float>(rng.normal()) + t * x1[i];
            const ConditionedSequence& seq = d.drop_vae ? seqs[s].without_vae : seqs[s].with_vae;
            const auto feats = toy_features(ds, ds.train, s, seq.layout, xt, t, d.drop_text);
            const auto out = model.forward<float>(seq.layout, feats, seq.mask, &cache);

            std::vector<float> dout(out.size(), 0.0f);
            const std::size_t off = seq.layout.target().start * F;
            const float scale = 2.0f / static_cast<float>(A * F * opt.batch);
            double l = 0;
            for (std::size_t i = 0; i < A * F; ++i) {
                const float e = out[off + i] - x1[i];
                l += static_cast<double>(e) * e;
                dout[off + i] = scale * e;
            }
            l /= static_cast<double>(A * F);
            loss += l / static_cast<double>(opt.batch);
            batch_info.push_back({{"scene", s}, {"t", t}, {"drop_vae", d.drop_vae}, {"drop_text", d.drop_text}, {"loss", l}});
            model.backward<float>(cache, dout, grads);
        }
        if (!std::isfinite(loss)) {
            write_nan_dump(dump_dir, step, batch_info, loss);
            throw NumericError("non-finite training loss at step " + std::to_string(step));
        }
        run.losses.push_back(loss);

        double gnorm2 = 0;
        for (const auto& g : grads.tensors())
            for (float x : g.f32()) gnorm2 += static_cast<double>(x) * x;
        const double clip = opt.grad_clip > 0 && std::sqrt(gnorm2) > opt.grad_clip ? opt.grad_clip / std::sqrt(gnorm2) : 1.0;
        const double lr = opt.lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(std::max<std::size_t>(1, opt.warmup)));
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step + 1));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step + 1));
        for (std::size_t p = 0; p < grads.size(); ++p) {
            auto w = model.params().tensors()[p].f32();
            const auto g = grads.tensors()[p].f32();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = static_cast<double>(g[i]) * clip;
                m[p][i] = static_cast<float>(b1 * m[p][i] + (1 - b1) * gi);
                v[p][i] = static_cast<float>(b2 * v[p][i] + (1 - b2) * gi * gi);
                w[i] -= static_cast<float>(lr * (m[p][i] / bc1) / (std::sqrt(v[p][i] / bc2) + eps));
            }
        }
        if (progress) progress(step, loss);
    }

    run.recon_with_vae = eval_recon(model, ds, opt.masked, true, opt.cfg_scale, opt.sampler_steps, opt.eval_scenes, opt.seed);
    run.recon_without_vae = eval_recon(model, ds, opt.masked, false, opt.cfg_scale, opt.sampler_steps, opt.eval_scenes, opt.seed);
    run.attn = eval_attn_mass(model, ds, opt.masked, opt.eval_scenes, opt.seed);
    for (double x : {run.recon_with_vae, run.recon_without_vae, run.attn.in_bbox}) {
        if (!std::isfinite(x)) throw NumericError("non-finite evaluation metric");
    }
    run.params = model.params();
    run.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return run;
}

double eval_recon(const DitModel& model, const ToyDataset& ds, bool masked, bool with_vae, double cfg_scale,
                  std::size_t steps, std::size_t max_scenes, std::uint64_t seed) {
    if (steps == 0) throw InputError("sampler.steps must be positive");
    const std::size_t n = eval_count(ds, max_scenes), F = ds.spec.feat_dim, A = ds.spec.grid * ds.spec.grid;
    const auto seqs = compile_sequences(ds, ds.eval, masked, n);
    const auto target = ds.eval.target.f32();
    const bool guided = cfg_scale != 1.0;
    const float w = static_cast<float>(cfg_scale);
    // The sampling noise depends only on the seed and scene, so every model
    // evaluated with one seed starts from the same noise.
    const RngKey root{seed, stream_label("eval.noise"), 0};
    double total = 0;
    for (std::size_t s = 0; s < n; ++s) {
        const ConditionedSequence& seq = with_vae ? seqs[s].with_vae : seqs[s].without_vae;
        RngCursor rng(root.split(static_cast<std::uint64_t>(s)));
        std::vector<float> x(A * F);
        for (auto& xi : x) xi = static_cast<float>(rng.normal());
        for (std::size_t k = 0; k < steps; ++k) {
            const float t = static_cast<float>(k) / static_cast<float>(steps);
            auto pred = target_rows(model.forward<float>(seq.layout, toy_features(ds, ds.eval, s, seq.layout, x, t, false), seq.mask),
                                    seq.layout, F);
            if (guided) {
                const auto un = target_rows(
                    model.forward<float>(seq.layout, toy_features(ds, ds.eval, s, seq.layout, x, t, true), seq.mask), seq.layout, F);
                for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = (1.0f - w) * un[i] + w * pred[i];
            }
            const float dt = 1.0f / static_cast<float>(steps);
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += (pred[i] - x[i]) / (1.0f - t) * dt;
        }
        double e = 0;
        for (std::size_t i = 0; i < A * F; ++i) {
            const double d = static_cast<double>(x[i]) - target[s * A * F + i];
            e += d * d;
        }
        total += e / static_cast<double>(A * F);
    }
    return total / static_cast<double>(n);
}

AttnMass eval_attn_mass(const DitModel& model, const ToyDataset& ds, bool masked, std::size_t max_scenes,
                        std::uint64_t seed) {
    const std::size_t n = eval_count(ds, max_scenes), F = ds.spec.feat_dim, A = ds.spec.grid * ds.spec.grid;
    const auto seqs = compile_sequences(ds, ds.eval, masked, n);
    const auto target = ds.eval.target.f32();
    const auto& cfg = model.config();
    const RngKey root{seed, stream_label("eval.attn"), 0};
    constexpr float t = 0.5f;
    AttnMass out;
    double sum_bbox = 0, sum_refs = 0;
    std::vector<double> floors;
    detail::ModelCache<float> cache;
    for (std::size_t s = 0; s < n; ++s) {
        const ConditionedSequence& seq = seqs[s].with_vae;
        const Layout& L = seq.layout;
        RngCursor rng(root.split(static_cast<std::uint64_t>(s)));
        std::vector<float> xt(A * F);
        for (std::size_t i = 0; i < A * F; ++i) xt[i] = (1.0f - t) * static_cast<float>(rng.normal()) + t * target[s * A * F + i];
        model.forward<float>(L, toy_features(ds, ds.eval, s, L, xt, t, false), seq.mask, &cache);
        const std::size_t T = L.total_len;
        std::vector<std::uint8_t> is_ref(T, 0);
        for (const auto& sg : L.segments) {
            if (sg.kind.type == SegmentType::vae_ref) std::fill(is_ref.begin() + static_cast<std::ptrdiff_t>(sg.start), is_ref.begin() + static_cast<std::ptrdiff_t>(sg.end), 1);
        }
        for (const auto& g : ds.eval.scenes[s].groundings.groundings) {
            const TokenSet box = bbox_to_token_set(L, g.ref_id, g.bbox_px, ds.spec.stride_px);
            for (const auto& sp : g.word.token_spans) {
                for (std::size_t tok = sp.start; tok < sp.end; ++tok) {
                    const std::size_t q = L.text().start + tok;
                    floors.push_back(static_cast<double>(box.count()) / static_cast<double>(seq.mask.row(q).count()));
                    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
                        const auto& probs = cache.blocks[l].attn.probs;
                        for (std::size_t h = 0; h < cfg.attn.n_heads; ++h) {
                            const float* row = probs.data() + (h * T + q) * T;
                            double in = 0, all = 0;
                            for (std::size_t k = 0; k < T; ++k) {
                                if (!is_ref[k]) continue;
                                all += row[k];
                                in += box.contains(k) ? row[k] : 0.0;
                            }
                            sum_bbox += in;
                            sum_refs += all;
                            ++out.rows;
                        }
                    }
                }
            }
        }
    }
    if (out.rows == 0) throw InputError("eval scenes have no referential words");
    out.in_bbox = sum_bbox / static_cast<double>(out.rows);
    out.on_refs = sum_refs / static_cast<double>(out.rows);
    const double mean = std::accumulate(floors.begin(), floors.end(), 0.0) / static_cast<double>(floors.size());
    double var = 0;
    for (double f : floors) var += (f - mean) * (f - mean);
    out.floor = mean;
    out.floor_stderr = floors.size() > 1 ? std::sqrt(var / static_cast<double>(floors.size() - 1) / static_cast<double>(floors.size())) : 0.0;
    return out;
}

std::vector<Tensor> word_attention_maps(const DitModel& model, const ToyDataset& ds, const ToySplit& split,
                                        std::size_t scene, const std::string& word, std::size_t layer,
                                        std::size_t head, bool masked) {
    if (scene >= split.size()) throw InputError("scene index " + std::to_string(scene) + " out of range");
    const auto& cfg = model.config();
    if (layer >= cfg.n_layers) throw InputError("layer must be below " + std::to_string(cfg.n_layers));
    if (head >= cfg.attn.n_heads) throw InputError("head must be below " + std::to_string(cfg.attn.n_heads));
    const ToyScene& sc = split.scenes[scene];
    const Grounding* g = nullptr;
    std::string valid;
    for (const auto& gr : sc.groundings.groundings) {
        if (gr.word.text == word) g = &gr;
        valid += (valid.empty() ? "" : ", ") + gr.word.text;
    }
    if (!g) throw InputError("'" + word + "' is not a referential word of scene " + std::to_string(scene) + "; valid words: " + valid);

    const Layout L = ds.layout();
    const AttentionMask mask = masked ? compile_mask(L, sc.groundings, false, ds.spec.stride_px) : full_mask(L.total_len);
    const std::size_t F = ds.spec.feat_dim, A = ds.spec.grid * ds.spec.grid, T = L.total_len;
    const auto target = split.target.f32();
    RngCursor rng(RngKey{0, stream_label("viz.noise"), 0}.split(static_cast<std::uint64_t>(scene)));
    constexpr float t = 0.5f;
    std::vector<float> xt(A * F);
    for (std::size_t i = 0; i < A * F; ++i) xt[i] = (1.0f - t) * static_cast<float>(rng.normal()) + t * target[scene * A * F + i];
    detail::ModelCache<float> cache;
    model.forward<float>(L, toy_features(ds, split, scene, L, xt, t, false), mask, &cache);
    const auto& probs = cache.blocks[layer].attn.probs;

    std::vector<Tensor> maps;
    std::size_t n_tok = 0;
    for (const auto& sp : g->word.token_spans) n_tok += sp.end - sp.start;
    for (std::size_t i = 0; i < ds.spec.n_refs; ++i) {
        const Segment& seg = L.get(SegmentKind::vae_ref(i));
        std::vector<double> m(seg.size(), 0.0);
        for (const auto& sp : g->word.token_spans) {
            for (std::size_t tok = sp.start; tok < sp.end; ++tok) {
                const float* row = probs.data() + (head * T + L.text().start + tok) * T;
                for (std::size_t k = 0; k < seg.size(); ++k) m[k] += static_cast<double>(row[seg.start + k]) / static_cast<double>(n_tok);
            }
        }
        maps.push_back(Tensor::from_f64({seg.grid->rows, seg.grid->cols}, std::move(m)));
    }
    return maps;
}

std::string encode_pgm(const Tensor& map, double max_value) {
    if (map.rank() != 2 || map.dtype() != DType::f64) throw ShapeError("PGM export needs a rank-2 f64 map");
    std::string out = "P5\n" + std::to_string(map.dim(1)) + " " + std::to_string(map.dim(0)) + "\n255\n";
    for (double v : map.f64()) {
        const double scaled = max_value > 0 ? std::round(255.0 * v / max_value) : 0.0;
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(scaled, 0.0, 255.0))));
    }
    return out;
}

namespace {

nlohmann::json summarize(std::vector<double> xs) {
    const double n = static_cast<double>(xs.size());
    const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var = xs.size() > 1 ? var / (n - 1) : 0.0;
    nlohmann::json per_seed = xs;
    std::sort(xs.begin(), xs.end());
    const std::size_t k = xs.size();
    const double median = k % 2 ? xs[k / 2] : 0.5 * (xs[k / 2 - 1] + xs[k / 2]);
    return {{"per_seed", per_seed}, {"mean", mean}, {"median", median}, {"variance", var}, {"std", std::sqrt(var)}};
}

} // namespace

nlohmann::json ablate_dropout(const ToyDataset& ds, const TrainOptions& base, const AblationOptions& ab,
                              std::string* csv, const std::function<void(const std::string&)>& log,
                              const std::function<void(const TrainRun&)>& on_run) {
    if (ab.p_list.empty() || ab.seeds.empty()) throw InputError("ablation needs at least one p and one seed");
    for (double p : ab.p_list) {
        if (!(p >= 0.0 && p <= 1.0)) throw InputError("ablation p values must lie in [0, 1]");
    }
    if (!ab.eval_with_vae && !ab.eval_without_vae) throw InputError("ablation needs at least one eval mode");
    nlohmann::json runs = nlohmann::json::array(), summary = nlohmann::json::array();
    std::string table = "p,seed,eval_mode,recon_error\n";
    for (double p : ab.p_list) {
        std::vector<double> with, without;
        for (std::uint64_t seed : ab.seeds) {
            TrainOptions o = base;
            o.dropout.p_vae = p;
            o.seed = seed;
            const TrainRun r = train_toy(ds, o);
            nlohmann::json e{{"p", p}, {"seed", seed}, {"final_loss", r.losses.empty() ? 0.0 : r.losses.back()}, {"wall_s", r.wall_s}};
            char buf[128];
            if (ab.eval_with_vae) {
                e["with_vae"] = r.recon_with_vae;
                with.push_back(r.recon_with_vae);
                std::snprintf(buf, sizeof buf, "%.6g,%llu,with_vae,%.9g\n", p, static_cast<unsigned long long>(seed), r.recon_with_vae);
                table += buf;
            }
            if (ab.eval_without_vae) {
                e["without_vae"] = r.recon_without_vae;
                without.push_back(r.recon_without_vae);
                std::snprintf(buf, sizeof buf, "%.6g,%llu,without_vae,%.9g\n", p, static_cast<unsigned long long>(seed), r.recon_without_vae);
                table += buf;
            }
            if (log) {
                std::snprintf(buf, sizeof buf, "p=%.3g seed=%llu with_vae=%.4f without_vae=%.4f (%.1fs)", p,
                              static_cast<unsigned long long>(seed), r.recon_with_vae, r.recon_without_vae, r.wall_s);
                log(buf);
            }
            runs.push_back(std::move(e));
            if (on_run) on_run(r);
        }
        nlohmann::json s{{"p", p}};
        if (ab.eval_with_vae) s["with_vae"] = summarize(with);
        if (ab.eval_without_vae) s["without_vae"] = summarize(without);
        summary.push_back(std::move(s));
    }
    if (csv) *csv = table;
    nlohmann::json modes = nlohmann::json::array();
    if (ab.eval_with_vae) modes.push_back("with_vae");
    if (ab.eval_without_vae) modes.push_back("without_vae");
    return {{"schema", "cag-ablation-report/1"},
            {"metric", "recon_error"},
            {"eval_modes", modes},
            {"train", base.to_json()},
            {"dataset", {{"seed", ds.seed}, {"n_train", ds.train.size()}, {"n_eval", ds.eval.size()}, {"spec", ds.spec.to_json()}}},
            {"seeds", ab.seeds},
            {"p_list", ab.p_list},
            {"runs", runs},
            {"summary", summary}};
}

} // namespace cag
