// cag: command-line front end for layouts, grounding, masks, attention checks
// and the toy experiments.
//
// Exit codes: 0 success, 2 input error, 3 backend/transport error, 4 numeric failure.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "cag/attention/checks.hpp"
#include "cag/attention/dit.hpp"
#include "cag/error.hpp"
#include "cag/grounding/vlm.hpp"
#include "cag/harness/config.hpp"
#include "cag/harness/toy.hpp"
#include "cag/harness/train.hpp"
#include "cag/mask/attention_mask.hpp"
#include "cag/numerics/tensor_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cag;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitTransport = 3;
constexpr int kExitNumeric = 4;

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string format = "json";
};

json read_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open " + path);
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw InputError(path + " is not valid JSON: " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    f << text;
    if (!f) throw InputError("cannot write " + path.string());
}

// Writes `name` under --out when given, else prints to stdout.
void emit(const Globals& g, const std::string& name, const std::string& text) {
    if (g.out.empty()) {
        std::cout << text;
    } else {
        write_text(fs::path(g.out) / name, text);
        std::cerr << "wrote " << (fs::path(g.out) / name).string() << "\n";
    }
}

// Flat key/value listing for --format csv.
std::string json_to_csv(const json& j) {
    std::string out = "key,value\n";
    const json flat = j.flatten();
    for (const auto& [k, v] : flat.items()) out += k.substr(1) + "," + (v.is_string() ? v.get<std::string>() : v.dump()) + "\n";
    return out;
}

void emit_result(const Globals& g, const std::string& stem, const json& j) {
    if (g.format == "csv") {
        emit(g, stem + ".csv", json_to_csv(j));
    } else {
        emit(g, stem + ".json", j.dump(2) + "\n");
    }
}

std::uint64_t seed_or(const Globals& g, std::uint64_t fallback) { return g.seed.value_or(fallback); }

HarnessConfig config_of(const Globals& g) { return g.config.empty() ? HarnessConfig{} : load_config(g.config); }

GridShape parse_grid(const std::string& s) {
    const auto x = s.find('x');
    try {
        if (x == std::string::npos) throw std::invalid_argument(s);
        return {std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
    } catch (const std::exception&) {
        throw InputError("expected ROWSxCOLS, got '" + s + "'");
    }
}

std::vector<RefImage> ref_images(const std::vector<std::string>& paths, const std::vector<std::string>& sizes) {
    std::vector<RefImage> imgs;
    for (const auto& p : paths) imgs.push_back(load_ref_image(p));
    for (const auto& s : sizes) {
        const GridShape hw = parse_grid(s);
        RefImage img;
        img.name = "image" + std::to_string(imgs.size());
        img.size = {hw.rows, hw.cols};
        imgs.push_back(std::move(img));
    }
    if (imgs.empty()) throw InputError("give reference images with --image or --image-size HxW");
    return imgs;
}

void print_warnings(const std::vector<GroundingWarning>& w) {
    for (const auto& x : w) std::cerr << "warning: '" << x.word << "': " << x.reason << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conditioning toolkit: token layouts, grounding, correspondence masks, toy experiments"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "JSON config file (nested or dotted keys)");
    app.add_option("--seed", g.seed, "Seed for every keyed random stream");
    app.add_option("--out", g.out, "Output directory (stdout when omitted, where applicable)");
    app.add_option("--format", g.format, "Result format for summaries")->check(CLI::IsMember({"json", "csv"}));

    // layout build
    auto* layout = app.add_subcommand("layout", "Token layouts")->require_subcommand(1);
    auto* lb = layout->add_subcommand("build", "Build a layout with positions");
    std::string lb_request;
    std::size_t lb_refs = 0, lb_text = 0;
    std::vector<std::size_t> lb_vlm;
    std::string lb_target;
    std::vector<std::string> lb_grids, lb_sizes;
    lb->add_option("--request", lb_request, "JSON request {n_refs, vlm_ref_lens, text_len, target_grid, ref_grids, ref_image_sizes}");
    lb->add_option("--n-refs", lb_refs);
    lb->add_option("--vlm-len", lb_vlm, "VLM token count per reference");
    lb->add_option("--text-len", lb_text);
    lb->add_option("--target", lb_target, "Target grid ROWSxCOLS");
    lb->add_option("--ref-grid", lb_grids, "Reference grid ROWSxCOLS, once per reference");
    lb->add_option("--image-size", lb_sizes, "Reference image size HxW in pixels, once per reference");

    // ground run|stub
    auto* ground = app.add_subcommand("ground", "Word extraction and grounding")->require_subcommand(1);
    std::string gr_instruction, gr_fixtures, gr_cache;
    std::vector<std::string> gr_images, gr_sizes;
    auto* grun = ground->add_subcommand("run", "Ground through a chat-completions VLM endpoint");
    auto* gstub = ground->add_subcommand("stub", "Ground from a fixture file, no network");
    for (auto* sc : {grun, gstub}) {
        sc->add_option("--instruction", gr_instruction)->required();
        sc->add_option("--image", gr_images, "Reference image file (PNG, JPEG, PNM), in order");
        sc->add_option("--image-size", gr_sizes, "Reference image size HxW when no file is given");
        sc->add_option("--cache-dir", gr_cache, "Grounding cache directory");
    }
    gstub->add_option("--fixtures", gr_fixtures)->required();

    // mask compile|expand
    auto* mask = app.add_subcommand("mask", "Correspondence masks")->require_subcommand(1);
    auto* mc = mask->add_subcommand("compile", "Compile a mask from a layout and groundings");
    std::string mc_layout, mc_groundings, me_mask;
    bool mc_drop = false;
    std::size_t mc_stride = 16;
    mc->add_option("--layout", mc_layout)->required();
    mc->add_option("--groundings", mc_groundings)->required();
    mc->add_flag("--drop-vae", mc_drop, "Compile for a bundle without reference VAE features");
    mc->add_option("--stride", mc_stride, "Image pixels per latent token");
    auto* me = mask->add_subcommand("expand", "Expand a mask JSON to a dense CAGT bool tensor");
    me->add_option("--mask", me_mask)->required();

    // attend check-grad|check-equiv
    auto* attend = app.add_subcommand("attend", "Attention self-checks")->require_subcommand(1);
    std::size_t at_instances = 0, at_tokens = 0, at_d = 64, at_heads = 4;
    auto* acg = attend->add_subcommand("check-grad", "Backward pass against central differences");
    auto* ace = attend->add_subcommand("check-equiv", "Masked attention against attention over gathered keys");
    for (auto* sc : {acg, ace}) {
        sc->add_option("--instances", at_instances);
        sc->add_option("--tokens", at_tokens);
        sc->add_option("--d-model", at_d);
        sc->add_option("--heads", at_heads);
    }

    // toy gen|train|ablate
    auto* toy = app.add_subcommand("toy", "Toy referential-copy experiments")->require_subcommand(1);
    auto* tg = toy->add_subcommand("gen", "Generate a toy dataset");
    std::optional<std::size_t> tg_scenes, tg_eval, tg_refs, tg_grid;
    std::string tg_policy;
    tg->add_option("--n-scenes", tg_scenes);
    tg->add_option("--n-eval", tg_eval);
    tg->add_option("--n-refs", tg_refs);
    tg->add_option("--grid", tg_grid);
    tg->add_option("--bbox-policy", tg_policy)->check(CLI::IsMember({"random", "full"}));
    auto* tt = toy->add_subcommand("train", "Train the toy model");
    auto* ta = toy->add_subcommand("ablate", "VAE-dropout sweep");
    std::string t_data, t_mode, ta_eval = "both";
    std::optional<std::size_t> t_steps;
    std::optional<double> t_pvae;
    std::vector<double> ta_p;
    std::vector<std::uint64_t> ta_seeds;
    for (auto* sc : {tt, ta}) {
        sc->add_option("--data", t_data)->required();
        sc->add_option("--mask-mode", t_mode)->check(CLI::IsMember({"masked", "full"}));
        sc->add_option("--steps", t_steps);
    }
    tt->add_option("--p-vae", t_pvae);
    ta->add_option("--p-list", ta_p);
    ta->add_option("--seeds", ta_seeds);
    ta->add_option("--eval-mode", ta_eval)->check(CLI::IsMember({"with_vae", "without_vae", "both"}));

    // viz attn
    auto* viz = app.add_subcommand("viz", "Visualizations")->require_subcommand(1);
    auto* va = viz->add_subcommand("attn", "Attention map of a referential word over the reference grids");
    std::string va_ckpt, va_data, va_word, va_split = "eval";
    std::size_t va_scene = 0, va_layer = 0, va_head = 0;
    va->add_option("--checkpoint", va_ckpt)->required();
    va->add_option("--data", va_data)->required();
    va->add_option("--scene", va_scene);
    va->add_option("--word", va_word)->required();
    va->add_option("--layer", va_layer);
    va->add_option("--head", va_head);
    va->add_option("--split", va_split)->check(CLI::IsMember({"train", "eval"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitInput;
    }

    try {
        if (lb->parsed()) {
            LayoutRequest r;
            if (!lb_request.empty()) {
                const json j = read_json(lb_request);
                r.n_refs = j.at("n_refs");
                r.vlm_ref_lens = j.at("vlm_ref_lens").get<std::vector<std::size_t>>();
                r.text_len = j.at("text_len");
                const auto tg2 = j.at("target_grid");
                r.target_grid = {tg2.at(0), tg2.at(1)};
                for (const auto& x : j.at("ref_grids")) r.ref_grids.push_back({x.at(0), x.at(1)});
                for (const auto& x : j.at("ref_image_sizes")) r.ref_image_sizes.push_back({x.at(0), x.at(1)});
            } else {
                r.n_refs = lb_refs;
                r.vlm_ref_lens = lb_vlm;
                r.text_len = lb_text;
                if (lb_target.empty()) throw InputError("give --target ROWSxCOLS or --request");
                r.target_grid = parse_grid(lb_target);
                for (const auto& s : lb_grids) r.ref_grids.push_back(parse_grid(s));
                for (const auto& s : lb_sizes) {
                    const auto hw = parse_grid(s);
                    r.ref_image_sizes.push_back({hw.rows, hw.cols});
                }
            }
            const Layout l = make_layout(r);
            validate_layout(l);
            emit(g, "layout.json", layout_to_json(l).dump() + "\n");
        } else if (grun->parsed() || gstub->parsed()) {
            const auto imgs = ref_images(gr_images, gr_sizes);
            std::unique_ptr<VlmBackend> backend;
            if (gstub->parsed()) {
                backend = std::make_unique<StubBackend>(StubBackend::from_file(gr_fixtures));
            } else {
                const HarnessConfig cfg = config_of(g);
                backend = std::make_unique<RemoteBackend>(remote_config_from_env(cfg.vlm));
                if (gr_cache.empty()) gr_cache = cfg.cache_dir.string();
            }
            std::optional<GroundingCache> cache;
            if (!gr_cache.empty()) cache.emplace(gr_cache);
            std::vector<GroundingWarning> warnings;
            const GroundingSet set = run_grounding(*backend, gr_instruction, imgs, cache ? &*cache : nullptr, &warnings);
            print_warnings(warnings);
            emit(g, "groundings.json", grounding_set_to_json(set).dump(2) + "\n");
        } else if (mc->parsed()) {
            const Layout l = layout_from_json(read_json(mc_layout));
            const GroundingSet gs = grounding_set_from_json(read_json(mc_groundings));
            const Layout target_layout = mc_drop ? without_vae_refs(l) : l;
            const AttentionMask m = compile_mask(target_layout, gs, mc_drop, mc_stride);
            emit(g, "mask.json", mask_to_json(m).dump() + "\n");
        } else if (me->parsed()) {
            const AttentionMask m = mask_from_json(read_json(me_mask));
            const Tensor dense = expand_dense(m);
            if (g.out.empty()) throw InputError("mask expand writes a binary tensor; give --out");
            write_tensor(fs::path(g.out) / "mask_dense.cagt", dense);
            std::size_t allowed = 0;
            for (auto b : dense.boolean()) allowed += b;
            std::cerr << "wrote " << (fs::path(g.out) / "mask_dense.cagt").string() << " (" << allowed << " allowed pairs)\n";
        } else if (acg->parsed()) {
            const AttentionConfig cfg{at_d, at_heads};
            const auto r = check_attention_gradients(seed_or(g, 0), at_instances ? at_instances : 50, at_tokens ? at_tokens : 12, cfg);
            json j = r.to_json();
            j["pass"] = r.max_rel_error < 1e-4 && r.masked_keys_zero;
            emit_result(g, "check_grad", j);
            if (!j["pass"].get<bool>()) return kExitNumeric;
        } else if (ace->parsed()) {
            const AttentionConfig cfg{at_d, at_heads};
            const auto r = check_gather_equivalence(seed_or(g, 0), at_instances ? at_instances : 200, at_tokens ? at_tokens : 64, cfg);
            json j = r.to_json();
            j["pass"] = r.max_abs_diff < 1e-12;
            emit_result(g, "check_equiv", j);
            if (!j["pass"].get<bool>()) return kExitNumeric;
        } else if (tg->parsed()) {
            HarnessConfig cfg = config_of(g);
            if (tg_scenes) cfg.n_train = *tg_scenes;
            if (tg_eval) cfg.n_eval = *tg_eval;
            if (tg_refs) cfg.toy.n_refs = *tg_refs;
            if (tg_grid) cfg.toy.grid = *tg_grid;
            if (!tg_policy.empty()) cfg.toy.bbox_policy = tg_policy;
            if (g.out.empty()) throw InputError("toy gen needs --out");
            const ToyDataset ds = gen_toy_dataset(seed_or(g, 0), cfg.n_train, cfg.n_eval, cfg.toy);
            save_toy_dataset(ds, g.out);
            std::cerr << "wrote " << ds.train.size() << " train and " << ds.eval.size() << " eval scenes to " << g.out << "\n";
        } else if (tt->parsed() || ta->parsed()) {
            HarnessConfig cfg = config_of(g);
            if (!t_mode.empty()) cfg.train.masked = t_mode == "masked";
            if (t_steps) cfg.train.steps = *t_steps;
            if (t_pvae) cfg.train.dropout.p_vae = *t_pvae;
            cfg.train.seed = seed_or(g, cfg.train.seed);
            cfg.train.dropout.validate();
            const ToyDataset ds = load_toy_dataset(t_data);
            if (g.out.empty()) throw InputError("toy " + std::string(tt->parsed() ? "train" : "ablate") + " needs --out");
            const fs::path out(g.out);
            if (tt->parsed()) {
                const TrainRun run = train_toy(ds, cfg.train, out, [&](std::size_t step, double loss) {
                    if (step % 100 == 0) std::fprintf(stderr, "step %zu loss %.5f\n", step, loss);
                });
                json rj = run.to_json();
                rj["config_snapshot"] = cfg.to_json();
                write_text(out / "run.json", rj.dump(2) + "\n");
                std::string losses = "step,loss\n";
                for (std::size_t i = 0; i < run.losses.size(); ++i) losses += std::to_string(i) + "," + std::to_string(run.losses[i]) + "\n";
                write_text(out / "losses.csv", losses);
                save_checkpoint(out / "checkpoint", run.model_config, run.params,
                                {{"mask_mode", cfg.train.masked ? "masked" : "full"}, {"config", cfg.to_json()}});
                emit_result(Globals{g.config, g.seed, "", g.format}, "metrics", rj["metrics"]);
            } else {
                if (!ta_p.empty()) cfg.ablate.p_list = ta_p;
                if (!ta_seeds.empty()) cfg.ablate.seeds = ta_seeds;
                cfg.ablate.eval_with_vae = ta_eval != "without_vae";
                cfg.ablate.eval_without_vae = ta_eval != "with_vae";
                std::string csv;
                const json report = ablate_dropout(ds, cfg.train, cfg.ablate, &csv, [](const std::string& s) { std::cerr << s << "\n"; });
                write_text(out / "report.json", report.dump(2) + "\n");
                write_text(out / "report.csv", csv);
                std::cerr << "wrote " << (out / "report.json").string() << " and report.csv\n";
            }
        } else if (va->parsed()) {
            json manifest;
            const DitModel model = load_checkpoint(va_ckpt, &manifest);
            const bool masked = manifest.at("extra").value("mask_mode", "masked") == "masked";
            const ToyDataset ds = load_toy_dataset(va_data);
            const ToySplit& split = va_split == "train" ? ds.train : ds.eval;
            const auto maps = word_attention_maps(model, ds, split, va_scene, va_word, va_layer, va_head, masked);
            if (g.out.empty()) throw InputError("viz attn needs --out");
            double mx = 0;
            for (const auto& m : maps)
                for (double v : m.f64()) mx = std::max(mx, v);
            std::vector<double> stacked;
            for (std::size_t i = 0; i < maps.size(); ++i) {
                write_text(fs::path(g.out) / ("attn_ref" + std::to_string(i) + ".pgm"), encode_pgm(maps[i], mx));
                stacked.insert(stacked.end(), maps[i].f64().begin(), maps[i].f64().end());
            }
            write_tensor(fs::path(g.out) / "attn.cagt", Tensor::from_f64({maps.size(), maps[0].dim(0), maps[0].dim(1)}, stacked));
            json info{{"schema", "cag-attn-map/1"}, {"word", va_word},   {"scene", va_scene}, {"split", va_split},
                      {"layer", va_layer},          {"head", va_head},   {"mask_mode", masked ? "masked" : "full"},
                      {"max", mx},                  {"grid", {maps[0].dim(0), maps[0].dim(1)}}, {"n_refs", maps.size()}};
            write_text(fs::path(g.out) / "attn.json", info.dump(2) + "\n");
            std::cerr << "wrote " << maps.size() << " maps to " << g.out << "\n";
        }
    } catch (const TransportError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitTransport;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\nraw reply: " << e.raw() << "\n";
        return kExitTransport;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const DegenerateRowError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    }
    return 0;
}
