#include "cag/harness/toy.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "cag/error.hpp"
#include "cag/numerics/rng.hpp"
#include "cag/numerics/tensor_io.hpp"

namespace cag {

void ToySpec::validate() const {
    if (n_refs == 0 || grid == 0 || feat_dim < 2 || vlm_len == 0 || stride_px == 0) {
        throw InputError("toy sizes must be positive (feat_dim >= 2)");
    }
    if (grid % n_refs != 0) throw InputError("grid width must split evenly into one strip per reference");
    if (n_classes < n_refs) throw InputError("need at least as many classes as references");
    if (bbox_policy != "random" && bbox_policy != "full") throw InputError("bbox_policy must be random or full");
    if (!(vlm_noise >= 0.0)) throw InputError("vlm_noise must be non-negative");
}

nlohmann::json ToySpec::to_json() const {
    return {{"n_refs", n_refs},       {"grid", grid},           {"feat_dim", feat_dim},   {"vlm_len", vlm_len},
            {"stride_px", stride_px}, {"n_classes", n_classes}, {"vlm_noise", vlm_noise}, {"bbox_policy", bbox_policy}};
}

ToySpec ToySpec::from_json(const nlohmann::json& j) {
    ToySpec s;
    s.n_refs = j.value("n_refs", s.n_refs);
    s.grid = j.value("grid", s.grid);
    s.feat_dim = j.value("feat_dim", s.feat_dim);
    s.vlm_len = j.value("vlm_len", s.vlm_len);
    s.stride_px = j.value("stride_px", s.stride_px);
    s.n_classes = j.value("n_classes", s.n_classes);
    s.vlm_noise = j.value("vlm_noise", s.vlm_noise);
    s.bbox_policy = j.value("bbox_policy", s.bbox_policy);
    s.validate();
    return s;
}

std::vector<std::string> toy_class_words(std::size_t n_classes) {
    static const char* base[] = {"cat", "dog", "fox", "owl", "cup", "hat", "car", "jar",
                                 "bag", "toy", "vase", "lamp", "bear", "duck", "shoe", "kite"};
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n_classes; ++i) {
        out.push_back(i < std::size(base) ? base[i] : "item" + std::to_string(i));
    }
    return out;
}

Layout ToyDataset::layout() const {
    LayoutRequest r;
    r.n_refs = spec.n_refs;
    r.vlm_ref_lens.assign(spec.n_refs, spec.vlm_len);
    r.text_len = 2 * spec.n_refs - 1;
    r.target_grid = {spec.grid, spec.grid};
    r.ref_grids.assign(spec.n_refs, {spec.grid, spec.grid});
    r.ref_image_sizes.assign(spec.n_refs, {spec.grid * spec.stride_px, spec.grid * spec.stride_px});
    r.target_image_size = ImageSize{spec.grid * spec.stride_px, spec.grid * spec.stride_px};
    return make_layout(r);
}

namespace {

void compose_target(const ToySpec& spec, const ToyScene& sc, const float* colors, float* out) {
    const std::size_t G = spec.grid, F = spec.feat_dim, strip = G / spec.n_refs;
    for (std::size_t r = 0; r < G; ++r) {
        for (std::size_t c = 0; c < G; ++c) {
            const float* src = colors + sc.order[c / strip] * F;
            std::copy(src, src + F, out + (r * G + c) * F);
        }
    }
}

ToySplit gen_split(const ToySpec& spec, const std::vector<std::string>& vocab, RngKey key, std::size_t n) {
    const std::size_t N = spec.n_refs, G = spec.grid, A = G * G, F = spec.feat_dim, L = spec.vlm_len;
    const std::size_t and_id = vocab.size() - 1;
    ToySplit sp;
    std::vector<float> colors(n * N * F), ref(n * N * A * F), vlm(n * N * L * F), target(n * A * F);
    const std::size_t lo = std::max<std::size_t>(1, G / 2), hi = std::max(lo, 3 * G / 4);

    for (std::size_t s = 0; s < n; ++s) {
        RngCursor rng(key.split(static_cast<std::uint64_t>(s)));
        ToyScene sc;
        std::vector<std::size_t> classes(spec.n_classes);
        std::iota(classes.begin(), classes.end(), 0);
        for (std::size_t i = 0; i < N; ++i) std::swap(classes[i], classes[i + rng.below(spec.n_classes - i)]);
        sc.ref_class.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(N));
        sc.order.resize(N);
        std::iota(sc.order.begin(), sc.order.end(), 0);
        for (std::size_t i = N; i > 1; --i) std::swap(sc.order[i - 1], sc.order[rng.below(i)]);

        for (std::size_t i = 0; i < N; ++i) {
            CellRect r{0, 0, G, G};
            if (spec.bbox_policy == "random") {
                r.rows = lo + rng.below(hi - lo + 1);
                r.cols = lo + rng.below(hi - lo + 1);
                r.row = rng.below(G - r.rows + 1);
                r.col = rng.below(G - r.cols + 1);
            }
            sc.subject.push_back(r);
            float* c = colors.data() + (s * N + i) * F;
            for (std::size_t f = 0; f < F; ++f) c[f] = static_cast<float>(rng.normal());
            for (std::size_t cell = 0; cell < A; ++cell) {
                float* dst = ref.data() + ((s * N + i) * A + cell) * F;
                const bool in = r.contains(cell / G, cell % G);
                for (std::size_t f = 0; f < F; ++f) dst[f] = in ? c[f] : static_cast<float>(rng.normal());
            }
            for (std::size_t l = 0; l < L; ++l) {
                float* dst = vlm.data() + ((s * N + i) * L + l) * F;
                for (std::size_t f = 0; f < F; ++f) {
                    const double keep = f < F / 2 ? c[f] : 0.0;
                    dst[f] = static_cast<float>(keep + spec.vlm_noise * rng.normal());
                }
            }
        }

        for (std::size_t k = 0; k < N; ++k) {
            if (k > 0) {
                sc.tokens.push_back("and");
                sc.token_ids.push_back(and_id);
            }
            sc.tokens.push_back(vocab[sc.ref_class[sc.order[k]]]);
            sc.token_ids.push_back(sc.ref_class[sc.order[k]]);
        }
        std::string instruction;
        for (const auto& t : sc.tokens) instruction += (instruction.empty() ? "" : " ") + t;
        const auto toks = tokenize_instruction(instruction);
        sc.groundings.instruction = instruction;
        sc.groundings.source = GroundingSource::stub;
        for (std::size_t k = 0; k < N; ++k) {
            const std::size_t i = sc.order[k];
            const CellRect& r = sc.subject[i];
            const double px = static_cast<double>(spec.stride_px);
            Grounding g;
            g.word = {vocab[sc.ref_class[i]], locate_word(toks, vocab[sc.ref_class[i]])};
            g.ref_id = i;
            g.bbox_px = {static_cast<double>(r.col) * px, static_cast<double>(r.row) * px,
                         static_cast<double>(r.col + r.cols) * px, static_cast<double>(r.row + r.rows) * px};
            sc.groundings.groundings.push_back(std::move(g));
        }
        compose_target(spec, sc, colors.data() + s * N * F, target.data() + s * A * F);
        sp.scenes.push_back(std::move(sc));
    }
    sp.colors = Tensor::from_f32({n, N, F}, std::move(colors));
    sp.ref_vae = Tensor::from_f32({n, N, A, F}, std::move(ref));
    sp.vlm_ref = Tensor::from_f32({n, N, L, F}, std::move(vlm));
    sp.target = Tensor::from_f32({n, A, F}, std::move(target));
    return sp;
}

nlohmann::json scene_to_json(const ToyScene& s) {
    nlohmann::json subj = nlohmann::json::array();
    for (const auto& r : s.subject) subj.push_back({r.row, r.col, r.rows, r.cols});
    return {{"ref_class", s.ref_class}, {"order", s.order},         {"subject", subj},
            {"tokens", s.tokens},       {"token_ids", s.token_ids}, {"groundings", grounding_set_to_json(s.groundings)}};
}

ToyScene scene_from_json(const nlohmann::json& j) {
    ToyScene s;
    s.ref_class = j.at("ref_class").get<std::vector<std::size_t>>();
    s.order = j.at("order").get<std::vector<std::size_t>>();
    for (const auto& r : j.at("subject")) s.subject.push_back({r.at(0), r.at(1), r.at(2), r.at(3)});
    s.tokens = j.at("tokens").get<std::vector<std::string>>();
    s.token_ids = j.at("token_ids").get<std::vector<std::size_t>>();
    s.groundings = grounding_set_from_json(j.at("groundings"));
    return s;
}

const char* kSplitTensors[] = {"colors", "ref_vae", "vlm_ref", "target"};

Tensor& split_tensor(ToySplit& sp, std::size_t i) {
    Tensor* t[] = {&sp.colors, &sp.ref_vae, &sp.vlm_ref, &sp.target};
    return *t[i];
}

const Tensor& split_tensor(const ToySplit& sp, std::size_t i) { return split_tensor(const_cast<ToySplit&>(sp), i); }

} // namespace

ToyDataset gen_toy_dataset(std::uint64_t seed, std::size_t n_train, std::size_t n_eval, const ToySpec& spec) {
    spec.validate();
    if (n_train == 0) throw InputError("n_scenes must be positive");
    ToyDataset ds;
    ds.spec = spec;
    ds.seed = seed;
    ds.vocab = toy_class_words(spec.n_classes);
    ds.vocab.push_back("and");
    const RngKey root{seed, stream_label("toy"), 0};
    RngCursor emb(root.split("vocab"));
    std::vector<float> e(ds.vocab.size() * spec.feat_dim);
    for (auto& x : e) x = static_cast<float>(emb.normal());
    ds.vocab_emb = Tensor::from_f32({ds.vocab.size(), spec.feat_dim}, std::move(e));
    ds.train = gen_split(spec, ds.vocab, root.split("train"), n_train);
    if (n_eval > 0) ds.eval = gen_split(spec, ds.vocab, root.split("eval"), n_eval);
    return ds;
}

std::vector<float> replay_target(const ToyDataset& ds, const ToySplit& split, std::size_t scene) {
    const auto& spec = ds.spec;
    std::vector<float> t(spec.grid * spec.grid * spec.feat_dim);
    compose_target(spec, split.scenes.at(scene), split.colors.f32().data() + scene * spec.n_refs * spec.feat_dim, t.data());
    return t;
}

void save_toy_dataset(const ToyDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_tensor(dir / "vocab.cagt", ds.vocab_emb);
    nlohmann::json splits = nlohmann::json::object();
    for (const char* name : {"train", "eval"}) {
        const ToySplit& sp = std::string(name) == "train" ? ds.train : ds.eval;
        nlohmann::json scenes = nlohmann::json::array();
        for (const auto& s : sp.scenes) scenes.push_back(scene_to_json(s));
        splits[name] = scenes;
        if (sp.scenes.empty()) continue;
        for (std::size_t i = 0; i < 4; ++i) {
            write_tensor(dir / (std::string(name) + "_" + kSplitTensors[i] + ".cagt"), split_tensor(sp, i));
        }
    }
    nlohmann::json manifest{{"format", "cag-toy/1"}, {"seed", ds.seed},    {"spec", ds.spec.to_json()},
                            {"vocab", ds.vocab},     {"splits", splits}};
    std::ofstream f(dir / "scenes.json");
    f << manifest.dump(1) << "\n";
    if (!f) throw FormatError("cannot write " + (dir / "scenes.json").string());
}

ToyDataset load_toy_dataset(const std::filesystem::path& dir) {
    std::ifstream f(dir / "scenes.json");
    if (!f) throw InputError("no scenes.json in " + dir.string());
    nlohmann::json m;
    try {
        f >> m;
        if (m.at("format") != "cag-toy/1") throw InputError("unsupported dataset format");
        ToyDataset ds;
        ds.seed = m.at("seed");
        ds.spec = ToySpec::from_json(m.at("spec"));
        ds.vocab = m.at("vocab").get<std::vector<std::string>>();
        ds.vocab_emb = read_tensor(dir / "vocab.cagt");
        for (const char* name : {"train", "eval"}) {
            ToySplit& sp = std::string(name) == "train" ? ds.train : ds.eval;
            for (const auto& s : m.at("splits").at(name)) sp.scenes.push_back(scene_from_json(s));
            if (sp.scenes.empty()) continue;
            for (std::size_t i = 0; i < 4; ++i) {
                split_tensor(sp, i) = read_tensor(dir / (std::string(name) + "_" + kSplitTensors[i] + ".cagt"));
                if (split_tensor(sp, i).dim(0) != sp.scenes.size()) throw FormatError("dataset tensor count differs from scenes");
            }
        }
        return ds;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed scenes.json: ") + e.what());
    }
}

std::vector<float> toy_features(const ToyDataset& ds, const ToySplit& split, std::size_t scene, const Layout& layout,
                                std::span<const float> x_t, float t, bool drop_text) {
    const auto& spec = ds.spec;
    const std::size_t F = spec.feat_dim, D = spec.in_dim(), N = spec.n_refs, A = spec.grid * spec.grid, L = spec.vlm_len;
    const ToyScene& sc = split.scenes.at(scene);
    if (x_t.size() != A * F) throw ShapeError("noised target must be [grid*grid x feat_dim]");
    std::vector<float> out(layout.total_len * D, 0.0f);
    const auto emb = ds.vocab_emb.f32();
    const auto vlm = split.vlm_ref.f32();
    const auto ref = split.ref_vae.f32();
    auto put = [&](std::size_t tok, const float* app, const float* sem) {
        float* row = out.data() + tok * D;
        if (app) std::copy(app, app + F, row);
        if (sem) std::copy(sem, sem + F, row + F);
        row[2 * F] = t;
    };
    for (const auto& seg : layout.segments) {
        for (std::size_t k = 0; k < seg.size(); ++k) {
            const std::size_t tok = seg.start + k;
            switch (seg.kind.type) {
                case SegmentType::vlm_ref: {
                    const std::size_t i = *seg.kind.ref_id;
                    put(tok, vlm.data() + ((scene * N + i) * L + k) * F, emb.data() + sc.ref_class[i] * F);
                    break;
                }
                case SegmentType::vlm_text:
                    put(tok, nullptr, drop_text ? nullptr : emb.data() + sc.token_ids.at(k) * F);
                    break;
                case SegmentType::vae_target:
                    put(tok, x_t.data() + k * F, nullptr);
                    break;
                case SegmentType::vae_ref:
                    put(tok, ref.data() + ((scene * N + *seg.kind.ref_id) * A + k) * F, nullptr);
                    break;
            }
        }
    }
    return out;
}

} // namespace cag
