#include "cag/grounding/types.hpp"

#include <cctype>

#include "cag/error.hpp"

namespace cag {

const char* grounding_source_name(GroundingSource s) {
    switch (s) {
        case GroundingSource::vlm: return "vlm";
        case GroundingSource::stub: return "stub";
        case GroundingSource::cache: return "cache";
    }
    return "unknown";
}

GroundingSource grounding_source_from_name(const std::string& name) {
    if (name == "vlm") return GroundingSource::vlm;
    if (name == "stub") return GroundingSource::stub;
    if (name == "cache") return GroundingSource::cache;
    throw InputError("unknown grounding source '" + name + "'");
}

namespace {

bool is_separator(unsigned char c) { return std::isspace(c) || std::ispunct(c); }

} // namespace

std::vector<InstructionToken> tokenize_instruction(std::string_view s) {
    std::vector<InstructionToken> tokens;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && is_separator(static_cast<unsigned char>(s[i]))) ++i;
        if (i >= s.size()) break;
        const std::size_t begin = i;
        std::string text;
        while (i < s.size() && !is_separator(static_cast<unsigned char>(s[i]))) {
            text.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(s[i]))));
            ++i;
        }
        tokens.push_back({std::move(text), begin, i});
    }
    return tokens;
}

std::vector<TokenSpan> locate_word(const std::vector<InstructionToken>& tokens, std::string_view word) {
    const auto needle = tokenize_instruction(word);
    std::vector<TokenSpan> spans;
    if (needle.empty() || needle.size() > tokens.size()) return spans;
    for (std::size_t i = 0; i + needle.size() <= tokens.size(); ++i) {
        bool match = true;
        for (std::size_t k = 0; k < needle.size() && match; ++k) match = tokens[i + k].text == needle[k].text;
        if (match) spans.push_back({i, i + needle.size()});
    }
    return spans;
}

std::string grounding_violation(const Grounding& g, const std::vector<ImageSize>& ref_sizes, std::size_t n_tokens) {
    if (g.word.text.empty()) return "empty word";
    for (const auto& sp : g.word.token_spans) {
        if (sp.end <= sp.start) return "empty token span for '" + g.word.text + "'";
        if (sp.end > n_tokens) return "token span of '" + g.word.text + "' exceeds the instruction";
    }
    if (g.ref_id >= ref_sizes.size()) {
        return "ref_id " + std::to_string(g.ref_id) + " out of range for " + std::to_string(ref_sizes.size()) + " references";
    }
    const auto& img = ref_sizes[g.ref_id];
    const auto& b = g.bbox_px;
    const bool ok = 0.0 <= b.x1 && b.x1 < b.x2 && b.x2 <= static_cast<double>(img.width) && 0.0 <= b.y1 && b.y1 < b.y2 &&
                    b.y2 <= static_cast<double>(img.height);
    if (!ok) return "bbox of '" + g.word.text + "' invalid for a " + std::to_string(img.width) + "x" + std::to_string(img.height) + " image";
    return {};
}

std::vector<ImageSize> ref_image_sizes(const Layout& layout) {
    std::vector<ImageSize> sizes;
    for (std::size_t i = 0; i < layout.n_refs; ++i) {
        const Segment* s = layout.find(SegmentKind::vae_ref(i));
        if (!s || !s->image_size) throw LayoutError("layout records no image size for reference " + std::to_string(i));
        sizes.push_back(*s->image_size);
    }
    return sizes;
}

void validate_grounding_set(const GroundingSet& set, const std::vector<ImageSize>& ref_sizes) {
    const std::size_t n_tokens = tokenize_instruction(set.instruction).size();
    for (const auto& g : set.groundings) {
        const std::string why = grounding_violation(g, ref_sizes, n_tokens);
        if (!why.empty()) throw InputError("invalid grounding: " + why);
    }
}

nlohmann::json grounding_set_to_json(const GroundingSet& set) {
    using nlohmann::json;
    json gs = json::array();
    for (const auto& g : set.groundings) {
        json spans = json::array();
        for (const auto& sp : g.word.token_spans) spans.push_back(json::array({sp.start, sp.end}));
        gs.push_back(json{{"word", g.word.text},
                          {"spans", std::move(spans)},
                          {"ref_id", g.ref_id},
                          {"bbox", json::array({g.bbox_px.x1, g.bbox_px.y1, g.bbox_px.x2, g.bbox_px.y2})}});
    }
    return json{{"instruction", set.instruction}, {"groundings", std::move(gs)}, {"source", grounding_source_name(set.source)}};
}

GroundingSet grounding_set_from_json(const nlohmann::json& j) {
    try {
        GroundingSet set;
        set.instruction = j.at("instruction").get<std::string>();
        set.source = grounding_source_from_name(j.at("source").get<std::string>());
        for (const auto& jg : j.at("groundings")) {
            Grounding g;
            g.word.text = jg.at("word").get<std::string>();
            for (const auto& sp : jg.at("spans")) g.word.token_spans.push_back({sp.at(0).get<std::size_t>(), sp.at(1).get<std::size_t>()});
            g.ref_id = jg.at("ref_id").get<std::size_t>();
            const auto& b = jg.at("bbox");
            if (b.size() != 4) throw InputError("bbox must have four coordinates");
            g.bbox_px = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
            set.groundings.push_back(std::move(g));
        }
        return set;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed grounding JSON: ") + e.what());
    }
}

} // namespace cag
