#include "cag/grounding/vlm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <httplib.h>

#include "cag/error.hpp"
#include "cag/numerics/rng.hpp"

namespace cag {

std::string json_escape(std::string_view s) {
    const std::string quoted = nlohmann::json(std::string(s)).dump();
    return quoted.substr(1, quoted.size() - 2);
}

std::string render_word_prompt(std::string_view instruction, std::size_t n_refs) {
    if (instruction.empty()) throw InputError("instruction must not be empty");
    std::ostringstream p;
    p << "You are given " << n_refs << " reference image(s), numbered from 0, and an image editing instruction.\n"
      << "List the words of the instruction that name a subject visible in one of the reference images.\n"
      << "Copy each word exactly as it is written in the instruction and list each word once.\n"
      << "Instruction: \"" << json_escape(instruction) << "\"\n"
      << "Reply with JSON only: {\"words\": [\"<word>\", ...]}. Reply {\"words\": []} if no word applies.\n";
    return p.str();
}

std::string render_bbox_prompt(std::string_view word, std::size_t n_refs) {
    if (word.empty()) throw InputError("word must not be empty");
    std::ostringstream p;
    p << "You are given " << n_refs << " reference image(s), numbered from 0.\n"
      << "Pick the image that shows the subject \"" << json_escape(word) << "\" and locate it.\n"
      << "Reply with JSON only: {\"id\": <image index>, \"bbox\": [x1, y1, x2, y2]}, in pixel coordinates of\n"
      << "that image, (x1, y1) being the top-left corner and (x2, y2) the bottom-right corner.\n";
    return p.str();
}

namespace {

std::uint32_t be32(std::string_view b, std::size_t at) {
    return (static_cast<std::uint32_t>(static_cast<unsigned char>(b[at])) << 24) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 1])) << 16) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 2])) << 8) |
           static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 3]));
}

std::uint16_t be16(std::string_view b, std::size_t at) {
    return static_cast<std::uint16_t>((static_cast<unsigned char>(b[at]) << 8) | static_cast<unsigned char>(b[at + 1]));
}

std::optional<ImageSize> pnm_size(std::string_view b) {
    if (b.size() < 2 || b[0] != 'P' || b[1] < '1' || b[1] > '6') return std::nullopt;
    std::size_t i = 2;
    std::size_t vals[2] = {0, 0};
    for (auto& v : vals) {
        while (i < b.size()) {
            if (b[i] == '#') {
                while (i < b.size() && b[i] != '\n') ++i;
            } else if (std::isspace(static_cast<unsigned char>(b[i]))) {
                ++i;
            } else {
                break;
            }
        }
        if (i >= b.size() || !std::isdigit(static_cast<unsigned char>(b[i]))) return std::nullopt;
        while (i < b.size() && std::isdigit(static_cast<unsigned char>(b[i]))) v = v * 10 + static_cast<std::size_t>(b[i++] - '0');
    }
    return ImageSize{vals[1], vals[0]};
}

std::optional<ImageSize> jpeg_size(std::string_view b) {
    if (b.size() < 4 || static_cast<unsigned char>(b[0]) != 0xFF || static_cast<unsigned char>(b[1]) != 0xD8) return std::nullopt;
    std::size_t i = 2;
    while (i + 9 < b.size()) {
        if (static_cast<unsigned char>(b[i]) != 0xFF) return std::nullopt;
        const unsigned marker = static_cast<unsigned char>(b[i + 1]);
        const std::size_t len = be16(b, i + 2);
        const bool sof = marker >= 0xC0 && marker <= 0xCF && marker != 0xC4 && marker != 0xC8 && marker != 0xCC;
        if (sof) return ImageSize{be16(b, i + 5), be16(b, i + 7)};
        i += 2 + len;
    }
    return std::nullopt;
}

std::string strip_fence(const std::string& raw) {
    std::string s = raw;
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    s = s.substr(first);
    if (s.rfind("```", 0) != 0) return s;
    const auto nl = s.find('\n');
    const auto close = s.rfind("```");
    if (nl == std::string::npos || close <= nl) return s;
    return s.substr(nl + 1, close - nl - 1);
}

nlohmann::json parse_payload(const std::string& raw) {
    try {
        return nlohmann::json::parse(strip_fence(raw));
    } catch (const nlohmann::json::exception&) {
        throw ParseError("backend reply is not JSON", raw);
    }
}

struct ParsedUrl {
    std::string scheme_host_port;
    std::string path;
};

ParsedUrl split_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw InputError("VLM URL needs a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    ParsedUrl u;
    u.scheme_host_port = url.substr(0, path_start);
    u.path = path_start == std::string::npos ? "" : url.substr(path_start);
    while (!u.path.empty() && u.path.back() == '/') u.path.pop_back();
    u.path += "/chat/completions";
    return u;
}

void warn(std::vector<GroundingWarning>* w, std::string word, std::string reason) {
    if (w) w->push_back({std::move(word), std::move(reason)});
}

} // namespace

ImageSize probe_image_size(std::string_view b) {
    static constexpr std::string_view png_sig = "\x89PNG\r\n\x1a\n";
    if (b.size() >= 24 && b.substr(0, 8) == png_sig && b.substr(12, 4) == "IHDR") return {be32(b, 20), be32(b, 16)};
    if (auto s = jpeg_size(b)) return *s;
    if (auto s = pnm_size(b)) return *s;
    throw InputError("unrecognized image format (PNG, JPEG or PNM expected)");
}

RefImage load_ref_image(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open image " + path.string());
    RefImage img;
    img.name = path.filename().string();
    img.bytes.assign(std::istreambuf_iterator<char>(f), {});
    img.size = probe_image_size(img.bytes);
    const auto ext = path.extension().string();
    if (ext == ".jpg" || ext == ".jpeg") {
        img.mime = "image/jpeg";
    } else if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") {
        img.mime = "image/x-portable-anymap";
    }
    return img;
}

std::vector<std::string> parse_word_response(const std::string& raw) {
    nlohmann::json j = parse_payload(raw);
    if (j.is_object() && j.contains("words")) j = j["words"];
    if (!j.is_array()) throw ParseError("word reply is not a JSON list", raw);
    std::vector<std::string> words;
    for (const auto& w : j) {
        if (!w.is_string()) throw ParseError("word list holds a non-string entry", raw);
        words.push_back(w.get<std::string>());
    }
    return words;
}

BoxAnswer parse_bbox_response(const std::string& raw) {
    const nlohmann::json j = parse_payload(raw);
    if (!j.is_object() || !j.contains("id") || !j.contains("bbox")) throw ParseError("bbox reply lacks id or bbox", raw);
    const auto& id = j["id"];
    const auto& bb = j["bbox"];
    if (!id.is_number_integer()) throw ParseError("bbox reply id is not an integer", raw);
    if (!bb.is_array() || bb.size() != 4) throw ParseError("bbox must hold four numbers", raw);
    double v[4];
    for (std::size_t i = 0; i < 4; ++i) {
        if (!bb[i].is_number()) throw ParseError("bbox must hold four numbers", raw);
        v[i] = bb[i].get<double>();
        if (!std::isfinite(v[i])) throw ParseError("bbox coordinate is not finite", raw);
    }
    return {id.get<long long>(), BBox{v[0], v[1], v[2], v[3]}};
}

StubBackend::StubBackend(nlohmann::json fixtures) : fixtures_(std::move(fixtures)) {
    if (!fixtures_.is_object() || !fixtures_.contains("scenes") || !fixtures_["scenes"].is_array()) {
        throw InputError("stub fixtures need a \"scenes\" list");
    }
}

StubBackend StubBackend::from_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open fixture file " + path.string());
    try {
        return StubBackend(nlohmann::json::parse(f));
    } catch (const nlohmann::json::exception& e) {
        throw InputError("fixture file is not valid JSON: " + std::string(e.what()));
    }
}

std::string StubBackend::complete(const VlmRequest& request) {
    for (const auto& scene : fixtures_["scenes"]) {
        if (scene.value("instruction", std::string()) != request.instruction) continue;
        const nlohmann::json* reply = nullptr;
        if (request.kind == RequestKind::words) {
            if (scene.contains("words")) reply = &scene["words"];
        } else if (scene.contains("bboxes") && scene["bboxes"].contains(request.word)) {
            reply = &scene["bboxes"][request.word];
        }
        if (!reply) break;
        return reply->is_string() ? reply->get<std::string>() : reply->dump();
    }
    throw TransportError("stub has no fixture for " + std::string(request.kind == RequestKind::words ? "words of" : "bbox of '" + request.word + "' in") +
                         " instruction \"" + request.instruction + "\"");
}

RemoteConfig remote_config_from_env(RemoteConfig base) {
    auto env = [](const char* name) -> std::string {
        const char* v = std::getenv(name);
        return v ? v : "";
    };
    if (base.base_url.empty()) base.base_url = env("CAG_VLM_URL");
    if (base.model.empty()) base.model = env("CAG_VLM_MODEL");
    if (base.api_key.empty()) base.api_key = env("CAG_VLM_KEY");
    return base;
}

std::string base64_encode(std::string_view bytes) {
    static constexpr char tab[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) | (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                                static_cast<unsigned char>(bytes[i + 2]);
        out += tab[(v >> 18) & 63];
        out += tab[(v >> 12) & 63];
        out += tab[(v >> 6) & 63];
        out += tab[v & 63];
    }
    if (i < bytes.size()) {
        std::uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
        if (i + 1 < bytes.size()) v |= static_cast<unsigned char>(bytes[i + 1]) << 8;
        out += tab[(v >> 18) & 63];
        out += tab[(v >> 12) & 63];
        out += i + 1 < bytes.size() ? tab[(v >> 6) & 63] : '=';
        out += '=';
    }
    return out;
}

RemoteBackend::RemoteBackend(RemoteConfig config) : config_(std::move(config)) {
    if (config_.base_url.empty()) throw InputError("no VLM URL configured (set CAG_VLM_URL or vlm.url)");
    if (config_.model.empty()) throw InputError("no VLM model configured (set CAG_VLM_MODEL or vlm.model)");
}

nlohmann::json RemoteBackend::build_request(const std::string& model, const VlmRequest& request) {
    nlohmann::json content = nlohmann::json::array();
    content.push_back({{"type", "text"}, {"text", request.prompt}});
    for (const auto& img : request.images) {
        if (img.bytes.empty()) throw InputError("image " + img.name + " has no content to send");
        content.push_back({{"type", "image"}, {"image_url", {{"url", "data:" + img.mime + ";base64," + base64_encode(img.bytes)}}}});
    }
    return {{"model", model}, {"temperature", 0}, {"messages", {{{"role", "user"}, {"content", content}}}}};
}

std::string RemoteBackend::complete(const VlmRequest& request) {
    const ParsedUrl url = split_url(config_.base_url);
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (url.scheme_host_port.rfind("https://", 0) == 0) throw TransportError("https endpoints need a build with OpenSSL");
#endif
    httplib::Client cli(url.scheme_host_port);
    const auto secs = static_cast<time_t>(config_.timeout_s);
    const auto usecs = static_cast<time_t>((config_.timeout_s - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
    const std::string body = build_request(config_.model, request).dump();
    auto res = cli.Post(url.path, headers, body, "application/json");
    if (!res) throw TransportError("VLM request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw TransportError("VLM returned HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception&) {
        throw ParseError("VLM response body is not JSON", res->body);
    }
    try {
        const auto& c = j.at("choices").at(0).at("message").at("content");
        if (c.is_string()) return c.get<std::string>();
        std::string text;
        for (const auto& part : c) {
            if (part.value("type", "") == "text") text += part.value("text", "");
        }
        return text;
    } catch (const nlohmann::json::exception&) {
        throw ParseError("VLM response lacks choices[0].message.content", res->body);
    }
}

std::vector<ReferentialWord> extract_words(VlmBackend& backend, const std::string& instruction,
                                           std::span<const RefImage> images, std::vector<GroundingWarning>* warnings) {
    VlmRequest req{RequestKind::words, render_word_prompt(instruction, images.size()), instruction, {}, images};
    const auto words = parse_word_response(backend.complete(req));
    const auto tokens = tokenize_instruction(instruction);
    std::vector<ReferentialWord> out;
    for (const auto& w : words) {
        bool seen = false;
        for (const auto& o : out) seen = seen || o.text == w;
        if (seen) continue;
        auto spans = locate_word(tokens, w);
        if (spans.empty()) {
            warn(warnings, w, "word not found in the instruction");
            continue;
        }
        out.push_back({w, std::move(spans)});
    }
    return out;
}

GroundingSet localize_words(VlmBackend& backend, const std::string& instruction,
                            const std::vector<ReferentialWord>& words, std::span<const RefImage> images,
                            std::vector<GroundingWarning>* warnings) {
    GroundingSet set{instruction, {}, backend.source()};
    for (const auto& w : words) {
        VlmRequest req{RequestKind::bbox, render_bbox_prompt(w.text, images.size()), instruction, w.text, images};
        const BoxAnswer a = parse_bbox_response(backend.complete(req));
        if (a.ref_id < 0 || static_cast<std::size_t>(a.ref_id) >= images.size()) {
            warn(warnings, w.text, "reference index " + std::to_string(a.ref_id) + " out of range");
            continue;
        }
        const ImageSize sz = images[static_cast<std::size_t>(a.ref_id)].size;
        const double W = static_cast<double>(sz.width), H = static_cast<double>(sz.height);
        BBox b{std::clamp(a.bbox.x1, 0.0, W), std::clamp(a.bbox.y1, 0.0, H), std::clamp(a.bbox.x2, 0.0, W),
               std::clamp(a.bbox.y2, 0.0, H)};
        if (!(b.x1 < b.x2 && b.y1 < b.y2)) {
            warn(warnings, w.text, "bounding box is empty after clamping to the image");
            continue;
        }
        if (b != a.bbox) warn(warnings, w.text, "bounding box clamped to the image");
        set.groundings.push_back({w, static_cast<std::size_t>(a.ref_id), b});
    }
    return set;
}

GroundingCache::GroundingCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::string GroundingCache::key(std::string_view instruction, std::span<const RefImage> images, int template_version) {
    // Length-prefixed fields so that no two inputs serialize alike.
    std::string buf = "cag-grounding\n" + std::to_string(template_version) + "\n";
    buf += std::to_string(instruction.size()) + ":" + std::string(instruction) + "\n";
    for (const auto& img : images) {
        char digest[17];
        std::snprintf(digest, sizeof digest, "%016llx", static_cast<unsigned long long>(fnv1a64(img.bytes)));
        buf += std::string(digest) + ":" + std::to_string(img.bytes.size()) + ":" + std::to_string(img.size.height) + "x" +
               std::to_string(img.size.width) + "\n";
    }
    char out[40];
    std::snprintf(out, sizeof out, "%016llx%016llx", static_cast<unsigned long long>(fnv1a64(buf)),
                  static_cast<unsigned long long>(splitmix64(fnv1a64(buf) ^ buf.size())));
    return out;
}

std::filesystem::path GroundingCache::path_for(const std::string& key) const { return dir_ / (key + ".json"); }

std::optional<GroundingSet> GroundingCache::get(const std::string& key) const {
    std::lock_guard lock(mu_);
    const auto p = path_for(key);
    std::ifstream f(p);
    if (!f) return std::nullopt;
    try {
        GroundingSet s = grounding_set_from_json(nlohmann::json::parse(f));
        s.source = GroundingSource::cache;
        return s;
    } catch (const std::exception&) {
        f.close();
        std::error_code ec;
        std::filesystem::rename(p, p.string() + ".corrupt", ec);
        return std::nullopt;
    }
}

void GroundingCache::put(const std::string& key, const GroundingSet& set) {
    std::lock_guard lock(mu_);
    std::filesystem::create_directories(dir_);
    const auto p = path_for(key);
    const auto tmp = p.string() + ".tmp";
    {
        std::ofstream f(tmp);
        f << grounding_set_to_json(set).dump(2) << "\n";
        if (!f) throw FormatError("cannot write cache entry " + tmp);
    }
    std::filesystem::rename(tmp, p);
}

GroundingSet run_grounding(VlmBackend& backend, const std::string& instruction, std::span<const RefImage> images,
                           GroundingCache* cache, std::vector<GroundingWarning>* warnings) {
    std::string key;
    if (cache) {
        key = GroundingCache::key(instruction, images);
        if (auto hit = cache->get(key)) return *hit;
    }
    const auto words = extract_words(backend, instruction, images, warnings);
    GroundingSet set = localize_words(backend, instruction, words, images, warnings);
    if (cache) cache->put(key, set);
    return set;
}

} // namespace cag
