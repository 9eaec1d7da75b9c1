#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cag/grounding/types.hpp"

namespace cag {

// Bumped whenever either prompt template changes; part of the cache key.
inline constexpr int kPromptTemplateVersion = 1;

std::string render_word_prompt(std::string_view instruction, std::size_t n_refs);
// `n_refs` is the number of reference images the model may choose from.
std::string render_bbox_prompt(std::string_view word, std::size_t n_refs);

// Body of a JSON string literal, without the surrounding quotes.
std::string json_escape(std::string_view s);

struct RefImage {
    std::string name;
    std::string bytes;  // may be empty when only the size is known
    std::string mime = "image/png";
    ImageSize size;
};

// Reads PNG, JPEG or binary/ASCII PNM headers. Throws InputError otherwise.
ImageSize probe_image_size(std::string_view bytes);
RefImage load_ref_image(const std::filesystem::path& path);

// Strips an optional ``` fence and parses the payload. Anything that is not
// the expected JSON shape throws ParseError carrying the raw text.
std::vector<std::string> parse_word_response(const std::string& raw);

struct BoxAnswer {
    long long ref_id = 0;
    BBox bbox;
};
BoxAnswer parse_bbox_response(const std::string& raw);

enum class RequestKind { words, bbox };

struct VlmRequest {
    RequestKind kind = RequestKind::words;
    std::string prompt;
    std::string instruction;
    std::string word;  // bbox requests only
    std::span<const RefImage> images;
};

class VlmBackend {
public:
    virtual ~VlmBackend() = default;
    // Raw assistant text. Throws TransportError on I/O or HTTP failure.
    virtual std::string complete(const VlmRequest& request) = 0;
    virtual GroundingSource source() const = 0;
};

// Fixture file:
//   {"scenes": [{"instruction": str,
//                "words": <json or raw string>,
//                "bboxes": {"<word>": <json or raw string>}}]}
// JSON values are returned serialized; strings are returned as-is, which lets
// a fixture model malformed replies. No network access.
class StubBackend : public VlmBackend {
public:
    explicit StubBackend(nlohmann::json fixtures);
    static StubBackend from_file(const std::filesystem::path& path);

    std::string complete(const VlmRequest& request) override;
    GroundingSource source() const override { return GroundingSource::stub; }

private:
    nlohmann::json fixtures_;
};

struct RemoteConfig {
    std::string base_url;  // e.g. http://localhost:8000/v1
    std::string model;
    std::string api_key;
    double timeout_s = 60.0;
};

// Fields unset in `base` are filled from CAG_VLM_URL, CAG_VLM_MODEL, CAG_VLM_KEY.
RemoteConfig remote_config_from_env(RemoteConfig base = {});

// Chat-completions client. Images are sent inline as base64 data URLs.
class RemoteBackend : public VlmBackend {
public:
    explicit RemoteBackend(RemoteConfig config);

    std::string complete(const VlmRequest& request) override;
    GroundingSource source() const override { return GroundingSource::vlm; }

    static nlohmann::json build_request(const std::string& model, const VlmRequest& request);

private:
    RemoteConfig config_;
};

std::string base64_encode(std::string_view bytes);

struct GroundingWarning {
    std::string word;
    std::string reason;
};

std::vector<ReferentialWord> extract_words(VlmBackend& backend, const std::string& instruction,
                                           std::span<const RefImage> images, std::vector<GroundingWarning>* warnings);

// Boxes are clamped to the chosen image and dropped when degenerate after
// clamping; out-of-range image indices are dropped as well.
GroundingSet localize_words(VlmBackend& backend, const std::string& instruction,
                            const std::vector<ReferentialWord>& words, std::span<const RefImage> images,
                            std::vector<GroundingWarning>* warnings);

class GroundingCache {
public:
    explicit GroundingCache(std::filesystem::path dir);

    static std::string key(std::string_view instruction, std::span<const RefImage> images,
                           int template_version = kPromptTemplateVersion);

    // A corrupt entry counts as a miss and is renamed to <key>.json.corrupt.
    std::optional<GroundingSet> get(const std::string& key) const;
    void put(const std::string& key, const GroundingSet& set);

    std::filesystem::path path_for(const std::string& key) const;

private:
    std::filesystem::path dir_;
    mutable std::mutex mu_;
};

// Cache lookup, else extract_words + localize_words, then store.
GroundingSet run_grounding(VlmBackend& backend, const std::string& instruction, std::span<const RefImage> images,
                           GroundingCache* cache, std::vector<GroundingWarning>* warnings);

} // namespace cag
