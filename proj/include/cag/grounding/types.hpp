#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cag/layout/token_layout.hpp"

namespace cag {

// Half-open [start, end) range of instruction token indices.
struct TokenSpan {
    std::size_t start = 0;
    std::size_t end = 0;
    bool operator==(const TokenSpan&) const = default;
};

struct ReferentialWord {
    std::string text;
    std::vector<TokenSpan> token_spans;
    bool operator==(const ReferentialWord&) const = default;
};

// Pixel box in source-image coordinates, top-left (x1, y1) to bottom-right (x2, y2).
struct BBox {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    bool operator==(const BBox&) const = default;
};

struct Grounding {
    ReferentialWord word;
    std::size_t ref_id = 0;
    BBox bbox_px;
    bool operator==(const Grounding&) const = default;
};

enum class GroundingSource { vlm, stub, cache };

const char* grounding_source_name(GroundingSource s);
GroundingSource grounding_source_from_name(const std::string& name);

struct GroundingSet {
    std::string instruction;
    std::vector<Grounding> groundings;
    GroundingSource source = GroundingSource::stub;
    bool operator==(const GroundingSet&) const = default;
};

struct InstructionToken {
    std::string text;  // lower-cased
    std::size_t byte_begin = 0;
    std::size_t byte_end = 0;
};

// Splits on whitespace and ASCII punctuation; tokens are lower-cased.
std::vector<InstructionToken> tokenize_instruction(std::string_view instruction);

// Every whole-token, case-insensitive occurrence of `word` (which may span
// several tokens) in the tokenized instruction.
std::vector<TokenSpan> locate_word(const std::vector<InstructionToken>& tokens, std::string_view word);

// Checks bbox and ref_id invariants against the recorded reference image
// sizes; returns an empty string when valid, else the reason.
std::string grounding_violation(const Grounding& g, const std::vector<ImageSize>& ref_sizes, std::size_t n_tokens);

// Reference image sizes recorded in a layout's VaeRef segments.
std::vector<ImageSize> ref_image_sizes(const Layout& layout);

// Throws InputError on the first invalid grounding.
void validate_grounding_set(const GroundingSet& set, const std::vector<ImageSize>& ref_sizes);

nlohmann::json grounding_set_to_json(const GroundingSet& set);
GroundingSet grounding_set_from_json(const nlohmann::json& j);

} // namespace cag
