#pragma once

#include <cstdint>
#include <string_view>

namespace cag {

// Counter-based generator key. The output bits are a pure function of the
// three fields; there is no generator state to carry or share.
struct RngKey {
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
    std::uint64_t counter = 0;

    RngKey with_stream(std::uint64_t s) const { return {seed, s, counter}; }
    RngKey with_counter(std::uint64_t c) const { return {seed, stream, c}; }
    // Derives a child stream; children of distinct labels do not overlap.
    RngKey split(std::string_view label) const;
    RngKey split(std::uint64_t label) const;

    bool operator==(const RngKey&) const = default;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);
inline std::uint64_t stream_label(std::string_view name) { return fnv1a64(name); }

std::uint64_t rng_bits(const RngKey& key);
// Uniform in [0, 1) with 53 random mantissa bits.
double rng_uniform(const RngKey& key);
// Standard normal via Box-Muller over two derived uniforms.
double rng_normal(const RngKey& key);

// Convenience cursor over one stream: the i-th draw uses counter = start + i.
// The cursor itself is plain data and can be copied to replay a sequence.
class RngCursor {
public:
    explicit RngCursor(RngKey key) : key_(key) {}

    double uniform() { return rng_uniform(next()); }
    double normal() { return rng_normal(next()); }
    std::uint64_t bits() { return rng_bits(next()); }
    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    const RngKey& key() const { return key_; }

private:
    RngKey next() {
        RngKey k = key_;
        ++key_.counter;
        return k;
    }

    RngKey key_;
};

} // namespace cag
