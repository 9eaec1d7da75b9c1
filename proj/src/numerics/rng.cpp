#include "cag/numerics/rng.hpp"

#include <cmath>
#include <numbers>

namespace cag {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

RngKey RngKey::split(std::string_view label) const { return split(fnv1a64(label)); }

RngKey RngKey::split(std::uint64_t label) const {
    return {seed, splitmix64(stream ^ splitmix64(label + 0x632BE59BD9B4E019ull)), counter};
}

std::uint64_t rng_bits(const RngKey& key) {
    std::uint64_t h = splitmix64(key.seed);
    h = splitmix64(h ^ key.stream);
    h = splitmix64(h ^ key.counter);
    return h;
}

double rng_uniform(const RngKey& key) {
    return static_cast<double>(rng_bits(key) >> 11) * 0x1.0p-53;
}

double rng_normal(const RngKey& key) {
    const std::uint64_t h = rng_bits(key);
    const RngKey second{splitmix64(h), key.stream ^ 0xA5A5A5A5A5A5A5A5ull, key.counter};
    // u1 in (0, 1] keeps the log finite.
    const double u1 = 1.0 - static_cast<double>(h >> 11) * 0x1.0p-53;
    const double u2 = rng_uniform(second);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngCursor::below(std::uint64_t n) {
    if (n <= 1) return 0;
    // Rejection sampling removes modulo bias.
    const std::uint64_t limit = ~0ull - (~0ull % n);
    for (;;) {
        const std::uint64_t b = bits();
        if (b < limit) return b % n;
    }
}

} // namespace cag
