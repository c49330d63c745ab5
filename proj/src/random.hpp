#pragma once

// Portable seeded permutations. std::shuffle and the standard distributions
// are implementation-defined, so splits and random selections would differ
// between standard libraries; mt19937_64's output sequence is not.

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace dialoscope::detail {

/// Uniform draw in [0, bound) by rejection; bound > 0.
inline std::uint64_t bounded_draw(std::mt19937_64& rng, std::uint64_t bound) {
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
        const std::uint64_t r = rng();
        if (r >= threshold) return r % bound;
    }
}

/// Fisher-Yates, drawing the swap partner for position i from [0, i].
template <typename T>
void seeded_shuffle(std::vector<T>& items, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = items.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(bounded_draw(rng, i));
        std::swap(items[i - 1], items[j]);
    }
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace dialoscope::detail
