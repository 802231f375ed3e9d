#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace repalign {

// Counter-based generator. Every draw is a pure function of (key, counter):
//
//   bits(key, c)    = splitmix64(key ^ splitmix64(c))
//   uniform(key, c) = ((bits >> 11) + 0.5) * 2^-53            in (0, 1)
//   normal(key, i)  = sqrt(-2 ln uniform(key, 2i)) * cos(2 pi uniform(key, 2i+1))
//
// The extractor reproduces noise fields from these three lines alone.

constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t counter_bits(std::uint64_t key, std::uint64_t counter) noexcept {
    return splitmix64(key ^ splitmix64(counter));
}

/// Derives an independent key for a sub-stream (per image, per model, ...).
constexpr std::uint64_t derive_key(std::uint64_t key, std::uint64_t index) noexcept {
    return splitmix64(key ^ splitmix64(index));
}

inline double counter_uniform(std::uint64_t key, std::uint64_t counter) noexcept {
    return (static_cast<double>(counter_bits(key, counter) >> 11) + 0.5) * 0x1.0p-53;
}

inline double counter_normal(std::uint64_t key, std::uint64_t index) noexcept {
    const double u1 = counter_uniform(key, 2 * index);
    const double u2 = counter_uniform(key, 2 * index + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Sequential view over the counter stream, for generators that just need
/// "the next draw".
class CounterStream {
public:
    explicit CounterStream(std::uint64_t key) noexcept : key_(key) {}

    double uniform() noexcept { return counter_uniform(key_, counter_++); }
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
    /// Consumes two counters; a stream that only draws normals reproduces
    /// counter_normal(key, 0), counter_normal(key, 1), ...
    double normal() noexcept {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace repalign
