#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace parq {

// SplitMix64 one-round (Steele / Vigna); used to derive sub-stream seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
    constexpr std::uint64_t kPhi = 0x9E3779B97F4A7C15ULL;
    x += kPhi;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    constexpr std::uint64_t kPhi = 0x9E3779B97F4A7C15ULL;
    return splitmix64(base + index * kPhi);
}

// Uniform double in [0, 1) from the top 53 bits of the engine output.
inline double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double sample_exponential(std::mt19937_64& rng, double rate) {
    return -std::log1p(-uniform01(rng)) / rate;
}

// Independent sub-streams for one trajectory. Events, holding times, action
// draws and weight initialization never share a stream, so swapping the
// routing policy leaves the event sequence untouched (common random numbers
// across paired policy comparisons).
struct RngStreams {
    std::mt19937_64 event;
    std::mt19937_64 holding;
    std::mt19937_64 action;
    std::mt19937_64 init;

    explicit RngStreams(std::uint64_t seed)
        : event(derive_seed(seed, 1)),
          holding(derive_seed(seed, 2)),
          action(derive_seed(seed, 3)),
          init(derive_seed(seed, 4)) {}
};

}  // namespace parq
