#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace tss {

// Counter-based deterministic random stream. Every draw is a pure function
// of (seed, stream, counter), so parallel schedules and forward/backward
// replays see identical values.
class CounterRng {
public:
    CounterRng() = default;
    CounterRng(uint64_t seed, uint64_t stream) : seed_(seed), stream_(stream) {}

    static uint64_t hash_str(std::string_view s) {
        // FNV-1a, 64-bit.
        uint64_t h = 1469598103934665603ull;
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ull;
        }
        return h;
    }

    CounterRng derive(uint64_t substream) const {
        return CounterRng(seed_, mix(stream_ ^ 0x9e3779b97f4a7c15ull, substream));
    }

    CounterRng derive(std::string_view name) const { return derive(hash_str(name)); }

    uint64_t bits(uint64_t counter) const {
        return mix(mix(seed_ ^ 0xd1b54a32d192ed03ull, stream_), counter);
    }

    // Uniform in [0, 1): 53 mantissa bits.
    double uniform(uint64_t counter) const {
        return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t counter, uint64_t n) const {
        return bits(counter) % n;
    }

    // Standard normal via Box-Muller on two decorrelated uniforms.
    double normal(uint64_t counter) const {
        double u1 = static_cast<double>(bits(counter * 2) >> 11) * 0x1.0p-53;
        double u2 = static_cast<double>(bits(counter * 2 + 1) >> 11) * 0x1.0p-53;
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    uint64_t seed() const { return seed_; }
    uint64_t stream() const { return stream_; }

private:
    static uint64_t mix(uint64_t a, uint64_t b) {
        // SplitMix64 finalizer over the combined word.
        uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    uint64_t seed_ = 0;
    uint64_t stream_ = 0;
};

}  // namespace tss
