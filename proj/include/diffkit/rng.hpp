// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>

namespace diffkit {

/// Counter-based SplitMix64 generator. The state advances by a fixed odd
/// constant per draw and each output is a bijective mix of the counter, so
/// streams are stable across platforms for a given seed. Normal variates use
/// the Box-Muller transform (second value of each pair is cached).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1), 53 mantissa bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [lo, hi) without modulo bias (rejection sampling).
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t range = static_cast<std::uint64_t>(hi - lo);
        const std::uint64_t limit = (~std::uint64_t{0} / range) * range;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return lo + static_cast<std::int64_t>(x % range);
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // 1 - uniform() lies in (0, 1], keeping the log finite.
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Mixes an arbitrary list of 64-bit fields into one seed. Used to derive
/// independent sub-streams, e.g. per (seed, epoch, sample) for augmentation.
inline std::uint64_t mix_seed(std::uint64_t a) {
    std::uint64_t z = a + 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

template <typename... Rest>
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, Rest... rest) {
    std::uint64_t h = mix_seed(a ^ (b + 0x9E3779B97F4A7C15ull + (a << 6) + (a >> 2)));
    if constexpr (sizeof...(rest) == 0) {
        return h;
    } else {
        return mix_seed(h, rest...);
    }
}

} // namespace diffkit
