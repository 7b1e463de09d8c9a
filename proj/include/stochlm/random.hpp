#pragma once

#include <cstdint>
#include <cstring>
#include <random>

#include "stochlm/types.hpp"

namespace stochlm {

/// SplitMix64 finalizer; bijective mixing of a 64-bit word.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Counter-based child seed: stream `index` of the master seed `seed`, tagged by
/// `purpose` so that different consumers of one master seed never collide.
constexpr std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index) {
    return splitmix64(splitmix64(seed ^ splitmix64(purpose)) + index);
}

namespace seed_purpose {
inline constexpr std::uint64_t ensemble = 1;
inline constexpr std::uint64_t bridge = 2;
inline constexpr std::uint64_t de = 3;
inline constexpr std::uint64_t em = 4;
inline constexpr std::uint64_t synth = 5;
inline constexpr std::uint64_t simulate = 6;
}  // namespace seed_purpose

/// Stream index derived from the bit pattern of a shape, so per-observation
/// randomness does not depend on the observation's position in a list.
inline std::uint64_t content_stream(const Eigen::Ref<const Eigen::VectorXd>& values) {
    std::uint64_t h = 0x6A09E667F3BCC909ULL;
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        std::uint64_t bits = 0;
        const double v = values[i];
        std::memcpy(&bits, &v, sizeof bits);
        h = splitmix64(h ^ bits);
    }
    return h;
}

using Rng = std::mt19937_64;

/// Vector of i.i.d. N(0, variance) draws.
inline Vector gaussian_increment(Rng& rng, Eigen::Index m, double variance) {
    std::normal_distribution<double> nd(0.0, std::sqrt(variance));
    Vector v(m);
    for (Eigen::Index i = 0; i < m; ++i) v[i] = nd(rng);
    return v;
}

}  // namespace stochlm
