#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace msfuse {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// Substream splitting rule: sub_seed(seed, k) hashes (seed, k) through
/// splitmix64. Streams for distinct k are independent, so patients,
/// modalities, and folds can each draw from their own generator.
inline uint64_t sub_seed(uint64_t seed, uint64_t stream) {
    uint64_t s = seed ^ (0xD1B54A32D192ED03ull * (stream + 1));
    splitmix64(s);
    return splitmix64(s);
}

using Rng = std::mt19937_64;

inline Rng make_rng(uint64_t seed, uint64_t stream = 0) { return Rng(sub_seed(seed, stream)); }

// Distributions are hand-rolled on top of the raw 64-bit stream so that
// generated cohorts are identical across standard library versions.

/// Uniform in [0, 1).
inline double runif(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double runif(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * runif(rng);
}

/// Standard normal via Box-Muller.
inline double rnorm(Rng& rng) {
    double u1 = 1.0 - runif(rng);  // (0, 1]
    double u2 = runif(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

inline double rnorm(Rng& rng, double mean, double sd) { return mean + sd * rnorm(rng); }

/// Uniform integer in [0, n).
inline uint64_t rint(Rng& rng, uint64_t n) {
    return n == 0 ? 0 : rng() % n;
}

/// Normal truncated to [lo, hi] by resampling.
inline double rnorm_trunc(Rng& rng, double mean, double sd, double lo, double hi) {
    for (int i = 0; i < 1000; ++i) {
        double v = rnorm(rng, mean, sd);
        if (v >= lo && v <= hi) return v;
    }
    return std::min(std::max(mean, lo), hi);
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rint(rng, i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace msfuse
