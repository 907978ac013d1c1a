#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace pmae {

// Seeded random stream with hand-rolled distributions.
//
// The engine (mt19937_64) has a sequence fixed by the C++ standard, and the
// distribution code below is ours, so a given seed produces the same values
// on every platform and toolchain. std::*_distribution is never used here
// because its output is implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(mix(seed)) {}

    // Independent stream for a (seed, a, b) coordinate, e.g. (run, epoch, batch).
    static Rng derive(uint64_t seed, uint64_t a, uint64_t b = 0) {
        uint64_t s = mix(seed + 0x9e3779b97f4a7c15ull * (a + 1));
        s = mix(s + 0x9e3779b97f4a7c15ull * (b + 1));
        return Rng(s);
    }

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

    // Uniform integer in [0, n), unbiased via rejection.
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) return 0;
        uint64_t threshold = (0 - n) % n; // 2^64 mod n
        for (;;) {
            uint64_t v = next_u64();
            if (v >= threshold) return v % n;
        }
    }

    // Standard normal via Box-Muller (cosine branch only, keeps the stream simple).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    // Normal(0, std) rejected outside [-2*std, 2*std], the usual ViT init.
    double trunc_normal(double std) {
        for (;;) {
            double z = normal();
            if (z >= -2.0 && z <= 2.0) return z * std;
        }
    }

    // Fisher-Yates using this stream.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    // splitmix64; spreads low-entropy seeds across the full state space.
    static uint64_t mix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    std::mt19937_64 engine_;
};

} // namespace pmae
