#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace echoatt {

// Deterministic splitmix64 generator. Self-contained so that seeded runs are
// bit-identical across standard library implementations. All randomness in the
// toolkit flows from one master seed, split per consumer by a string label.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    // Derive an independent stream from (master seed, label).
    static Rng from_label(uint64_t master_seed, std::string_view label) {
        uint64_t h = 1469598103934665603ull;  // FNV-1a
        for (char c : label) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        Rng r(master_seed ^ h);
        r.next_u64();  // decorrelate nearby seeds
        return r;
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Uniform integer in [0, n). n must be > 0.
    uint64_t next_below(uint64_t n) {
        // Multiply-shift rejection-free mapping; bias is negligible for n << 2^64
        // but we keep exact rejection sampling for determinism-friendly fairness.
        uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t v = next_u64();
            if (v >= threshold) return v % n;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace echoatt
