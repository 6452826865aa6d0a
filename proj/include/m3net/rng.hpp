#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace m3net {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_str(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Deterministic RNG with hand-rolled distributions. std::*_distribution is
// implementation-defined, so all sampling goes through these transforms to keep
// bit-identical streams across compilers.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)), stream_(seed) {}

    // Independent child stream, e.g. rng.derive("augment", epoch, sample).
    Rng derive(const std::string& tag, std::uint64_t a = 0, std::uint64_t b = 0) const {
        std::uint64_t s = splitmix64(stream_ ^ hash_str(tag));
        s = splitmix64(s ^ (a + 0x9e3779b97f4a7c15ULL));
        s = splitmix64(s ^ (b + 0xbf58476d1ce4e5b9ULL));
        return Rng(s);
    }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        const std::uint64_t limit = n * ((~std::uint64_t{0}) / n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal, Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::mt19937_64 engine_;
    std::uint64_t stream_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace m3net
