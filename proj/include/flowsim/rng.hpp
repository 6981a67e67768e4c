#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace flowsim {

/// 64-bit FNV-1a, used to turn stream names into seed material.
constexpr std::uint64_t fnv1a64(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : text) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed of the stream `name` under `master_seed`. Streams with different
/// names are independent, so adding a consumer never perturbs another one.
constexpr std::uint64_t stream_seed(std::uint64_t master_seed, std::string_view name) {
    return splitmix64(master_seed ^ splitmix64(fnv1a64(name)));
}

/// Named random stream.
///
/// The engine (std::mt19937_64) has a sequence fixed by the standard; the
/// conversions below are written out by hand because the standard library
/// distributions are implementation-defined.
class RandomStream {
public:
    RandomStream() : engine_(0) {}
    explicit RandomStream(std::uint64_t seed) : engine_(seed) {}
    RandomStream(std::uint64_t master_seed, std::string_view name)
        : engine_(stream_seed(master_seed, name)) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = engine_();
        while (v >= limit) v = engine_();
        return v % n;
    }

    /// Standard normal via Box-Muller (one value per call).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace flowsim
