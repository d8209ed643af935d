#pragma once

#include <cmath>
#include <cstdint>

namespace eqdet {

/// Counter-based pseudo-random generator.
///
/// Draw i of a stream with seed s is splitmix64_mix(s + (i+1) * GOLDEN),
/// where splitmix64_mix is the standard splitmix64 finalizer. Streams are
/// a pure function of (seed, counter), so they are identical across
/// platforms and independent of how earlier draws were consumed.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() {
        ++counter_;
        return mix(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
    }

    std::uint64_t counter() const { return counter_; }

    /// Uniform in [0,1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Inclusive range. Modulo reduction; fine for the small ranges used here.
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
    }

    /// Standard normal via Box-Muller. Always consumes exactly two uniforms.
    double normal() {
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1 + 0x1.0p-53));
        return r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

}  // namespace eqdet
