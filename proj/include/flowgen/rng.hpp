#pragma once

#include <cmath>
#include <cstdint>

namespace flowgen {

/// Counter-based splitmix64 generator with an explicit Box-Muller normal.
/// Self-contained so streams are bit-identical across platforms and standard
/// libraries, and cheap to split: child streams are derived from (seed, index)
/// pairs without sharing state with the parent.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ^ kGolden) {
        // scramble so nearby seeds give unrelated streams
        next_u64();
        next_u64();
    }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in (0, 1]: never returns 0 so log() is safe.
    double uniform() {
        return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

    /// Standard normal via Box-Muller (no caching: exactly two uniforms per draw).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Independent child stream for ensemble member / worker `index`.
    Rng split(std::uint64_t index) const {
        Rng child(0);
        child.state_ = state_ ^ (0x5851f42d4c957f2dULL * (index + 1));
        child.next_u64();
        return child;
    }

private:
    static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
    std::uint64_t state_;
};

} // namespace flowgen
