#pragma once

#include <cstdint>
#include <random>

namespace r2d {

/// Portable deterministic RNG: mt19937_64 with hand-rolled distributions, so
/// identical seeds give identical streams across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Seed for an independent substream derived from (seed, stream).
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

    std::uint64_t next() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [lo, hi].
    int uniform_int(int lo, int hi);
    double normal();

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace r2d
