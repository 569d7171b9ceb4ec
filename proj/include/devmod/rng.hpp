#pragma once

#include <cstdint>
#include <random>

namespace devmod {

/// Seeded generator built on the standard mt19937_64 engine.
///
/// The engine's output sequence is fixed by the C++ standard; the uniform and
/// normal transforms below are written out explicitly because the standard
/// library distributions are implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    [[nodiscard]] std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi], unbiased by rejection.
    int uniform_int(int lo, int hi);

    /// Standard normal via Box-Muller; pairs are cached.
    double normal();
    double normal(double mean, double std) { return mean + std * normal(); }

    /// Independent generator derived from this one's seed and a stream tag.
    [[nodiscard]] Rng fork(std::uint64_t stream) const;

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace devmod
