#pragma once

#include <cstdint>

namespace dualseg {

// Counter-based generator. Output i of a stream is
//
//   mix64(key + (i + 1) * 0x9E3779B97F4A7C15)
//
// where mix64 is the SplitMix64 finalizer and key is derived from the seed
// (and stream id) with the same finalizer. For stream 0 the sequence is
// exactly SplitMix64 seeded with mix64(seed). Everything is integer
// arithmetic, so a seed reproduces bit-identical streams on any platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

    std::uint64_t next_u64();

    // Uniform double in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi). Lemire's multiply-shift with rejection.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller; consumes two outputs, nothing cached.
    double normal();

    // Independent child stream. Does not advance this generator.
    Rng split(std::uint64_t tag) const;

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

private:
    Rng(std::uint64_t seed, std::uint64_t key, bool);

    std::uint64_t seed_;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t z);

}  // namespace dualseg
