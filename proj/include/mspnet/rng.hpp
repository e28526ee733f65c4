#pragma once
#include <cmath>
#include <cstdint>

namespace mspnet {

// SplitMix64 (Steele, Lea, Flood 2014). One 64-bit word of state, advanced by
// the golden-ratio increment; the 64-bit output stream is identical on every
// platform for a given seed. Constants:
//   increment  0x9E3779B97F4A7C15
//   mix stages 0xBF58476D1CE4E5B9 (>>30), 0x94D049BB133111EB (>>27), >>31
struct RngState {
    static constexpr const char* kAlgorithm = "splitmix64";

    std::uint64_t state = 0;

    RngState() = default;
    explicit RngState(std::uint64_t seed) : state(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53 mantissa bits; exact same value on all platforms.
    double uniform() {
        return double(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Unbiased integer in [0, n) via rejection.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = n * ((~std::uint64_t{0}) / n);
        std::uint64_t r = next_u64();
        while (r >= limit) r = next_u64();
        return r % n;
    }

    // Standard normal, Marsaglia polar method. Consumes a data-dependent but
    // seed-deterministic number of uniforms; the second value of each pair is
    // cached.
    double normal();

    // Decorrelated child stream: hash of (state-as-seed, stream id). Used to
    // give shuffling, augmentation, dropout, etc. independent streams from
    // one base seed.
    RngState derive(std::uint64_t stream_id) const {
        RngState h(state ^ (0xD1B54A32D192ED03ULL * (stream_id + 1)));
        return RngState(h.next_u64());
    }

    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline double RngState::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u, v, s;
    do {
        u = uniform(-1.0, 1.0);
        v = uniform(-1.0, 1.0);
        s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
}

// Stream ids for the pipeline; a run's behaviour is a pure function of
// (base seed, these constants).
namespace rng_stream {
constexpr std::uint64_t kInit = 1;     // parameter initialization
constexpr std::uint64_t kSplit = 2;    // subject split shuffle
constexpr std::uint64_t kShuffle = 3;  // per-epoch minibatch shuffle
constexpr std::uint64_t kAugment = 4;  // rigid augmentation
constexpr std::uint64_t kDropout = 5;  // dropout masks
constexpr std::uint64_t kSynth = 6;    // synthetic corpus generation
constexpr std::uint64_t kSample = 7;   // boundary subsampling
} // namespace rng_stream

} // namespace mspnet
