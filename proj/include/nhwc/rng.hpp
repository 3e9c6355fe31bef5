#pragma once

#include <cmath>
#include <cstdint>

namespace nhwc {

// Deterministic splitmix64 generator. Identical seeds give identical streams
// on every platform, which the reproducibility contract depends on; std::
// distributions are implementation-defined, so normal/uniform are hand-rolled.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Modulo bias is negligible for n << 2^64.
    std::uint64_t uniform_int(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    // Standard normal via Box-Muller; one draw consumes two uniforms.
    double normal() {
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Independent child stream; used to give each pipeline stage its own
    // deterministic stream derived from one user seed.
    Rng fork(std::uint64_t tag) const {
        Rng mixer(state_ ^ (0xA0761D6478BD642Full * (tag + 1)));
        return Rng(mixer.next_u64());
    }

private:
    std::uint64_t state_;
};

namespace seed_tag {
// Stage tags for Rng::fork.
inline constexpr std::uint64_t params = 1;
inline constexpr std::uint64_t data_order = 2;
inline constexpr std::uint64_t ref_clip = 3;
inline constexpr std::uint64_t sampling = 4;
inline constexpr std::uint64_t background = 5;
inline constexpr std::uint64_t codebook = 6;
inline constexpr std::uint64_t dropout = 7;
} // namespace seed_tag

} // namespace nhwc
