#pragma once

// Deterministic, platform-independent PRNG stack used everywhere randomness
// is needed (init, shuffles, data generation). Exact algorithms, so that the
// same seed produces the same bits on any machine:
//
//   - SplitMix64 (Steele/Lea/Flood): used to mix seeds and to expand a
//     64-bit seed into generator state.
//   - xoshiro256** (Blackman/Vigna): the work generator, seeded from four
//     consecutive SplitMix64 outputs.
//   - uniform doubles take the top 53 bits: (next() >> 11) * 2^-53.
//   - bounded integers use unbiased rejection: reject r < (-bound % bound),
//     then r % bound.
//   - gaussians use Box-Muller on (1 - u1, u2) with the cos branch returned
//     first and the sin branch cached.
//
// Independent random streams are derived as
//   derive_seed(base, stream, index) = mix(mix(mix(base) ^ stream) ^ index)
// where mix is the SplitMix64 output function.

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace bcat {

inline uint64_t splitmix64_mix(uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t stream, uint64_t index) {
    return splitmix64_mix(splitmix64_mix(splitmix64_mix(base) ^ stream) ^ index);
}

// Stream ids for the seed-derivation scheme. Never renumber: batch order,
// parameter init and dataset contents all hang off these.
enum : uint64_t {
    kStreamParamInit = 1,
    kStreamShuffleSource = 2,
    kStreamShuffleTarget = 3,
    kStreamResample = 4,
    kStreamBankPrefill = 5,
    kStreamDataGen = 6,
};

class SplitMix64 {
  public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}
    uint64_t next() {
        state_ += 0x9E3779B97F4A7C15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

  private:
    uint64_t state_;
};

class Rng {
  public:
    explicit Rng(uint64_t seed) {
        SplitMix64 sm(seed);
        for (auto& w : s_) w = sm.next();
        has_spare_ = false;
        spare_ = 0.0;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [-a, a].
    double next_uniform(double a) { return (2.0 * next_double() - 1.0) * a; }

    // Unbiased integer in [0, bound).
    uint64_t next_below(uint64_t bound) {
        const uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            const uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    // Standard normal via Box-Muller, spare cached.
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - next_double();  // (0, 1]
        const double u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4];
    bool has_spare_;
    double spare_;
};

// Seeded Fisher-Yates: for i = n-1 .. 1, swap(v[i], v[next_below(i+1)]).
template <typename T>
void fisher_yates(std::vector<T>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(rng.next_below(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace bcat
