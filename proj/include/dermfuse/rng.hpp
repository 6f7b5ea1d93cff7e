#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dermfuse/common.hpp"

namespace dermfuse {

/// Deterministic random source (xoshiro256++ seeded via splitmix64).
///
/// All distributions are computed from raw bits in-house so the value stream
/// is identical across platforms and standard library versions for a given
/// seed.
class SeededRng {
public:
    explicit SeededRng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        seed_ = seed;
        uint64_t x = seed;
        for (auto& w : state_) {
            x = splitmix64(x);
            w = x;
        }
        has_cached_normal_ = false;
        cached_normal_ = 0.0;
    }

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    double uniform01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in [a, b). Requires a < b.
    double uniform(double a, double b) {
        if (!(a < b)) throw ConfigError("uniform(a,b) requires a < b");
        return a + (b - a) * uniform01();
    }

    /// Gaussian via Box-Muller; the second variate is cached.
    double normal(double mean = 0.0, double stddev = 1.0) {
        if (stddev < 0.0) throw ConfigError("normal() requires stddev >= 0");
        if (has_cached_normal_) {
            has_cached_normal_ = false;
            return mean + stddev * cached_normal_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
        cached_normal_ = r * std::sin(theta);
        has_cached_normal_ = true;
        return mean + stddev * r * std::cos(theta);
    }

    bool bernoulli(double p) { return uniform01() < p; }

    /// Uniform integer in [0, n). Requires n > 0.
    uint64_t next_below(uint64_t n) {
        return uint64_t((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    /// In-place Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Full internal state, for checkpointing.
    struct State {
        std::array<uint64_t, 4> words;
        double cached_normal;
        bool has_cached_normal;
    };

    State state() const { return {state_, cached_normal_, has_cached_normal_}; }

    void set_state(const State& s) {
        state_ = s.words;
        cached_normal_ = s.cached_normal;
        has_cached_normal_ = s.has_cached_normal;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> state_{};
    uint64_t seed_ = 0;
    double cached_normal_ = 0.0;
    bool has_cached_normal_ = false;
};

}  // namespace dermfuse
