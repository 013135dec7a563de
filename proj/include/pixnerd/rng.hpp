#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <string_view>

namespace pixnerd {

// Counter-free xoshiro256** generator with a serializable state. The standard
// <random> distributions are implementation-defined, which would break the
// bit-exact train/resume and fixed-seed sampling contracts, so uniform and
// normal draws are produced here directly.
class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) : seed_(seed) {
        uint64_t s = seed;
        for (auto& w : state_) w = splitmix64(s);
    }

    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ULL;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static uint64_t hash_name(std::string_view name) {
        uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
        for (unsigned char c : name) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        return h;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform on [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; the paired draw is cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    uint64_t next_index(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    // Independent stream derived from the original seed and a label.
    Rng fork(std::string_view name) const {
        uint64_t mix = seed_ ^ hash_name(name);
        return Rng(splitmix64(mix));
    }

    uint64_t seed() const { return seed_; }

    // Full state: 4 generator words, seed, cached-normal payload, cache flag.
    std::array<uint64_t, 7> serialize() const {
        uint64_t cbits = 0;
        std::memcpy(&cbits, &cached_, sizeof(double));
        return {state_[0], state_[1], state_[2], state_[3], seed_, cbits, has_cached_ ? 1ULL : 0ULL};
    }

    void restore(const std::array<uint64_t, 7>& s) {
        state_ = {s[0], s[1], s[2], s[3]};
        seed_ = s[4];
        std::memcpy(&cached_, &s[5], sizeof(double));
        has_cached_ = (s[6] != 0);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> state_{};
    uint64_t seed_ = 0;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace pixnerd
