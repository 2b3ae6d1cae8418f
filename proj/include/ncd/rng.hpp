#pragma once

// Self-contained counter-seeded RNG. std::uniform_*_distribution is not
// bit-stable across standard libraries, so every draw here is spelled out.

#include <cstdint>
#include <cmath>
#include <vector>

namespace ncd {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Order-independent stream derivation: hash(seed, index) gives every
// problem / step / purpose its own generator.
inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
    uint64_t s = seed ^ (0x9e3779b97f4a7c15ull + (index << 1));
    uint64_t a = splitmix64(s);
    uint64_t b = splitmix64(s);
    return a ^ (b << 1 | b >> 63);
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
        has_gauss_ = false;
        gauss_ = 0.0;
    }

    // xoshiro256**
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

    // Uniform in [0, n), n > 0. Rejection keeps it unbiased.
    uint64_t below(uint64_t n) {
        uint64_t mask = ~0ull;
        if (n <= 1) return 0;
        uint64_t limit = ~0ull - (~0ull % n + 1) % n;  // last accepted value
        uint64_t v = next_u64() & mask;
        while (v > limit) v = next_u64();
        return v % n;
    }

    // Uniform in [0, 1) with 53 random bits.
    double real01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * real01(); }

    // Box-Muller, cached pair.
    double normal() {
        if (has_gauss_) {
            has_gauss_ = false;
            return gauss_;
        }
        double u1 = real01(), u2 = real01();
        while (u1 <= 0.0) u1 = real01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        gauss_ = r * std::sin(a);
        has_gauss_ = true;
        return r * std::cos(a);
    }

    bool bernoulli(double p) { return real01() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Sample m distinct values from {0, ..., n-1}, order randomized.
    std::vector<int> sample_without_replacement(int n, int m) {
        auto all = std::vector<int>(size_t(n));
        for (int i = 0; i < n; ++i) all[size_t(i)] = i;
        shuffle(all);
        all.resize(size_t(m));
        return all;
    }

    // Serializable state: 4 words + the Box-Muller cache.
    struct State {
        uint64_t s[4];
        bool has_gauss;
        double gauss;
    };
    State state() const { return {{s_[0], s_[1], s_[2], s_[3]}, has_gauss_, gauss_}; }
    void set_state(const State& st) {
        for (int i = 0; i < 4; ++i) s_[i] = st.s[i];
        has_gauss_ = st.has_gauss;
        gauss_ = st.gauss;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4] = {};
    bool has_gauss_ = false;
    double gauss_ = 0.0;
};

// Fixed purpose tags so toggling one consumer never shifts another's stream.
namespace rng_stream {
inline constexpr uint64_t kInit = 0x01;
inline constexpr uint64_t kShuffle = 0x02;
inline constexpr uint64_t kReplace = 0x03;
inline constexpr uint64_t kDropout = 0x04;
inline constexpr uint64_t kGenerate = 0x05;
}  // namespace rng_stream

inline Rng stream_rng(uint64_t seed, uint64_t purpose, uint64_t index = 0) {
    return Rng(mix_seed(mix_seed(seed, purpose), index));
}

}  // namespace ncd
