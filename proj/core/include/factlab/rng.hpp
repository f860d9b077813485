#pragma once
// Seeded randomness. All distributions are implemented explicitly (Box-Muller,
// inverse-CDF, Fisher-Yates) rather than via std::*_distribution, whose output
// sequences are implementation-defined; experiment bytes must not depend on
// the standard library vendor.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace factlab {

// FNV-1a, for deriving seeds from strings
inline uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Order-sensitive seed derivation: mix_seed(s, a, b) != mix_seed(s, b, a).
inline uint64_t mix_seed(uint64_t seed) { return splitmix64(seed); }
template <typename... Rest>
inline uint64_t mix_seed(uint64_t seed, uint64_t head, Rest... rest) {
    return mix_seed(splitmix64(seed ^ splitmix64(head + 0x632be59bd9b4e019ull)), rest...);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(splitmix64(seed)) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, n) without modulo bias
    uint64_t next_below(uint64_t n) {
        if (n == 0) throw std::invalid_argument("rng: next_below(0)");
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = gen_();
        } while (v >= limit);
        return v % n;
    }

    // uniform double in [0, 1) with 53 random bits
    double next_double() { return double(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    double normal(double mean = 0.0, double stddev = 1.0) {
        if (!have_spare_) {
            double u, v, s;
            do {
                u = 2.0 * next_double() - 1.0;
                v = 2.0 * next_double() - 1.0;
                s = u * u + v * v;
            } while (s >= 1.0 || s == 0.0);
            double m = std::sqrt(-2.0 * std::log(s) / s);
            spare_ = v * m;
            have_spare_ = true;
            return mean + stddev * u * m;
        }
        have_spare_ = false;
        return mean + stddev * spare_;
    }

    // index draw from nonnegative weights by inverse CDF
    size_t pick_weighted(const std::vector<double>& w) {
        double total = 0.0;
        for (double x : w) total += x;
        if (!(total > 0.0)) throw std::invalid_argument("rng: weights sum to zero");
        double r = next_double() * total;
        double acc = 0.0;
        for (size_t i = 0; i < w.size(); ++i) {
            acc += w[i];
            if (r < acc) return i;
        }
        return w.size() - 1;
    }

    template <typename V>
    void shuffle(V& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace factlab
