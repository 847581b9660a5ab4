#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace moekit {

// splitmix64; fixed algorithm so streams are reproducible across platforms,
// unlike std:: distributions.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, n)
    uint64_t next_below(uint64_t n) { return next_u64() % n; }

    int next_int(int lo, int hi) { // inclusive bounds
        return lo + static_cast<int>(next_below(static_cast<uint64_t>(hi - lo + 1)));
    }

    // uniform in [0, 1)
    double next_real() { return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0); }

    double next_real(double lo, double hi) { return lo + (hi - lo) * next_real(); }

    bool next_bool(double p) { return next_real() < p; }

    // Box-Muller
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_real();
        double u2 = next_real();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 6.283185307179586 * u2;
        spare_ = r * std::sin(t);
        have_spare_ = true;
        return r * std::cos(t);
    }

    template <typename It> void shuffle(It first, It last) {
        const auto n = static_cast<uint64_t>(last - first);
        for (uint64_t i = n; i > 1; --i) {
            const uint64_t j = next_below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

  private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

inline uint64_t hash_str(const std::string & s) { // FNV-1a
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Independent stream per (seed, label); used to make parameter init
// independent of registration order.
inline Rng seeded_rng(uint64_t seed, const std::string & label) {
    return Rng(seed ^ hash_str(label));
}

} // namespace moekit
