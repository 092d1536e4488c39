#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace sardet {

// Counter-based splitmix64 stream. Same seed gives the same sequence on
// every platform, which is what checkpoint/dataset determinism rests on.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in the open interval (0, 1); never returns an exact endpoint
    double uniform01() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    int uniform_int(int lo, int hi) {  // inclusive range
        if (hi <= lo) return lo;
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u = uniform01();
        double v = uniform01();
        double r = std::sqrt(-2.0 * std::log(u));
        spare_ = r * std::sin(2.0 * M_PI * v);
        have_spare_ = true;
        return r * std::cos(2.0 * M_PI * v);
    }

    // mean-1 gamma with integer shape L (multiplicative speckle model):
    // Gamma(L, 1/L) = (sum of L unit exponentials) / L
    double gamma_mean1(int looks) {
        double acc = 0.0;
        for (int i = 0; i < looks; ++i) acc -= std::log(uniform01());
        return acc / static_cast<double>(looks);
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Derives an independent stream for a named substream of a master seed.
inline uint64_t derive_seed(uint64_t master, std::string_view name) {
    Rng mix(master ^ fnv1a(name));
    return mix.next_u64();
}

}  // namespace sardet
