#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace fllm {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Folds a list of integers into one seed. Used to derive independent,
// reproducible streams from (base seed, purpose, client id, round, ...).
inline uint64_t derive_seed(std::initializer_list<uint64_t> parts) {
    uint64_t state = 0x8f1bbcdcu;
    uint64_t acc = 0;
    for (uint64_t p : parts) {
        state ^= p + 0x9e3779b97f4a7c15ull + (state << 6) + (state >> 2);
        acc ^= splitmix64(state);
    }
    return acc;
}

// Deterministic random stream. std::mt19937_64 is fully specified by the
// standard, and uniform/gaussian draws below avoid std::*_distribution,
// whose output is implementation-defined.
class DetRng {
public:
    explicit DetRng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform double in [0, 1) with 53 random bits.
    double next_unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; the spare value is cached so the
    // stream consumes exactly one uniform pair per two gaussians.
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - next_unit();  // (0, 1], keeps log finite
        double u2 = next_unit();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Uniform index in [0, n). Modulo bias is irrelevant at desk scale;
    // what matters here is determinism.
    size_t next_below(size_t n) { return n == 0 ? 0 : static_cast<size_t>(engine_() % n); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = next_below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace fllm
