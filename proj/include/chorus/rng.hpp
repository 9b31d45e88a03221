#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace chorus::rng {

// splitmix64; used to derive well-mixed stream seeds from (seed, tag...) tuples.
inline std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    return mix(mix(mix(mix(seed) ^ a) ^ b) ^ c);
}

// mt19937_64 output is standard-defined; the std::*_distribution adaptors are
// not, so draws below are hand-rolled to keep runs reproducible across stdlibs.
class Stream {
public:
    explicit Stream(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double next_unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // [0, n)
    std::size_t next_index(std::size_t n) {
        return n == 0 ? 0 : static_cast<std::size_t>(next_unit() * static_cast<double>(n)) % n;
    }

    double next_normal(double mean = 0.0, double stddev = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + spare_ * stddev;
        }
        double u1 = 0.0;
        do {
            u1 = next_unit();
        } while (u1 <= 0.0);
        const double u2 = next_unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mean + r * std::cos(theta) * stddev;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[next_index(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace chorus::rng
