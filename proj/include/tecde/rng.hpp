#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace tecde {

// SplitMix64 finalizer; used to derive independent substream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t stream,
                                    std::uint64_t lane = 0) {
    return mix_seed(mix_seed(mix_seed(seed) ^ stream) ^ (lane * 0x632be59bd9b4e019ULL));
}

// Seeded random stream. One instance per patient/purpose; never shared
// between threads.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform in (0, 1], safe for log().
    double uniform_open() { return 1.0 - uniform(); }

    double normal(double mean, double sd) {
        return mean + sd * normal_(engine_);
    }

    bool bernoulli(double p) { return uniform() < p; }

    double exponential(double rate) { return -std::log(uniform_open()) / rate; }

    std::uint64_t next() { return engine_(); }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace tecde
