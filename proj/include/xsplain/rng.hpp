#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace xsplain {

// Deterministic random source. std::mt19937_64 gives a portable bit stream
// for a fixed seed; the distributions below are written out explicitly so
// sampled values do not depend on the standard library implementation.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() { return std::ldexp(static_cast<double>(engine_() >> 11), -53); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    int64_t uniform_index(int64_t n) { return static_cast<int64_t>(engine_() % static_cast<uint64_t>(n)); }

    // Standard normal via Box-Muller; one value per call, cached pair.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    // Fisher-Yates; stable result for a fixed seed regardless of platform.
    template <class T>
    void shuffle(std::vector<T>& items) {
        for (int64_t i = static_cast<int64_t>(items.size()) - 1; i > 0; --i) {
            const int64_t j = uniform_index(i + 1);
            std::swap(items[static_cast<size_t>(i)], items[static_cast<size_t>(j)]);
        }
    }

    // Derive an independent stream, e.g. one per sample or per epoch.
    Rng fork(uint64_t stream) {
        return Rng(mix(engine_state_key(), stream));
    }

private:
    uint64_t engine_state_key() { return engine_(); }

    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
        x ^= x >> 33;
        x *= 0xff51afd7ed558ccdULL;
        x ^= x >> 33;
        return x;
    }

    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace xsplain
