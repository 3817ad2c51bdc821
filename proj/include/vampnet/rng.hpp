#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace vampnet {

/// SplitMix64 mixing step. Used to derive independent stream seeds from a
/// master seed; the engine state itself is a std::mt19937_64.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Deterministic sub-seed: seed for stream `stream` of run `salt` under
/// `master`. Distinct (salt, stream) pairs give uncorrelated engine seeds.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t salt, std::uint64_t stream = 0) {
    std::uint64_t s = master;
    std::uint64_t a = splitmix64(s);
    s ^= salt * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL;
    std::uint64_t b = splitmix64(s);
    s ^= stream + 0x9e3779b97f4a7c15ULL;
    std::uint64_t c = splitmix64(s);
    return a ^ (b << 1) ^ c;
}

/// Random stream with explicitly implemented variates.
///
/// The C++ standard pins down the mt19937_64 output sequence but not the
/// distributions on top of it, so uniform, normal and bounded-integer draws
/// are implemented here: trajectories and training runs replay bit-exactly
/// on any conforming platform. Normal variates use the Box-Muller transform
/// (pairs generated from two uniforms; the second variate is cached).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t raw() { return engine_(); }

    /// Uniform double in [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    /// Uniform double in (0, 1].
    double uniform_open() { return 1.0 - uniform(); }

    /// Standard normal variate (Box-Muller).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform_open();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    /// Uniform integer in [0, n) by rejection; n must be positive.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t(0) - (~std::uint64_t(0) % n);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Fisher-Yates shuffle with the rejection sampler above.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace vampnet
