#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace pdiff {

/// Derives a stage seed from a global seed and a label, so that changing one
/// stage's draw count never perturbs another stage's stream.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
    // FNV-1a over the seed bytes followed by the label bytes.
    std::uint64_t h = 1469598103934665603ull;
    for (int i = 0; i < 8; ++i) {
        h ^= (seed >> (8 * i)) & 0xffu;
        h *= 1099511628211ull;
    }
    for (unsigned char c : label) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

/// Deterministic random source. Normal variates use Box-Muller on top of
/// mt19937_64 instead of std::normal_distribution, whose algorithm is
/// implementation-defined; this keeps streams identical across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Integer in [0, n).
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        // u1 in (0, 1] so the log is finite.
        const double u1 = (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = static_cast<double>(gen_() >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    void fill_normal(std::vector<double>& out, double mean = 0.0, double stddev = 1.0) {
        for (auto& v : out) v = mean + stddev * normal();
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.empty()) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::swap(v[i], v[index(i + 1)]);
        }
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace pdiff
