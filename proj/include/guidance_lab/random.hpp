#ifndef GUIDANCE_LAB_RANDOM_HPP
#define GUIDANCE_LAB_RANDOM_HPP

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>

#include "guidance_lab/vector_ops.hpp"

namespace glab {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Per-chain random stream.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. Uniform and Gaussian variates are derived here rather than
/// through <random> distributions, whose algorithms are implementation
/// defined; this keeps trajectories identical across standard libraries.
class ChainRng {
public:
    explicit ChainRng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    /// Stream for chain `index` of a run seeded with `master_seed`. Streams
    /// depend only on (master_seed, index), never on scheduling order.
    static ChainRng for_chain(std::uint64_t master_seed, std::uint64_t index) {
        return ChainRng(splitmix64(master_seed) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
    }

    /// Uniform on [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Standard normal (Box-Muller, both outputs used).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    void fill_normal(std::span<double> out) {
        for (double& v : out) v = normal();
    }

    Vec normal_vec(std::size_t dim) {
        Vec v(dim);
        fill_normal(v);
        return v;
    }

    /// Integer uniform on [0, n).
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace glab

#endif  // GUIDANCE_LAB_RANDOM_HPP
