#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "rankmerge/types.hpp"

namespace rankmerge {

// 64-bit FNV-1a. Used instead of std::hash so derived seeds do not depend on
// the standard library implementation.
constexpr std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
    return seed ^ fnv1a64(tag);
}

// mt19937_64 with explicit uniform/normal conversions. The engine's integer
// sequence is pinned by the standard; the floating-point conversions are done
// here rather than through std distributions, whose algorithms are
// implementation-defined, so streams reproduce across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Uniform on [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform(); // (0, 1]
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * 3.14159265358979323846 * u2;
        spare_ = radius * std::sin(angle);
        have_spare_ = true;
        return radius * std::cos(angle);
    }

    Vector uniform_vector(Index n) {
        Vector v(n);
        for (Index i = 0; i < n; ++i) v[i] = uniform();
        return v;
    }

    // Entries drawn in row-major order.
    Matrix normal_matrix(Index rows, Index cols) {
        Matrix m(rows, cols);
        for (Index i = 0; i < rows; ++i)
            for (Index j = 0; j < cols; ++j) m(i, j) = normal();
        return m;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace rankmerge
