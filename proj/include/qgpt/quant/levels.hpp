#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qgpt/core/error.hpp"

namespace qgpt::quant {

// Number of positive levels k = 2^(b-1) - 1 for a symmetric b-bit quantizer.
inline int level_k(int bits) {
    if (bits < 2 || bits > 16) throw ContractError("bit-width must be in [2, 16], got " + std::to_string(bits));
    return (1 << (bits - 1)) - 1;
}

// The uniform symmetric grid {-1, -(k-1)/k, ..., 0, ..., 1}.
struct LevelSet {
    int bits;
    int k;

    explicit LevelSet(int b) : bits(b), k(level_k(b)) {}

    std::size_t size() const { return static_cast<std::size_t>(2 * k + 1); }

    template <class T = double>
    T value(int index) const {
        return static_cast<T>(index) / static_cast<T>(k);
    }

    template <class T = double>
    std::vector<T> values() const {
        std::vector<T> out;
        out.reserve(size());
        for (int j = -k; j <= k; ++j) out.push_back(value<T>(j));
        return out;
    }
};

// Signed level index j in [-k, k] of the grid value j/k nearest to u.
// Ties go to the level farther from zero.
template <class T>
int nearest_level_index(T u, int k) {
    if (!(std::abs(u) <= T(1))) throw ContractError("nearest_level: |u| must be <= 1 (clip first)");
    const T kk = static_cast<T>(k);
    const int lo = static_cast<int>(std::floor(u * kk));
    int best = lo;
    T best_err = std::abs(static_cast<T>(lo) / kk - u);
    const int hi = lo + 1;
    if (hi <= k) {
        const T err = std::abs(static_cast<T>(hi) / kk - u);
        if (err < best_err || (err == best_err && std::abs(hi) > std::abs(best))) best = hi;
    }
    if (best < -k) best = -k;
    return best;
}

template <class T>
T nearest_level(T u, int bits) {
    const int k = level_k(bits);
    return static_cast<T>(nearest_level_index(u, k)) / static_cast<T>(k);
}

// Rounding with ties away from zero, as used by the integer-grid quantizers.
template <class T>
T round_half_away(T x) {
    return std::round(x);
}

}  // namespace qgpt::quant
