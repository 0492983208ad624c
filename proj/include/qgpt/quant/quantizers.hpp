#pragma once

// Pure fake-quantization routines. Every function works on one group of values
// (a whole tensor for layer-wise quantizers, one row for row-wise ones).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qgpt/core/error.hpp"
#include "qgpt/quant/levels.hpp"
#include "qgpt/quant/spec.hpp"

namespace qgpt::quant {

template <class T>
T mean_abs(std::span<const T> w) {
    if (w.empty()) throw DegenerateError("mean_abs of an empty tensor");
    double acc = 0;
    for (auto v : w) acc += std::abs(static_cast<double>(v));
    return static_cast<T>(acc / static_cast<double>(w.size()));
}

template <class T>
T max_abs(std::span<const T> w) {
    T m = 0;
    for (auto v : w) m = std::max(m, std::abs(v));
    return m;
}

// alpha = gamma * ||w||_1 / n.
template <class T>
T dynamic_alpha(std::span<const T> w, T gamma) {
    if (!(gamma > 0)) throw ContractError("dynamic_alpha: gamma must be positive");
    const T m = mean_abs(w);
    if (!(m > 0)) throw DegenerateError("dynamic_alpha: all-zero weight group cannot be quantized");
    return gamma * m;
}

// Level index of one weight under clipping factor alpha.
template <class T>
int symmetric_code(T w, T alpha, int k) {
    const T c = std::clamp(w, -alpha, alpha);
    return nearest_level_index(c / alpha, k);
}

// alpha * Q(clip(w, -alpha, alpha) / alpha), elementwise.
template <class T>
void fake_quant_symmetric(std::span<const T> w, T alpha, int bits, std::span<T> out) {
    if (!(alpha > 0)) throw ContractError("fake_quant_symmetric: alpha must be positive");
    const int k = level_k(bits);
    const T kk = static_cast<T>(k);
    // Branch-free form of nearest_level_index so the loop vectorizes; the
    // candidate errors are computed exactly as there, so codes agree bitwise.
    int non_finite = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        T c = w[i] < -alpha ? -alpha : w[i];
        c = c > alpha ? alpha : c;
        const T u = c / alpha;
        non_finite += static_cast<int>(u != u);
        const T lo = std::floor(u * kk);
        const T hi = lo + T(1);
        const T e_lo = std::abs(lo / kk - u);
        const T e_hi = std::abs(hi / kk - u);
        const bool up = (hi <= kk) & ((e_hi < e_lo) | ((e_hi == e_lo) & (lo >= T(0))));
        out[i] = alpha * ((up ? hi : lo) / kk);
    }
    if (non_finite > 0) throw ContractError("fake_quant_symmetric: non-finite input");
}

template <class T>
std::vector<T> fake_quant_symmetric(std::span<const T> w, T alpha, int bits) {
    std::vector<T> out(w.size());
    fake_quant_symmetric<T>(w, alpha, bits, out);
    return out;
}

// Uniform grid of 2^b points on [lo, hi]; ties round away from zero.
template <class T>
T asymmetric_value(T x, T lo, T hi, int bits) {
    const long levels = (1L << bits) - 1;
    const T step = (hi - lo) / static_cast<T>(levels);
    const T c = std::clamp(x, lo, hi);
    const long idx = std::clamp(static_cast<long>(round_half_away((c - lo) / step)), 0L, levels);
    if (idx == 0) return lo;
    if (idx == levels) return hi;
    return lo + step * static_cast<T>(idx);
}

template <class T>
std::vector<T> fake_quant_asymmetric(std::span<const T> x, T lo, T hi, int bits) {
    if (!(lo < hi)) throw ContractError("fake_quant_asymmetric: requires lo < hi");
    if (bits < 1) throw ContractError("fake_quant_asymmetric: bits must be positive");
    // Same arithmetic as asymmetric_value, written without branches.
    const T levels = static_cast<T>((1L << bits) - 1);
    const T step = (hi - lo) / levels;
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        T c = x[i] < lo ? lo : x[i];
        c = c > hi ? hi : c;
        T idx = round_half_away((c - lo) / step);
        idx = idx < T(0) ? T(0) : (idx > levels ? levels : idx);
        const T v = lo + step * idx;
        out[i] = idx == T(0) ? lo : (idx == levels ? hi : v);
    }
    return out;
}

// Maps u in [-1, 1] onto a grid value; nearest_level is the real quantizer, the
// identity gives the clip-only surrogate used for gradient checks.
template <class T>
using LevelMap = std::function<T(T u, int bits)>;

template <class T>
T default_level_map(T u, int bits) {
    return nearest_level(u, bits);
}

// d loss / d gamma for the dynamic-scaling quantizer: weights beyond the clip
// contribute g*Q(u); interior weights contribute g*(Q(u) - w/alpha); the sum is
// scaled by the mean weight magnitude.
template <class T>
T grad_gamma(std::span<const T> upstream, std::span<const T> w, T gamma, int bits,
             const LevelMap<T>& qmap = default_level_map<T>) {
    if (upstream.size() != w.size()) {
        throw DimensionError("grad_gamma: upstream has " + std::to_string(upstream.size()) + " entries, weights " +
                             std::to_string(w.size()));
    }
    const T m = mean_abs(w);
    const T alpha = dynamic_alpha(w, gamma);
    T acc = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const T u = std::clamp(w[i], -alpha, alpha) / alpha;
        const T q = qmap(u, bits);
        if (std::abs(w[i]) >= alpha) {
            acc += upstream[i] * q;
        } else {
            acc += upstream[i] * (-w[i] / alpha + q);
        }
    }
    return acc * m;
}

// Clip-gradient estimate that keeps only weights at or beyond the clip; the
// contrast arm for the dynamic scaling ablation.
template <class T>
T grad_gamma_outside_only(std::span<const T> upstream, std::span<const T> w, T gamma, int bits) {
    const T m = mean_abs(w);
    const T alpha = dynamic_alpha(w, gamma);
    T acc = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (std::abs(w[i]) >= alpha) acc += upstream[i] * nearest_level(std::clamp(w[i], -alpha, alpha) / alpha, bits);
    }
    return acc * m;
}

// ---------------------------------------------------------------------------
// PACT with separate negative and positive clipping factors.

template <class T>
int pact_code(T w, T alpha_neg, T alpha_pos, int k) {
    const T u = w >= 0 ? std::min(w, alpha_pos) / alpha_pos : std::max(w, -alpha_neg) / alpha_neg;
    return nearest_level_index(u, k);
}

template <class T>
T pact_value(int code, T alpha_neg, T alpha_pos, int k) {
    const T q = static_cast<T>(code) / static_cast<T>(k);
    return code >= 0 ? alpha_pos * q : alpha_neg * q;
}

template <class T>
std::vector<T> pact_quant(std::span<const T> w, T alpha_neg, T alpha_pos, int bits) {
    if (!(alpha_neg > 0) || !(alpha_pos > 0)) throw ContractError("pact_quant: clipping factors must be positive");
    const int k = level_k(bits);
    std::vector<T> out(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = pact_value(pact_code(w[i], alpha_neg, alpha_pos, k), alpha_neg, alpha_pos, k);
    return out;
}

template <class T>
struct PactGrads {
    T alpha_neg = 0;
    T alpha_pos = 0;
};

// Only clipped weights move the clipping factors.
template <class T>
PactGrads<T> pact_grad_alphas(std::span<const T> upstream, std::span<const T> w, T alpha_neg, T alpha_pos, int bits) {
    if (upstream.size() != w.size()) throw DimensionError("pact_grad_alphas: shape mismatch");
    const int k = level_k(bits);
    PactGrads<T> g;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] >= alpha_pos) {
            g.alpha_pos += upstream[i] * (static_cast<T>(pact_code(w[i], alpha_neg, alpha_pos, k)) / static_cast<T>(k));
        } else if (w[i] <= -alpha_neg) {
            g.alpha_neg += upstream[i] * (static_cast<T>(pact_code(w[i], alpha_neg, alpha_pos, k)) / static_cast<T>(k));
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Learned step size: integer code v = clip(round(w/s), -k, k), value v*s.

template <class T>
int lsq_code(T w, T step, int k) {
    const T r = round_half_away(w / step);
    return static_cast<int>(std::clamp(r, static_cast<T>(-k), static_cast<T>(k)));
}

template <class T>
std::vector<T> lsq_quant(std::span<const T> w, T step, int bits) {
    if (!(step > 0)) throw ContractError("lsq_quant: step must be positive");
    const int k = level_k(bits);
    std::vector<T> out(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = static_cast<T>(lsq_code(w[i], step, k)) * step;
    return out;
}

template <class T>
T lsq_grad_scale(std::size_t n, int bits) {
    return T(1) / std::sqrt(static_cast<T>(n) * static_cast<T>(level_k(bits)));
}

// Step-size gradient: (-w/s + round(w/s)) inside the range, +-k when saturated,
// scaled by 1/sqrt(N*k).
template <class T>
T lsq_grad_step(std::span<const T> upstream, std::span<const T> w, T step, int bits) {
    if (upstream.size() != w.size()) throw DimensionError("lsq_grad_step: shape mismatch");
    if (!(step > 0)) throw ContractError("lsq_grad_step: step must be positive");
    const int k = level_k(bits);
    const T kk = static_cast<T>(k);
    T acc = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const T r = w[i] / step;
        T d;
        if (r <= -kk) d = -kk;
        else if (r >= kk) d = kk;
        else d = -r + round_half_away(r);
        acc += upstream[i] * d;
    }
    return acc * lsq_grad_scale<T>(w.size(), bits);
}

template <class T>
T lsq_init_step(std::span<const T> w, int bits) {
    const T m = mean_abs(w);
    if (!(m > 0)) throw DegenerateError("lsq_init_step: all-zero weight group");
    return T(2) * m / std::sqrt(static_cast<T>(level_k(bits)));
}

// ---------------------------------------------------------------------------
// Loss-aware stand-in: alternate nearest-level assignment and the closed-form
// least-squares alpha until alpha settles.

template <class T>
double reconstruction_error(std::span<const T> w, T alpha, int bits) {
    const int k = level_k(bits);
    double acc = 0;
    for (auto v : w) {
        const double q = static_cast<double>(alpha) * (static_cast<double>(symmetric_code(v, alpha, k)) / k);
        acc += (static_cast<double>(v) - q) * (static_cast<double>(v) - q);
    }
    return acc;
}

template <class T>
struct LaqResult {
    T alpha = 0;
    int iterations = 0;
    std::vector<double> objective;  // at the initial alpha, then after every update
};

template <class T>
LaqResult<T> laq_alpha_solver(std::span<const T> w, int bits, int max_iters = 20) {
    const int k = level_k(bits);
    LaqResult<T> res;
    res.alpha = dynamic_alpha(w, T(1));
    res.objective.push_back(reconstruction_error(w, res.alpha, bits));
    for (int it = 0; it < max_iters; ++it) {
        double num = 0, den = 0;
        for (auto v : w) {
            const double l = static_cast<double>(symmetric_code(v, res.alpha, k)) / k;
            num += static_cast<double>(v) * l;
            den += l * l;
        }
        if (den == 0 || num <= 0) break;
        const T next = static_cast<T>(num / den);
        const double obj = reconstruction_error(w, next, bits);
        // Rounding the closed-form optimum to T can overshoot by an ulp; never accept a worse point.
        if (obj > res.objective.back()) break;
        const bool settled = std::abs(static_cast<double>(next) - res.alpha) < 1e-6 * static_cast<double>(res.alpha);
        res.alpha = next;
        res.objective.push_back(obj);
        res.iterations = it + 1;
        if (settled) break;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Activation range calibration.

template <class T>
void observe_range(ActRange<T>& r, T batch_min, T batch_max, T decay) {
    if (!(decay >= 0 && decay < 1)) throw ContractError("activation calibration decay must be in [0, 1)");
    if (!r.initialized) {
        r.lo = batch_min;
        r.hi = batch_max;
        r.initialized = true;
        return;
    }
    r.lo = decay * r.lo + (T(1) - decay) * batch_min;
    r.hi = decay * r.hi + (T(1) - decay) * batch_max;
}

// Symmetric sites track EMA(max|x|) and report [-hi, hi].
template <class T>
void observe_activation(ActQuantizer<T>& q, std::span<const T> x) {
    if (x.empty()) return;
    if (q.symmetric) {
        const T m = max_abs(x);
        observe_range(q.range, -m, m, q.decay);
        q.range.lo = -q.range.hi;
    } else {
        const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
        observe_range(q.range, *mn, *mx, q.decay);
    }
}

template <class T>
std::pair<T, T> calibrated_range(const ActRange<T>& r) {
    if (!r.initialized) throw ContractError("activation range queried before any observation");
    return {r.lo, r.hi};
}

}  // namespace qgpt::quant
