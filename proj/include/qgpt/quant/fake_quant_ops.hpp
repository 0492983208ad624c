#pragma once

// Tape operations that apply the quantizers inside a forward pass. Latent
// weights receive straight-through gradients; the clipping parameters receive
// the scheme's own gradient rule.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "qgpt/core/tape.hpp"
#include "qgpt/quant/quantizers.hpp"
#include "qgpt/quant/spec.hpp"

namespace qgpt::quant {

inline constexpr const char* kDynamicKind = "fake_quant.dynamic";
inline constexpr const char* kPactKind = "fake_quant.pact";
inline constexpr const char* kLsqKind = "fake_quant.lsq";
inline constexpr const char* kLaqKind = "fake_quant.laq";
inline constexpr const char* kFixedKind = "fake_quant.fixed";
inline constexpr const char* kActKind = "fake_quant.activation";

template <class T>
struct WeightQuantCtx {
    std::size_t groups = 1;
    std::size_t group_size = 0;
    int bits = 8;
};

namespace detail {

template <class T>
std::size_t group_count(const WeightQuantizer<T>& q, const Tensor<T>& w) {
    return q.spec.granularity == Granularity::per_row ? w.rows() : 1;
}

template <class T>
void ste_identity(Tape<T>& t, std::size_t self) {
    auto g = t.upstream(self);
    if (T* gw = t.accum(t.node(self).inputs[0])) {
        for (std::size_t i = 0; i < g.size(); ++i) gw[i] += g[i];
    }
}

}  // namespace detail

// Quantization codes and clipping scalars of one quantized tensor: codes are
// level indices shifted to [0, 2k]; scalars hold one clip per group (two for
// PACT, negative side first; the step size for LSQ).
template <class T>
struct CodedTensor {
    std::vector<std::uint32_t> codes;
    std::vector<T> scalars;
    int bits = 8;
};

// Effective clipping of each group for the current latent weights.
template <class T>
std::vector<T> effective_alphas(const WeightQuantizer<T>& q, const Tensor<T>& w) {
    const auto G = detail::group_count(q, w);
    const auto gs = w.numel() / G;
    std::vector<T> out(G);
    std::visit(
        [&](const auto& s) {
            using S = std::decay_t<decltype(s)>;
            for (std::size_t g = 0; g < G; ++g) {
                auto wg = w.data().subspan(g * gs, gs);
                if constexpr (std::is_same_v<S, DynamicState<T>>) out[g] = dynamic_alpha<T>(wg, s.gamma[g]);
                else if constexpr (std::is_same_v<S, PactState<T>>) out[g] = s.alpha_pos[g];
                else if constexpr (std::is_same_v<S, LsqState<T>>) out[g] = s.step[g] * static_cast<T>(level_k(q.spec.bits));
                else out[g] = s.alpha[g];
            }
        },
        q.state);
    return out;
}

template <class T>
CodedTensor<T> encode_weight(const WeightQuantizer<T>& q, const Tensor<T>& w) {
    const auto G = detail::group_count(q, w);
    const auto gs = w.numel() / G;
    const int k = level_k(q.spec.bits);
    CodedTensor<T> out;
    out.bits = q.spec.bits;
    out.codes.resize(w.numel());
    std::visit(
        [&](const auto& s) {
            using S = std::decay_t<decltype(s)>;
            for (std::size_t g = 0; g < G; ++g) {
                auto wg = w.data().subspan(g * gs, gs);
                for (std::size_t i = 0; i < gs; ++i) {
                    int code;
                    if constexpr (std::is_same_v<S, PactState<T>>) {
                        code = pact_code(wg[i], s.alpha_neg[g], s.alpha_pos[g], k);
                    } else if constexpr (std::is_same_v<S, LsqState<T>>) {
                        code = lsq_code(wg[i], s.step[g], k);
                    } else if constexpr (std::is_same_v<S, DynamicState<T>>) {
                        code = symmetric_code(wg[i], dynamic_alpha<T>(wg, s.gamma[g]), k);
                    } else {
                        code = symmetric_code(wg[i], s.alpha[g], k);
                    }
                    out.codes[g * gs + i] = static_cast<std::uint32_t>(code + k);
                }
                if constexpr (std::is_same_v<S, PactState<T>>) {
                    out.scalars.push_back(s.alpha_neg[g]);
                    out.scalars.push_back(s.alpha_pos[g]);
                } else if constexpr (std::is_same_v<S, LsqState<T>>) {
                    out.scalars.push_back(s.step[g]);
                } else if constexpr (std::is_same_v<S, DynamicState<T>>) {
                    out.scalars.push_back(dynamic_alpha<T>(wg, s.gamma[g]));
                } else {
                    out.scalars.push_back(s.alpha[g]);
                }
            }
        },
        q.state);
    return out;
}

// Inverse of encode_weight; reproduces the forward fake-quant values bit for bit.
template <class T>
std::vector<T> decode_weight(Scheme scheme, const CodedTensor<T>& c, std::size_t groups) {
    const int k = level_k(c.bits);
    const auto gs = c.codes.size() / groups;
    const std::size_t per = scheme == Scheme::pact ? 2 : 1;
    if (c.scalars.size() != groups * per) throw IntegrityError("clipping scalar count does not match groups");
    std::vector<T> out(c.codes.size());
    for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t i = 0; i < gs; ++i) {
            const auto raw = c.codes[g * gs + i];
            if (raw > static_cast<std::uint32_t>(2 * k)) throw IntegrityError("quantization code out of range");
            const int code = static_cast<int>(raw) - k;
            T v;
            if (scheme == Scheme::pact) v = pact_value(code, c.scalars[2 * g], c.scalars[2 * g + 1], k);
            else if (scheme == Scheme::lsq) v = static_cast<T>(code) * c.scalars[g];
            else v = c.scalars[g] * (static_cast<T>(code) / static_cast<T>(k));
            out[g * gs + i] = v;
        }
    }
    return out;
}

// Fake-quantizes a weight on the tape. LAQ refits its alpha here, so the
// quantizer is mutable.
template <class T>
Var<T> quantize_weight(Var<T> w, WeightQuantizer<T>& q) {
    if (q.frozen) return w;
    Tape<T>& tape = *w.tape;
    const auto& wv = w.value();
    const auto G = detail::group_count(q, wv);
    const auto gs = wv.numel() / G;
    const int bits = q.spec.bits;
    auto ctx = std::make_shared<WeightQuantCtx<T>>(WeightQuantCtx<T>{G, gs, bits});
    auto out = Tensor<T>::zeros(wv.shape());
    auto o = out.data();

    return std::visit(
        [&](auto& s) -> Var<T> {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, DynamicState<T>>) {
                for (std::size_t g = 0; g < G; ++g) {
                    auto wg = wv.data().subspan(g * gs, gs);
                    fake_quant_symmetric<T>(wg, dynamic_alpha<T>(wg, s.gamma[g]), bits, o.subspan(g * gs, gs));
                }
                auto gamma = tape.param(s.gamma);
                return tape.push(
                    kDynamicKind, std::move(out), {w.id, gamma.id},
                    [](Tape<T>& t, std::size_t self) {
                        const auto& node = t.node(self);
                        const auto& c = t.template ctx<WeightQuantCtx<T>>(self);
                        detail::ste_identity(t, self);
                        if (T* gg = t.accum(node.inputs[1])) {
                            auto up = t.upstream(self);
                            auto wd = t.value(node.inputs[0]).data();
                            auto gam = t.value(node.inputs[1]).data();
                            for (std::size_t g = 0; g < c.groups; ++g) {
                                gg[g] += grad_gamma<T>(up.subspan(g * c.group_size, c.group_size),
                                                       wd.subspan(g * c.group_size, c.group_size), gam[g], c.bits);
                            }
                        }
                    },
                    ctx);
            } else if constexpr (std::is_same_v<S, PactState<T>>) {
                for (std::size_t g = 0; g < G; ++g) {
                    auto r = pact_quant<T>(wv.data().subspan(g * gs, gs), s.alpha_neg[g], s.alpha_pos[g], bits);
                    std::copy(r.begin(), r.end(), o.begin() + static_cast<std::ptrdiff_t>(g * gs));
                }
                auto an = tape.param(s.alpha_neg);
                auto ap = tape.param(s.alpha_pos);
                return tape.push(
                    kPactKind, std::move(out), {w.id, an.id, ap.id},
                    [](Tape<T>& t, std::size_t self) {
                        const auto& node = t.node(self);
                        const auto& c = t.template ctx<WeightQuantCtx<T>>(self);
                        auto up = t.upstream(self);
                        auto wd = t.value(node.inputs[0]).data();
                        auto an = t.value(node.inputs[1]).data();
                        auto ap = t.value(node.inputs[2]).data();
                        T* gw = t.accum(node.inputs[0]);
                        T* gn = t.accum(node.inputs[1]);
                        T* gp = t.accum(node.inputs[2]);
                        for (std::size_t g = 0; g < c.groups; ++g) {
                            const auto off = g * c.group_size;
                            if (gw) {
                                for (std::size_t i = 0; i < c.group_size; ++i) {
                                    const T v = wd[off + i];
                                    if (v > -an[g] && v < ap[g]) gw[off + i] += up[off + i];
                                }
                            }
                            auto pg = pact_grad_alphas<T>(up.subspan(off, c.group_size), wd.subspan(off, c.group_size),
                                                          an[g], ap[g], c.bits);
                            if (gn) gn[g] += pg.alpha_neg;
                            if (gp) gp[g] += pg.alpha_pos;
                        }
                    },
                    ctx);
            } else if constexpr (std::is_same_v<S, LsqState<T>>) {
                for (std::size_t g = 0; g < G; ++g) {
                    auto r = lsq_quant<T>(wv.data().subspan(g * gs, gs), s.step[g], bits);
                    std::copy(r.begin(), r.end(), o.begin() + static_cast<std::ptrdiff_t>(g * gs));
                }
                auto step = tape.param(s.step);
                return tape.push(
                    kLsqKind, std::move(out), {w.id, step.id},
                    [](Tape<T>& t, std::size_t self) {
                        const auto& node = t.node(self);
                        const auto& c = t.template ctx<WeightQuantCtx<T>>(self);
                        auto up = t.upstream(self);
                        auto wd = t.value(node.inputs[0]).data();
                        auto st = t.value(node.inputs[1]).data();
                        const T kk = static_cast<T>(level_k(c.bits));
                        T* gw = t.accum(node.inputs[0]);
                        T* gs = t.accum(node.inputs[1]);
                        for (std::size_t g = 0; g < c.groups; ++g) {
                            const auto off = g * c.group_size;
                            if (gw) {
                                for (std::size_t i = 0; i < c.group_size; ++i) {
                                    const T r = wd[off + i] / st[g];
                                    if (r > -kk && r < kk) gw[off + i] += up[off + i];
                                }
                            }
                            if (gs) gs[g] += lsq_grad_step<T>(up.subspan(off, c.group_size), wd.subspan(off, c.group_size), st[g], c.bits);
                        }
                    },
                    ctx);
            } else {
                if constexpr (std::is_same_v<S, LaqState<T>>) {
                    s.alpha.resize(G);
                    for (std::size_t g = 0; g < G; ++g) {
                        s.alpha[g] = laq_alpha_solver<T>(wv.data().subspan(g * gs, gs), bits, s.max_iters).alpha;
                    }
                }
                for (std::size_t g = 0; g < G; ++g) {
                    fake_quant_symmetric<T>(wv.data().subspan(g * gs, gs), s.alpha[g], bits, o.subspan(g * gs, gs));
                }
                const char* kind = std::is_same_v<S, LaqState<T>> ? kLaqKind : kFixedKind;
                return tape.push(kind, std::move(out), {w.id}, [](Tape<T>& t, std::size_t self) { detail::ste_identity(t, self); }, ctx);
            }
        },
        q.state);
}

// Replaces the analytic dynamic-scaling rule on a tape with the estimate that
// ignores weights inside the clipping range.
template <class T>
void use_outside_only_gamma_rule(Tape<T>& tape) {
    tape.register_rule(kDynamicKind, [](Tape<T>& t, std::size_t self) {
        const auto& node = t.node(self);
        const auto& c = t.template ctx<WeightQuantCtx<T>>(self);
        detail::ste_identity(t, self);
        if (T* gg = t.accum(node.inputs[1])) {
            auto up = t.upstream(self);
            auto wd = t.value(node.inputs[0]).data();
            auto gam = t.value(node.inputs[1]).data();
            for (std::size_t g = 0; g < c.groups; ++g) {
                gg[g] += grad_gamma_outside_only<T>(up.subspan(g * c.group_size, c.group_size),
                                                    wd.subspan(g * c.group_size, c.group_size), gam[g], c.bits);
            }
        }
    });
}

// Calibrates (when asked) and fake-quantizes an activation. Gradients pass
// straight through inside the range and are zero outside it.
template <class T>
Var<T> quantize_activation(Var<T> x, ActQuantizer<T>& q, bool calibrate) {
    if (calibrate) observe_activation<T>(q, x.value().data());
    const auto [lo, hi] = calibrated_range(q.range);
    if (!(hi > lo)) return x;
    const auto& xv = x.value();
    std::vector<T> out;
    if (q.symmetric) {
        out = fake_quant_symmetric<T>(xv.data(), hi, q.bits);
    } else {
        out = fake_quant_asymmetric<T>(xv.data(), lo, hi, q.bits);
    }
    return x.tape->push(kActKind, Tensor<T>(xv.shape(), std::move(out)), {x.id}, [lo = lo, hi = hi](Tape<T>& t, std::size_t self) {
        const auto in = t.node(self).inputs[0];
        auto g = t.upstream(self);
        if (T* gx = t.accum(in)) {
            auto xd = t.value(in).data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (xd[i] >= lo && xd[i] <= hi) gx[i] += g[i];
            }
        }
    });
}

}  // namespace qgpt::quant
