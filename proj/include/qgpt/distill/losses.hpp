#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <vector>

#include "qgpt/core/error.hpp"
#include "qgpt/core/ops.hpp"
#include "qgpt/core/tape.hpp"
#include "qgpt/distill/memory_bank.hpp"

namespace qgpt::distill {

// Candidate rows scored against one anchor; the first entry is the positive.
using CandidateSets = std::vector<std::vector<std::size_t>>;

namespace detail {

template <class T>
struct ContrastCtx {
    std::vector<T> a_norm;               // |a_i|
    std::vector<T> c_norm;               // |c_j|
    std::vector<std::vector<T>> sims;    // cosine per candidate of each anchor
    std::vector<std::vector<T>> probs;   // softmax over each set
};

template <class T>
using VecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
    return VecMap<T>(a.data(), static_cast<Eigen::Index>(a.size())).dot(VecMap<T>(b.data(), static_cast<Eigen::Index>(b.size())));
}

template <class T>
T row_norm(std::span<const T> r) {
    return std::sqrt(dot(r, r));
}

}  // namespace detail

// Mean over anchors of -log( exp(s(a_i, c_pos)/tau) / sum_{j in set_i} exp(s(a_i, c_j)/tau) )
// with cosine similarity s. Anchors whose set holds only the positive contribute 0.
template <class T>
Var<T> contrastive(Var<T> anchors, Var<T> candidates, const CandidateSets& sets, T tau) {
    if (!(tau > 0)) throw ContractError("contrastive: temperature must be positive");
    const auto n = anchors.rows(), d = anchors.cols(), m = candidates.rows();
    if (candidates.cols() != d) {
        throw DimensionError("contrastive: anchors " + shape_str(anchors.shape()) + " vs candidates " +
                             shape_str(candidates.shape()));
    }
    if (sets.size() != n) throw DimensionError("contrastive: one candidate set per anchor required");
    const auto& A = anchors.value();
    const auto& C = candidates.value();
    auto ctx = std::make_shared<detail::ContrastCtx<T>>();
    ctx->a_norm.resize(n);
    ctx->c_norm.assign(m, T(-1));
    ctx->sims.resize(n);
    ctx->probs.resize(n);
    T loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (sets[i].empty()) throw ContractError("contrastive: candidate set must contain the positive");
        ctx->a_norm[i] = detail::row_norm(A.row(i));
        if (!(ctx->a_norm[i] > 0)) throw DegenerateError("contrastive: zero-norm anchor representation at row " + std::to_string(i));
        auto& s = ctx->sims[i];
        s.resize(sets[i].size());
        for (std::size_t k = 0; k < sets[i].size(); ++k) {
            const auto j = sets[i][k];
            if (j >= m) throw IndexError("contrastive: candidate " + std::to_string(j) + " out of range");
            if (ctx->c_norm[j] < 0) {
                ctx->c_norm[j] = detail::row_norm(C.row(j));
                if (!(ctx->c_norm[j] > 0)) throw DegenerateError("contrastive: zero-norm candidate representation at row " + std::to_string(j));
            }
            s[k] = detail::dot<T>(A.row(i), C.row(j)) / (ctx->a_norm[i] * ctx->c_norm[j]);
        }
        if (sets[i].size() == 1) {
            ctx->probs[i] = {T(1)};
            continue;
        }
        T mx = s[0] / tau;
        for (auto v : s) mx = std::max(mx, v / tau);
        T z = 0;
        auto& p = ctx->probs[i];
        p.resize(s.size());
        for (std::size_t k = 0; k < s.size(); ++k) {
            p[k] = std::exp(s[k] / tau - mx);
            z += p[k];
        }
        for (auto& v : p) v /= z;
        loss += mx + std::log(z) - s[0] / tau;
    }
    loss /= static_cast<T>(n);

    return anchors.tape->push(
        "contrastive", Tensor<T>::scalar(loss), {anchors.id, candidates.id},
        [n, d, tau, sets](Tape<T>& t, std::size_t self) {
            const auto& c = t.template ctx<detail::ContrastCtx<T>>(self);
            const auto& node = t.node(self);
            const auto& A = t.value(node.inputs[0]);
            const auto& C = t.value(node.inputs[1]);
            T* ga = t.accum(node.inputs[0]);
            T* gc = t.accum(node.inputs[1]);
            const T g = t.upstream(self)[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) {
                if (sets[i].size() < 2) continue;
                auto ar = A.row(i);
                for (std::size_t k = 0; k < sets[i].size(); ++k) {
                    const auto j = sets[i][k];
                    // d loss_i / d s_k = (p_k - [k == 0]) / tau
                    const T w = g * (c.probs[i][k] - (k == 0 ? T(1) : T(0))) / tau;
                    if (w == T(0)) continue;
                    auto cr = C.row(j);
                    const T s = c.sims[i][k];
                    const T na = c.a_norm[i], nc = c.c_norm[j];
                    // ds/da = c/(|a||c|) - s a/|a|^2, and symmetrically for c.
                    const T cross = w / (na * nc);
                    if (ga) {
                        const T self_a = w * s / (na * na);
                        for (std::size_t q = 0; q < d; ++q) ga[i * d + q] += cross * cr[q] - self_a * ar[q];
                    }
                    if (gc) {
                        const T self_c = w * s / (nc * nc);
                        for (std::size_t q = 0; q < d; ++q) gc[j * d + q] += cross * ar[q] - self_c * cr[q];
                    }
                }
            }
        },
        ctx);
}

namespace detail {

struct AnchorCtx {
    std::vector<std::vector<std::size_t>> groups;  // positions sharing one id
    std::vector<double> weight;                    // d anchor / d member row, per group
};

}  // namespace detail

// Bank-smoothed anchors: for position i with token id t, the batch mean of the
// observations of t, blended as m * bank[t] + (1 - m) * mean when bank[t] is
// initialized and taken directly otherwise. The bank is a constant.
template <class T>
Var<T> bank_anchors(Var<T> h, std::span<const std::int32_t> ids, const MemoryBank<T>& bank) {
    const auto n = h.rows(), d = h.cols();
    if (ids.size() != n || d != bank.dim()) throw DimensionError("bank_anchors: shape mismatch");
    std::map<std::int32_t, std::vector<std::size_t>> where;
    for (std::size_t i = 0; i < n; ++i) where[ids[i]].push_back(i);
    auto ctx = std::make_shared<detail::AnchorCtx>();
    auto out = Tensor<T>::zeros(Shape{n, d});
    const T m = bank.momentum();
    std::vector<T> avg(d);
    for (const auto& [id, pos] : where) {
        std::fill(avg.begin(), avg.end(), T(0));
        for (auto p : pos)
            for (std::size_t c = 0; c < d; ++c) avg[c] += h.value().at(p, c);
        if (pos.size() > 1) {
            const T inv = T(1) / static_cast<T>(pos.size());
            for (auto& v : avg) v *= inv;
        }
        const bool init = bank.initialized(static_cast<std::size_t>(id));
        for (auto p : pos) {
            auto dst = out.row(p);
            if (init) {
                auto old = bank.row(static_cast<std::size_t>(id));
                for (std::size_t c = 0; c < d; ++c) dst[c] = m * old[c] + (T(1) - m) * avg[c];
            } else {
                std::copy(avg.begin(), avg.end(), dst.begin());
            }
        }
        ctx->groups.push_back(pos);
        ctx->weight.push_back((init ? 1.0 - static_cast<double>(m) : 1.0) / static_cast<double>(pos.size()));
    }
    return h.tape->push(
        "bank_anchors", std::move(out), {h.id},
        [d](Tape<T>& t, std::size_t self) {
            const auto& c = t.template ctx<detail::AnchorCtx>(self);
            auto g = t.upstream(self);
            if (T* gh = t.accum(t.node(self).inputs[0])) {
                // Every member of a group receives weight * (sum of the group's upstream rows).
                std::vector<T> sum(d);
                for (std::size_t k = 0; k < c.groups.size(); ++k) {
                    std::fill(sum.begin(), sum.end(), T(0));
                    for (auto i : c.groups[k])
                        for (std::size_t q = 0; q < d; ++q) sum[q] += g[i * d + q];
                    const T w = static_cast<T>(c.weight[k]);
                    for (auto p : c.groups[k])
                        for (std::size_t q = 0; q < d; ++q) gh[p * d + q] += w * sum[q];
                }
            }
        },
        ctx);
}

// Soft cross-entropy between teacher and student distributions at temperature 1.
template <class T>
Var<T> logit_distill(Var<T> student_logits, Var<T> teacher_logits) {
    return ops::soft_cross_entropy(student_logits, teacher_logits);
}

template <class T>
Var<T> contrastive_total(Var<T> l_s2t, Var<T> l_t2s) {
    const std::vector<Var<T>> xs{l_s2t, l_t2s};
    const std::vector<T> w{T(0.5), T(0.5)};
    return ops::weighted_sum<T>(xs, w);
}

template <class T>
Var<T> total_loss(Var<T> l_cont, Var<T> l_dist, T lambda) {
    if (!(lambda >= 0)) throw ContractError("total_loss: lambda must be non-negative");
    const std::vector<Var<T>> xs{l_cont, l_dist};
    const std::vector<T> w{lambda, T(1)};
    return ops::weighted_sum<T>(xs, w);
}

}  // namespace qgpt::distill
