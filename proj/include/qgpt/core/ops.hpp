#pragma once

// Differentiable primitives used by the transformer and the training losses.
// Each op computes its forward value eagerly and records an analytic backward
// closure on the tape.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "qgpt/core/error.hpp"
#include "qgpt/core/tape.hpp"
#include "qgpt/core/tensor.hpp"

namespace qgpt::ops {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MMap = Eigen::Map<RowMat<T>>;
template <class T>
using CStrided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using MStrided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

namespace detail {

inline Shape with_last(Shape s, std::size_t last) {
    s.back() = last;
    return s;
}

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

template <class T>
T normal_cdf(T x) {
    return T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T normal_pdf(T x) {
    return std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
}

}  // namespace detail

// a[...xk] * b[kxn] -> [...xn]
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (bv.ndim() != 2 || av.cols() != bv.shape()[0]) {
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(av.shape()) + " x " +
                             shape_str(bv.shape()));
    }
    const auto m = av.rows(), k = av.cols(), n = bv.cols();
    auto out = Tensor<T>::zeros(detail::with_last(av.shape(), n));
    MMap<T>(out.data().data(), m, n).noalias() = CMap<T>(av.data().data(), m, k) * CMap<T>(bv.data().data(), k, n);
    return a.tape->push("matmul", std::move(out), {a.id, b.id}, [m, k, n](Tape<T>& t, std::size_t self) {
        const auto& node = t.node(self);
        const auto ia = node.inputs[0], ib = node.inputs[1];
        CMap<T> g(t.upstream(self).data(), m, n);
        if (T* ga = t.accum(ia)) {
            MMap<T>(ga, m, k).noalias() += g * CMap<T>(t.value(ib).data().data(), k, n).transpose();
        }
        if (T* gb = t.accum(ib)) {
            MMap<T>(gb, k, n).noalias() += CMap<T>(t.value(ia).data().data(), m, k).transpose() * g;
        }
    });
}

// a[...xk] * b[nxk]^T -> [...xn]; used by the tied output head.
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (bv.ndim() != 2 || av.cols() != bv.cols()) {
        throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_str(av.shape()) + " x " +
                             shape_str(bv.shape()) + "^T");
    }
    const auto m = av.rows(), k = av.cols(), n = bv.rows();
    auto out = Tensor<T>::zeros(detail::with_last(av.shape(), n));
    MMap<T>(out.data().data(), m, n).noalias() =
        CMap<T>(av.data().data(), m, k) * CMap<T>(bv.data().data(), n, k).transpose();
    return a.tape->push("matmul_nt", std::move(out), {a.id, b.id}, [m, k, n](Tape<T>& t, std::size_t self) {
        const auto& node = t.node(self);
        const auto ia = node.inputs[0], ib = node.inputs[1];
        CMap<T> g(t.upstream(self).data(), m, n);
        if (T* ga = t.accum(ia)) {
            MMap<T>(ga, m, k).noalias() += g * CMap<T>(t.value(ib).data().data(), n, k);
        }
        if (T* gb = t.accum(ib)) {
            MMap<T>(gb, n, k).noalias() += g.transpose() * CMap<T>(t.value(ia).data().data(), m, k);
        }
    });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require_same_shape("add", a.value(), b.value());
    auto out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
    return a.tape->push("add", std::move(out), {a.id, b.id}, [](Tape<T>& t, std::size_t self) {
        const auto& node = t.node(self);
        auto g = t.upstream(self);
        for (auto in : node.inputs) {
            if (T* gi = t.accum(in)) {
                for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
            }
        }
    });
}

// x[...xd] + bias[d], broadcast over rows.
template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
    const auto d = x.cols();
    if (bias.numel() != d) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
    }
    auto out = x.value();
    auto o = out.data();
    auto b = bias.value().data();
    const auto rows = x.rows();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < d; ++c) o[r * d + c] += b[c];
    }
    return x.tape->push("add_bias", std::move(out), {x.id, bias.id}, [rows, d](Tape<T>& t, std::size_t self) {
        const auto& node = t.node(self);
        auto g = t.upstream(self);
        if (T* gx = t.accum(node.inputs[0])) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (T* gb = t.accum(node.inputs[1])) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
            }
        }
    });
}

template <class T>
Var<T> scale(Var<T> x, T factor) {
    auto out = x.value();
    for (auto& v : out.data()) v *= factor;
    return x.tape->push("scale", std::move(out), {x.id}, [factor](Tape<T>& t, std::size_t self) {
        auto g = t.upstream(self);
        if (T* gx = t.accum(t.node(self).inputs[0])) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
        }
    });
}

// Weighted sum of scalars: sum_i w_i * x_i.
template <class T>
Var<T> weighted_sum(std::span<const Var<T>> xs, std::span<const T> weights) {
    if (xs.empty() || xs.size() != weights.size()) throw ContractError("weighted_sum: bad arity");
    T acc = 0;
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].numel() != 1) throw DimensionError("weighted_sum: operands must be scalars");
        acc += weights[i] * xs[i].value()[0];
        ids.push_back(xs[i].id);
    }
    std::vector<T> w(weights.begin(), weights.end());
    return xs[0].tape->push("weighted_sum", Tensor<T>::scalar(acc), std::move(ids), [w](Tape<T>& t, std::size_t self) {
        const T g = t.upstream(self)[0];
        const auto& node = t.node(self);
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
            if (T* gi = t.accum(node.inputs[i])) gi[0] += w[i] * g;
        }
    });
}

template <class T>
Var<T> sum(Var<T> x) {
    T acc = 0;
    for (auto v : x.value().data()) acc += v;
    return x.tape->push("sum", Tensor<T>::scalar(acc), {x.id}, [](Tape<T>& t, std::size_t self) {
        const T g = t.upstream(self)[0];
        const auto in = t.node(self).inputs[0];
        if (T* gx = t.accum(in)) {
            const auto n = t.value(in).numel();
            for (std::size_t i = 0; i < n; ++i) gx[i] += g;
        }
    });
}

template <class T>
Var<T> mean(Var<T> x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Exact Gaussian error linear unit x * Phi(x).
template <class T>
Var<T> gelu(Var<T> x) {
    auto out = x.value();
    for (auto& v : out.data()) v = v * detail::normal_cdf(v);
    return x.tape->push("gelu", std::move(out), {x.id}, [](Tape<T>& t, std::size_t self) {
        const auto in = t.node(self).inputs[0];
        auto g = t.upstream(self);
        if (T* gx = t.accum(in)) {
            auto xv = t.value(in).data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T v = xv[i];
                gx[i] += g[i] * (detail::normal_cdf(v) + v * detail::normal_pdf(v));
            }
        }
    });
}

namespace detail {
template <class T>
struct LayerNormCtx {
    std::vector<T> xhat;
    std::vector<T> inv_std;
};
}  // namespace detail

// Standardizes each row over the last axis, then applies gain and bias.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
    const auto d = x.cols();
    if (d == 0) throw DimensionError("layer_norm: empty last axis");
    if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
    if (gain.numel() != d || bias.numel() != d) {
        throw DimensionError("layer_norm: gain/bias must have length " + std::to_string(d));
    }
    const auto rows = x.rows();
    auto ctx = std::make_shared<detail::LayerNormCtx<T>>();
    ctx->xhat.resize(rows * d);
    ctx->inv_std.resize(rows);
    auto out = Tensor<T>::zeros(x.shape());
    auto xv = x.value().data();
    auto gv = gain.value().data();
    auto bv = bias.value().data();
    auto o = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * d;
        T mu = 0;
        for (std::size_t c = 0; c < d; ++c) mu += xr[c];
        mu /= static_cast<T>(d);
        T var = 0;
        for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + eps);
        ctx->inv_std[r] = inv;
        for (std::size_t c = 0; c < d; ++c) {
            const T h = (xr[c] - mu) * inv;
            ctx->xhat[r * d + c] = h;
            o[r * d + c] = h * gv[c] + bv[c];
        }
    }
    return x.tape->push(
        "layer_norm", std::move(out), {x.id, gain.id, bias.id},
        [rows, d](Tape<T>& t, std::size_t self) {
            const auto& node = t.node(self);
            const auto& c = t.template ctx<detail::LayerNormCtx<T>>(self);
            auto g = t.upstream(self);
            auto gv = t.value(node.inputs[1]).data();
            if (T* gx = t.accum(node.inputs[0])) {
                std::vector<T> gh(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    T mean_gh = 0, mean_ghx = 0;
                    for (std::size_t k = 0; k < d; ++k) {
                        gh[k] = g[r * d + k] * gv[k];
                        mean_gh += gh[k];
                        mean_ghx += gh[k] * c.xhat[r * d + k];
                    }
                    mean_gh /= static_cast<T>(d);
                    mean_ghx /= static_cast<T>(d);
                    for (std::size_t k = 0; k < d; ++k) {
                        gx[r * d + k] += c.inv_std[r] * (gh[k] - mean_gh - c.xhat[r * d + k] * mean_ghx);
                    }
                }
            }
            if (T* gg = t.accum(node.inputs[1])) {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t k = 0; k < d; ++k) gg[k] += g[r * d + k] * c.xhat[r * d + k];
            }
            if (T* gb = t.accum(node.inputs[2])) {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t k = 0; k < d; ++k) gb[k] += g[r * d + k];
            }
        },
        ctx);
}

// Numerically stable softmax of one row, written into out.
template <class T>
void softmax_row(std::span<const T> in, std::span<T> out) {
    const T mx = *std::max_element(in.begin(), in.end());
    T z = 0;
    for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = std::exp(in[i] - mx);
        z += out[i];
    }
    for (auto& v : out) v /= z;
}

template <class T>
Var<T> softmax_rows(Var<T> x) {
    const auto n = x.cols(), rows = x.rows();
    auto out = Tensor<T>::zeros(x.shape());
    for (std::size_t r = 0; r < rows; ++r) softmax_row<T>(x.value().row(r), out.row(r));
    return x.tape->push("softmax_rows", std::move(out), {x.id}, [rows, n](Tape<T>& t, std::size_t self) {
        const auto in = t.node(self).inputs[0];
        auto g = t.upstream(self);
        auto y = t.value(self).data();
        if (T* gx = t.accum(in)) {
            for (std::size_t r = 0; r < rows; ++r) {
                T dot = 0;
                for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
                for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
            }
        }
    });
}

// Mean over rows of -log softmax(logits)[target].
template <class T>
Var<T> cross_entropy_logits(Var<T> logits, std::span<const std::int32_t> targets) {
    const auto n = logits.rows(), V = logits.cols();
    if (targets.size() != n) {
        throw DimensionError("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(n) + " rows");
    }
    auto probs = std::make_shared<std::vector<T>>(n * V);
    std::vector<std::int32_t> tg(targets.begin(), targets.end());
    T loss = 0;
    for (std::size_t r = 0; r < n; ++r) {
        if (tg[r] < 0 || static_cast<std::size_t>(tg[r]) >= V) {
            throw IndexError("cross_entropy_logits: target " + std::to_string(tg[r]) + " outside [0, " +
                             std::to_string(V) + ")");
        }
        auto row = logits.value().row(r);
        const T mx = *std::max_element(row.begin(), row.end());
        T z = 0;
        for (std::size_t c = 0; c < V; ++c) z += std::exp(row[c] - mx);
        const T lse = mx + std::log(z);
        loss += lse - row[tg[r]];
        for (std::size_t c = 0; c < V; ++c) (*probs)[r * V + c] = std::exp(row[c] - lse);
    }
    loss /= static_cast<T>(n);
    return logits.tape->push(
        "cross_entropy_logits", Tensor<T>::scalar(loss), {logits.id},
        [n, V, tg = std::move(tg)](Tape<T>& t, std::size_t self) {
            const auto& p = t.template ctx<std::vector<T>>(self);
            const T g = t.upstream(self)[0] / static_cast<T>(n);
            if (T* gx = t.accum(t.node(self).inputs[0])) {
                for (std::size_t r = 0; r < n; ++r) {
                    for (std::size_t c = 0; c < V; ++c) gx[r * V + c] += g * p[r * V + c];
                    gx[r * V + tg[r]] -= g;
                }
            }
        },
        probs);
}

namespace detail {
template <class T>
struct SoftCeCtx {
    std::vector<T> p_teacher;
    std::vector<T> p_student;
    std::vector<T> log_student;
};
}  // namespace detail

// Mean over rows of -sum_v softmax(teacher)_v * log softmax(student)_v.
template <class T>
Var<T> soft_cross_entropy(Var<T> student_logits, Var<T> teacher_logits) {
    detail::require_same_shape("soft_cross_entropy", student_logits.value(), teacher_logits.value());
    const auto n = student_logits.rows(), V = student_logits.cols();
    auto ctx = std::make_shared<detail::SoftCeCtx<T>>();
    ctx->p_teacher.resize(n * V);
    ctx->p_student.resize(n * V);
    ctx->log_student.resize(n * V);
    T loss = 0;
    for (std::size_t r = 0; r < n; ++r) {
        softmax_row<T>(teacher_logits.value().row(r), std::span<T>(ctx->p_teacher).subspan(r * V, V));
        auto s = student_logits.value().row(r);
        const T mx = *std::max_element(s.begin(), s.end());
        T z = 0;
        for (std::size_t c = 0; c < V; ++c) z += std::exp(s[c] - mx);
        const T lse = mx + std::log(z);
        for (std::size_t c = 0; c < V; ++c) {
            const T ls = s[c] - lse;
            ctx->log_student[r * V + c] = ls;
            ctx->p_student[r * V + c] = std::exp(ls);
            loss -= ctx->p_teacher[r * V + c] * ls;
        }
    }
    loss /= static_cast<T>(n);
    return student_logits.tape->push(
        "soft_cross_entropy", Tensor<T>::scalar(loss), {student_logits.id, teacher_logits.id},
        [n, V](Tape<T>& t, std::size_t self) {
            const auto& c = t.template ctx<detail::SoftCeCtx<T>>(self);
            const auto& node = t.node(self);
            const T g = t.upstream(self)[0] / static_cast<T>(n);
            if (T* gs = t.accum(node.inputs[0])) {
                for (std::size_t i = 0; i < n * V; ++i) gs[i] += g * (c.p_student[i] - c.p_teacher[i]);
            }
            if (T* gt = t.accum(node.inputs[1])) {
                for (std::size_t r = 0; r < n; ++r) {
                    T avg = 0;
                    for (std::size_t k = 0; k < V; ++k) avg += c.p_teacher[r * V + k] * c.log_student[r * V + k];
                    for (std::size_t k = 0; k < V; ++k) {
                        const auto i = r * V + k;
                        gt[i] -= g * c.p_teacher[i] * (c.log_student[i] - avg);
                    }
                }
            }
        },
        ctx);
}

// Row gather: out[i] = table[ids[i]].
template <class T>
Var<T> embedding(Var<T> table, std::span<const std::int32_t> ids) {
    const auto V = table.rows(), d = table.cols();
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    auto out = Tensor<T>::zeros(Shape{idv.size(), d});
    for (std::size_t i = 0; i < idv.size(); ++i) {
        if (idv[i] < 0 || static_cast<std::size_t>(idv[i]) >= V) {
            throw IndexError("embedding: id " + std::to_string(idv[i]) + " outside [0, " + std::to_string(V) + ")");
        }
        auto src = table.value().row(static_cast<std::size_t>(idv[i]));
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return table.tape->push("embedding", std::move(out), {table.id}, [d, idv = std::move(idv)](Tape<T>& t, std::size_t self) {
        auto g = t.upstream(self);
        if (T* gt = t.accum(t.node(self).inputs[0])) {
            for (std::size_t i = 0; i < idv.size(); ++i) {
                T* dst = gt + static_cast<std::size_t>(idv[i]) * d;
                for (std::size_t c = 0; c < d; ++c) dst[c] += g[i * d + c];
            }
        }
    });
}

// x[(B*n) x d] + pos[r mod n] for every row r.
template <class T>
Var<T> add_positions(Var<T> x, Var<T> pos, std::size_t seq_len) {
    const auto d = x.cols(), rows = x.rows();
    if (pos.cols() != d || pos.rows() < seq_len || seq_len == 0 || rows % seq_len != 0) {
        throw DimensionError("add_positions: " + shape_str(x.shape()) + " with table " + shape_str(pos.shape()) +
                             " and sequence length " + std::to_string(seq_len));
    }
    auto out = x.value();
    auto o = out.data();
    auto p = pos.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const auto i = r % seq_len;
        for (std::size_t c = 0; c < d; ++c) o[r * d + c] += p[i * d + c];
    }
    return x.tape->push("add_positions", std::move(out), {x.id, pos.id}, [rows, d, seq_len](Tape<T>& t, std::size_t self) {
        const auto& node = t.node(self);
        auto g = t.upstream(self);
        if (T* gx = t.accum(node.inputs[0])) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (T* gp = t.accum(node.inputs[1])) {
            for (std::size_t r = 0; r < rows; ++r) {
                const auto i = r % seq_len;
                for (std::size_t c = 0; c < d; ++c) gp[i * d + c] += g[r * d + c];
            }
        }
    });
}

// Layout of multi-head attention over a flattened [(batch*seq) x d_model] activation.
struct HeadLayout {
    std::size_t batch = 1;
    std::size_t seq = 1;
    std::size_t heads = 1;
    std::size_t d_model = 1;
    std::size_t head_dim() const { return d_model / heads; }
};

// Per-head scaled scores q k^T / sqrt(d_head) with shape [batch, heads, seq, seq].
// Entries above the diagonal are fixed at zero and carry no gradient.
template <class T>
Var<T> attention_scores(Var<T> q, Var<T> k, HeadLayout L) {
    const auto B = L.batch, n = L.seq, H = L.heads, d = L.d_model, dh = L.head_dim();
    if (q.shape() != k.shape() || q.rows() != B * n || q.cols() != d || d % H != 0) {
        throw DimensionError("attention_scores: bad layout for " + shape_str(q.shape()));
    }
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));
    auto out = Tensor<T>::zeros(Shape{B, H, n, n});
    const T* qd = q.value().data().data();
    const T* kd = k.value().data().data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            CStrided<T> Q(qd + b * n * d + h * dh, n, dh, Eigen::OuterStride<>(d));
            CStrided<T> K(kd + b * n * d + h * dh, n, dh, Eigen::OuterStride<>(d));
            MMap<T> S(out.data().data() + (b * H + h) * n * n, n, n);
            S.noalias() = sc * (Q * K.transpose());
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = i + 1; j < n; ++j) S(i, j) = T(0);
        }
    }
    return q.tape->push("attention_scores", std::move(out), {q.id, k.id}, [B, n, H, d, dh, sc](Tape<T>& t, std::size_t self) {
        const auto& node = t.node(self);
        const auto iq = node.inputs[0], ik = node.inputs[1];
        T* gq = t.accum(iq);
        T* gk = t.accum(ik);
        const T* qd = t.value(iq).data().data();
        const T* kd = t.value(ik).data().data();
        RowMat<T> G(n, n);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t h = 0; h < H; ++h) {
                G = CMap<T>(t.upstream(self).data() + (b * H + h) * n * n, n, n);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = i + 1; j < n; ++j) G(i, j) = T(0);
                G *= sc;
                const auto off = b * n * d + h * dh;
                if (gq) {
                    MStrided<T>(gq + off, n, dh, Eigen::OuterStride<>(d)).noalias() +=
                        G * CStrided<T>(kd + off, n, dh, Eigen::OuterStride<>(d));
                }
                if (gk) {
                    MStrided<T>(gk + off, n, dh, Eigen::OuterStride<>(d)).noalias() +=
                        G.transpose() * CStrided<T>(qd + off, n, dh, Eigen::OuterStride<>(d));
                }
            }
        }
    });
}

// Row softmax over the causal prefix j <= i of each [seq x seq] block; entries
// above the diagonal are zero.
template <class T>
Var<T> causal_softmax(Var<T> scores) {
    const auto n = scores.cols();
    const auto blocks = scores.rows() / n;
    if (scores.rows() % n != 0) throw DimensionError("causal_softmax: expects square trailing blocks");
    auto out = Tensor<T>::zeros(scores.shape());
    for (std::size_t blk = 0; blk < blocks; ++blk) {
        for (std::size_t i = 0; i < n; ++i) {
            const auto r = blk * n + i;
            softmax_row<T>(scores.value().row(r).subspan(0, i + 1), out.row(r).subspan(0, i + 1));
        }
    }
    return scores.tape->push("causal_softmax", std::move(out), {scores.id}, [blocks, n](Tape<T>& t, std::size_t self) {
        const auto in = t.node(self).inputs[0];
        auto g = t.upstream(self);
        auto y = t.value(self).data();
        if (T* gx = t.accum(in)) {
            for (std::size_t blk = 0; blk < blocks; ++blk) {
                for (std::size_t i = 0; i < n; ++i) {
                    const auto base = (blk * n + i) * n;
                    T dot = 0;
                    for (std::size_t j = 0; j <= i; ++j) dot += g[base + j] * y[base + j];
                    for (std::size_t j = 0; j <= i; ++j) gx[base + j] += y[base + j] * (g[base + j] - dot);
                }
            }
        }
    });
}

// Per-head probs[b,h] * v[b,h] scattered back into [(batch*seq) x d_model].
template <class T>
Var<T> attention_context(Var<T> probs, Var<T> v, HeadLayout L) {
    const auto B = L.batch, n = L.seq, H = L.heads, d = L.d_model, dh = L.head_dim();
    if (probs.numel() != B * H * n * n || v.rows() != B * n || v.cols() != d) {
        throw DimensionError("attention_context: bad layout " + shape_str(probs.shape()) + " / " + shape_str(v.shape()));
    }
    auto out = Tensor<T>::zeros(Shape{B * n, d});
    const T* pd = probs.value().data().data();
    const T* vd = v.value().data().data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            const auto off = b * n * d + h * dh;
            MStrided<T>(out.data().data() + off, n, dh, Eigen::OuterStride<>(d)).noalias() =
                CMap<T>(pd + (b * H + h) * n * n, n, n) * CStrided<T>(vd + off, n, dh, Eigen::OuterStride<>(d));
        }
    }
    return probs.tape->push("attention_context", std::move(out), {probs.id, v.id}, [B, n, H, d, dh](Tape<T>& t, std::size_t self) {
        const auto& node = t.node(self);
        const auto ip = node.inputs[0], iv = node.inputs[1];
        T* gp = t.accum(ip);
        T* gv = t.accum(iv);
        const T* pd = t.value(ip).data().data();
        const T* vd = t.value(iv).data().data();
        const T* g = t.upstream(self).data();
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t h = 0; h < H; ++h) {
                const auto off = b * n * d + h * dh;
                CStrided<T> G(g + off, n, dh, Eigen::OuterStride<>(d));
                if (gp) {
                    MMap<T>(gp + (b * H + h) * n * n, n, n).noalias() +=
                        G * CStrided<T>(vd + off, n, dh, Eigen::OuterStride<>(d)).transpose();
                }
                if (gv) {
                    MStrided<T>(gv + off, n, dh, Eigen::OuterStride<>(d)).noalias() +=
                        CMap<T>(pd + (b * H + h) * n * n, n, n).transpose() * G;
                }
            }
        }
    });
}

// Stacks the rows of a over the rows of b.
template <class T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("concat_rows: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const auto ra = a.rows(), rb = b.rows(), d = a.cols();
    std::vector<T> data(a.value().vec());
    data.insert(data.end(), b.value().vec().begin(), b.value().vec().end());
    return a.tape->push("concat_rows", Tensor<T>(Shape{ra + rb, d}, std::move(data)), {a.id, b.id},
                        [ra, rb, d](Tape<T>& t, std::size_t self) {
                            const auto& node = t.node(self);
                            auto g = t.upstream(self);
                            if (T* ga = t.accum(node.inputs[0]))
                                for (std::size_t i = 0; i < ra * d; ++i) ga[i] += g[i];
                            if (T* gb = t.accum(node.inputs[1]))
                                for (std::size_t i = 0; i < rb * d; ++i) gb[i] += g[ra * d + i];
                        });
}

// Mean of consecutive row segments of equal length: [(S*len) x d] -> [S x d].
template <class T>
Var<T> segment_mean(Var<T> x, std::size_t segment_len) {
    const auto rows = x.rows(), d = x.cols();
    if (segment_len == 0 || rows % segment_len != 0) {
        throw DimensionError("segment_mean: " + std::to_string(rows) + " rows not divisible by " +
                             std::to_string(segment_len));
    }
    const auto S = rows / segment_len;
    auto out = Tensor<T>::zeros(Shape{S, d});
    const T inv = T(1) / static_cast<T>(segment_len);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t r = 0; r < segment_len; ++r)
            for (std::size_t c = 0; c < d; ++c) out.data()[s * d + c] += inv * x.value().data()[(s * segment_len + r) * d + c];
    return x.tape->push("segment_mean", std::move(out), {x.id}, [S, segment_len, d, inv](Tape<T>& t, std::size_t self) {
        auto g = t.upstream(self);
        if (T* gx = t.accum(t.node(self).inputs[0])) {
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t r = 0; r < segment_len; ++r)
                    for (std::size_t c = 0; c < d; ++c) gx[(s * segment_len + r) * d + c] += inv * g[s * d + c];
        }
    });
}

}  // namespace qgpt::ops
