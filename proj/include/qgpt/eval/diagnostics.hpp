#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qgpt/core/error.hpp"
#include "qgpt/core/tape.hpp"
#include "qgpt/model/config.hpp"
#include "qgpt/model/gpt.hpp"
#include "qgpt/quant/fake_quant_ops.hpp"
#include "qgpt/quant/spec.hpp"
#include "qgpt/train/data.hpp"

namespace qgpt::eval {

// ---------------------------------------------------------------------------
// Token cosine similarity

enum class SimilarityMode { within_model, cross_model };

struct SimilarityMatrix {
    std::size_t n = 0;
    std::vector<double> values;  // row-major n x n
    SimilarityMode mode = SimilarityMode::within_model;

    double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }

    double mean_diagonal() const {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) s += at(i, i);
        return s / static_cast<double>(n);
    }
};

namespace detail {

inline double dot(const double* a, const double* b, std::size_t d) {
    double s = 0;
    for (std::size_t i = 0; i < d; ++i) s += a[i] * b[i];
    return s;
}

template <class T>
std::vector<double> last_hidden(model::GptModel<T>& m, const std::vector<std::int32_t>& tokens) {
    Tape<T> tape(false);
    const auto mode = m.weight_quantizers().empty() && m.act_quantizers().empty() ? model::Mode::teacher : model::Mode::student;
    auto out = m.forward(tape, tokens, 1, tokens.size(), mode, false);
    const auto& h = out.last_hidden.value();
    return std::vector<double>(h.data().begin(), h.data().end());
}

}  // namespace detail

// Entry (i, j): cosine of a's last-layer representation at position i with b's
// at position j. Passing the same model twice gives the within-model matrix.
template <class T>
SimilarityMatrix token_cosine_matrix(model::GptModel<T>& a, model::GptModel<T>& b, const std::vector<std::int32_t>& tokens) {
    if (tokens.size() < 2) throw ContractError("token_cosine_matrix: sentence needs at least 2 tokens");
    const bool same = &a == &b;
    const auto ha = detail::last_hidden(a, tokens);
    const auto hb = same ? ha : detail::last_hidden(b, tokens);
    const auto n = tokens.size(), d = a.config().d_model;
    if (b.config().d_model != d) throw DimensionError("token_cosine_matrix: models differ in width");
    auto norms = [&](const std::vector<double>& h) {
        std::vector<double> out(n);
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = std::sqrt(detail::dot(&h[i * d], &h[i * d], d));
            if (!(out[i] > 0)) throw DegenerateError("token_cosine_matrix: zero-norm hidden state at position " + std::to_string(i));
        }
        return out;
    };
    const auto na = norms(ha);
    const auto nb = same ? na : norms(hb);
    SimilarityMatrix s{n, std::vector<double>(n * n), same ? SimilarityMode::within_model : SimilarityMode::cross_model};
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (same && j < i) {
                s.values[i * n + j] = s.values[j * n + i];
                continue;
            }
            const double c = same && i == j ? 1.0 : detail::dot(&ha[i * d], &hb[j * d], d) / (na[i] * nb[j]);
            s.values[i * n + j] = std::clamp(c, -1.0, 1.0);
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// Embedding homogeneity

// latent: the full-precision embedding parameter; effective: the rows the
// forward pass uses (quantized for students).
enum class EmbeddingView { latent, effective };

struct HomogeneityStats {
    double mean_pairwise_cosine = 0;
    double mean_pairwise_l2 = 0;
    std::vector<std::int32_t> ids;  // the top-k tokens, most frequent first
    std::vector<double> matrix;     // k x d rows of those tokens
    std::size_t dim = 0;
};

// Pair statistics over a k x d row matrix. Two zero rows are identical
// (cosine 1); a zero row against a non-zero row has cosine 0.
inline HomogeneityStats pairwise_stats(std::vector<double> rows, std::size_t k, std::size_t d) {
    if (k < 2) throw ContractError("embedding_homogeneity: top_k must be >= 2");
    if (rows.size() != k * d) throw DimensionError("embedding_homogeneity: row matrix has wrong size");
    std::vector<double> norm(k);
    for (std::size_t i = 0; i < k; ++i) norm[i] = std::sqrt(detail::dot(&rows[i * d], &rows[i * d], d));
    double cos_sum = 0, l2_sum = 0;
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i + 1; j < k; ++j) {
            const double dp = detail::dot(&rows[i * d], &rows[j * d], d);
            double c;
            if (norm[i] > 0 && norm[j] > 0) c = std::clamp(dp / (norm[i] * norm[j]), -1.0, 1.0);
            else c = (norm[i] == 0 && norm[j] == 0) ? 1.0 : 0.0;
            cos_sum += c;
            double sq = 0;
            for (std::size_t q = 0; q < d; ++q) {
                const double diff = rows[i * d + q] - rows[j * d + q];
                sq += diff * diff;
            }
            l2_sum += std::sqrt(sq);
        }
    }
    const double pairs = static_cast<double>(k * (k - 1) / 2);
    HomogeneityStats s;
    s.mean_pairwise_cosine = cos_sum / pairs;
    s.mean_pairwise_l2 = l2_sum / pairs;
    s.matrix = std::move(rows);
    s.dim = d;
    return s;
}

template <class T>
HomogeneityStats embedding_homogeneity(const model::GptModel<T>& m, const std::vector<std::size_t>& frequencies,
                                       std::size_t top_k, EmbeddingView view = EmbeddingView::effective) {
    if (frequencies.empty()) throw ContractError("embedding_homogeneity: token frequency table required");
    const auto V = m.config().vocab_size, d = m.config().d_model;
    if (frequencies.size() != V) throw DimensionError("embedding_homogeneity: frequency table does not match vocabulary");
    if (top_k > V) throw ContractError("embedding_homogeneity: top_k exceeds vocabulary size");
    const auto ids = train::top_k_tokens(frequencies, top_k);
    const std::vector<T> table = view == EmbeddingView::effective ? m.effective_weight("tok_emb") : m.param("tok_emb").vec();
    std::vector<double> rows;
    rows.reserve(top_k * d);
    for (auto id : ids)
        for (std::size_t q = 0; q < d; ++q) rows.push_back(static_cast<double>(table[static_cast<std::size_t>(id) * d + q]));
    auto s = pairwise_stats(std::move(rows), top_k, d);
    s.ids = ids;
    return s;
}

// ---------------------------------------------------------------------------
// Weight histograms

struct Histogram {
    std::string module;
    double lo = 0;
    double hi = 0;
    std::vector<std::size_t> counts;
    std::vector<double> overlay;  // clipping values drawn as vertical lines
    std::size_t total() const {
        std::size_t s = 0;
        for (auto c : counts) s += c;
        return s;
    }
    double bin_width() const { return (hi - lo) / static_cast<double>(counts.size()); }
};

template <class T>
std::string available_modules(const model::GptModel<T>& m) {
    std::string s;
    for (const auto& n : m.param_names()) s += (s.empty() ? "" : ", ") + n;
    return s;
}

// Counts of the latent weights in `bins` equal bins over [min, max], with the
// module's effective clipping values: -alpha_neg and alpha_pos for PACT,
// -alpha and alpha otherwise, one pair per group.
template <class T>
Histogram weight_histogram(const model::GptModel<T>& m, const std::string& module, std::size_t bins) {
    if (bins < 1) throw ContractError("weight_histogram: bins must be >= 1");
    if (!m.has_param(module)) throw NameError("unknown module '" + module + "' (available: " + available_modules(m) + ")");
    const auto& w = m.param(module);
    Histogram h;
    h.module = module;
    const auto [mn, mx] = std::minmax_element(w.data().begin(), w.data().end());
    h.lo = static_cast<double>(*mn);
    h.hi = static_cast<double>(*mx);
    if (!(h.hi > h.lo)) h.hi = h.lo + 1.0;
    h.counts.assign(bins, 0);
    const double width = h.bin_width();
    for (T v : w.data()) {
        auto b = static_cast<std::size_t>((static_cast<double>(v) - h.lo) / width);
        ++h.counts[std::min(b, bins - 1)];
    }
    if (const auto* q = m.weight_quantizer(module)) {
        if (const auto* p = std::get_if<quant::PactState<T>>(&q->state)) {
            for (std::size_t g = 0; g < p->alpha_pos.numel(); ++g) {
                h.overlay.push_back(-static_cast<double>(p->alpha_neg[g]));
                h.overlay.push_back(static_cast<double>(p->alpha_pos[g]));
            }
        } else {
            for (T a : quant::effective_alphas(*q, w)) {
                h.overlay.push_back(-static_cast<double>(a));
                h.overlay.push_back(static_cast<double>(a));
            }
        }
    }
    return h;
}

// Sample skewness E[(x - mu)^3] / sigma^3.
template <class T>
double skewness(std::span<const T> x) {
    if (x.size() < 2) throw ContractError("skewness: need at least 2 values");
    double mu = 0;
    for (auto v : x) mu += static_cast<double>(v);
    mu /= static_cast<double>(x.size());
    double m2 = 0, m3 = 0;
    for (auto v : x) {
        const double e = static_cast<double>(v) - mu;
        m2 += e * e;
        m3 += e * e * e;
    }
    m2 /= static_cast<double>(x.size());
    m3 /= static_cast<double>(x.size());
    if (!(m2 > 0)) return 0;
    return m3 / std::pow(m2, 1.5);
}

// ---------------------------------------------------------------------------
// Scaling dump

struct ScalingRow {
    std::string module;
    double gamma = 0;  // the single gamma; for row-wise modules the median
    double min = 0;
    double max = 0;
    std::size_t groups = 1;
};

template <class T>
std::vector<ScalingRow> scaling_dump(const model::GptModel<T>& m) {
    if (m.weight_quantizers().empty()) throw ConfigError("scaling_dump: model has no weight quantizers");
    std::vector<ScalingRow> out;
    for (const auto& q : m.weight_quantizers()) {
        const auto* d = std::get_if<quant::DynamicState<T>>(&q.state);
        if (d == nullptr) {
            throw ConfigError("scaling_dump requires the dynamic scheme; '" + q.param + "' uses " +
                              std::string(quant::to_string(q.spec.scheme)));
        }
        std::vector<double> g(d->gamma.data().begin(), d->gamma.data().end());
        std::sort(g.begin(), g.end());
        ScalingRow r{q.param, g[g.size() / 2], g.front(), g.back(), g.size()};
        if (g.size() % 2 == 0) r.gamma = 0.5 * (g[g.size() / 2 - 1] + g[g.size() / 2]);
        out.push_back(r);
    }
    return out;
}

// Population standard deviation of gamma over the layer-wise (Transformer weight) modules.
inline double transformer_gamma_stddev(const std::vector<ScalingRow>& rows) {
    std::vector<double> g;
    for (const auto& r : rows)
        if (r.groups == 1) g.push_back(r.gamma);
    if (g.empty()) throw ContractError("transformer_gamma_stddev: no layer-wise modules");
    double mu = 0;
    for (auto v : g) mu += v;
    mu /= static_cast<double>(g.size());
    double var = 0;
    for (auto v : g) var += (v - mu) * (v - mu);
    return std::sqrt(var / static_cast<double>(g.size()));
}

// ---------------------------------------------------------------------------
// Model size

inline constexpr double kBytesPerMB = 1024.0 * 1024.0;

struct SizeReport {
    std::size_t total_params = 0;
    std::size_t bytes_full_precision = 0;
    std::size_t bytes_quantized = 0;
    double mb_full_precision() const { return static_cast<double>(bytes_full_precision) / kBytesPerMB; }
    double mb_quantized() const { return static_cast<double>(bytes_quantized) / kBytesPerMB; }
    double compression_ratio() const { return static_cast<double>(bytes_full_precision) / static_cast<double>(bytes_quantized); }
};

// Stored size of a model: packed codes of every quantized tensor, 4 bytes per
// clipping scalar (per tensor or per row; two per group for PACT) and 4 bytes
// per unquantized parameter. Activation bits cost nothing at rest.
inline SizeReport model_size(const model::ModelConfig& c, const quant::BitSpec& spec, quant::Scheme scheme = quant::Scheme::dynamic) {
    c.validate();
    const std::size_t per_group = scheme == quant::Scheme::pact ? 2 : 1;
    SizeReport r;
    r.total_params = model::parameter_count(c);
    r.bytes_full_precision = 4 * r.total_params;
    auto packed = [](std::size_t count, int bits) { return (count * static_cast<std::size_t>(bits) + 7) / 8; };
    std::size_t quantized_params = 0;
    std::size_t bytes = 0;
    if (spec.e) {
        const auto n = c.vocab_size * c.d_model;
        bytes += packed(n, *spec.e) + 4 * per_group * c.vocab_size;
        quantized_params += n;
    }
    if (spec.w) {
        std::vector<std::size_t> sizes;
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            for (int i = 0; i < 4; ++i) sizes.push_back(c.d_model * c.d_model);
            sizes.push_back(c.d_model * c.d_ff);
            sizes.push_back(c.d_ff * c.d_model);
        }
        if (!c.tie_embeddings) sizes.push_back(c.d_model * c.vocab_size);
        for (auto n : sizes) {
            bytes += packed(n, *spec.w) + 4 * per_group;
            quantized_params += n;
        }
    }
    bytes += 4 * (r.total_params - quantized_params);
    r.bytes_quantized = bytes;
    return r;
}

}  // namespace qgpt::eval
