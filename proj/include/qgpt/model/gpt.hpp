#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qgpt/core/error.hpp"
#include "qgpt/core/ops.hpp"
#include "qgpt/core/tape.hpp"
#include "qgpt/model/config.hpp"
#include "qgpt/quant/fake_quant_ops.hpp"
#include "qgpt/quant/quantizers.hpp"
#include "qgpt/quant/spec.hpp"

namespace qgpt::model {

enum class Mode { teacher, student };

// Which block output feeds the contrastive heads.
enum class ContrastLayer { first, last };

// Per-layer weight matrices that carry a layer-wise quantizer.
inline const std::vector<std::string>& layer_weight_names() {
    static const std::vector<std::string> names{"attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o", "mlp.w_f", "mlp.w_g"};
    return names;
}

// Activation quantization sites of one block, with whether the site is asymmetric.
struct ActSite {
    const char* name;
    bool asymmetric;
};

inline const std::vector<ActSite>& layer_act_sites() {
    static const std::vector<ActSite> sites{{"ln1_out", false}, {"q", false},       {"k", false},
                                            {"v", false},       {"scores", false},  {"context", true},
                                            {"ln2_out", false}, {"gelu_out", true}};
    return sites;
}

inline std::string layer_prefix(std::size_t l) { return "h" + std::to_string(l) + "."; }

// Decoder-only transformer plus the quantizers attached to its weights and
// activations. Parameter names are stable and unique; insertion order is the
// serialization order.
template <class T>
class GptModel {
public:
    GptModel() = default;

    explicit GptModel(ModelConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        const auto d = cfg_.d_model, f = cfg_.d_ff;
        add("tok_emb", {cfg_.vocab_size, d});
        add("pos_emb", {cfg_.max_seq_len, d});
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            const auto p = layer_prefix(l);
            add(p + "ln1.g", {d});
            add(p + "ln1.b", {d});
            for (const char* m : {"q", "k", "v", "o"}) {
                add(p + "attn.w_" + m, {d, d});
                add(p + "attn.b_" + m, {d});
            }
            add(p + "ln2.g", {d});
            add(p + "ln2.b", {d});
            add(p + "mlp.w_f", {d, f});
            add(p + "mlp.b_f", {f});
            add(p + "mlp.w_g", {f, d});
            add(p + "mlp.b_g", {d});
        }
        add("ln_f.g", {d});
        add("ln_f.b", {d});
        if (!cfg_.tie_embeddings) add("lm_head", {d, cfg_.vocab_size});
    }

    // GPT-2 style initialization: N(0, 0.02) weights, residual output projections
    // scaled by 1/sqrt(2 L), unit layer-norm gains, zero biases.
    static GptModel init_random(ModelConfig cfg, std::uint64_t seed) {
        GptModel m(cfg);
        std::mt19937_64 rng(seed);
        const double resid = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
        for (const auto& name : m.order_) {
            auto& t = m.params_.at(name);
            double sd = 0;
            if (name == "tok_emb" || name == "lm_head") sd = 0.02;
            else if (name == "pos_emb") sd = 0.01;
            else if (name.ends_with("w_o") || name.ends_with("w_g")) sd = resid;
            else if (name.find(".w_") != std::string::npos) sd = 0.02;
            if (sd > 0) {
                std::normal_distribution<double> nd(0.0, sd);
                for (auto& v : t.data()) v = static_cast<T>(nd(rng));
            } else if (name.ends_with(".g")) {
                for (auto& v : t.data()) v = T(1);
            }
        }
        return m;
    }

    const ModelConfig& config() const { return cfg_; }
    const std::vector<std::string>& param_names() const { return order_; }

    bool has_param(const std::string& name) const { return params_.count(name) != 0; }

    Tensor<T>& param(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw NameError("unknown parameter '" + name + "'");
        return it->second;
    }
    const Tensor<T>& param(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw NameError("unknown parameter '" + name + "'");
        return it->second;
    }

    std::size_t num_parameters() const {
        std::size_t n = 0;
        for (const auto& [_, t] : params_) n += t.numel();
        return n;
    }

    void set_trainable(bool on) {
        for (auto& [_, t] : params_) t.set_requires_grad(on);
    }

    // Names of the matrices that receive a weight quantizer (word embedding first).
    std::vector<std::string> quantizable_weights() const {
        std::vector<std::string> out{"tok_emb"};
        for (std::size_t l = 0; l < cfg_.n_layers; ++l)
            for (const auto& w : layer_weight_names()) out.push_back(layer_prefix(l) + w);
        if (!cfg_.tie_embeddings) out.push_back("lm_head");
        return out;
    }

    // ---- quantizers -------------------------------------------------------

    const quant::BitSpec& bits() const { return bits_; }
    quant::Scheme scheme() const { return scheme_; }

    std::vector<quant::WeightQuantizer<T>>& weight_quantizers() { return wq_; }
    const std::vector<quant::WeightQuantizer<T>>& weight_quantizers() const { return wq_; }
    std::vector<quant::ActQuantizer<T>>& act_quantizers() { return aq_; }
    const std::vector<quant::ActQuantizer<T>>& act_quantizers() const { return aq_; }

    quant::WeightQuantizer<T>* weight_quantizer(const std::string& param) {
        for (auto& q : wq_)
            if (q.param == param) return &q;
        return nullptr;
    }
    const quant::WeightQuantizer<T>* weight_quantizer(const std::string& param) const {
        for (const auto& q : wq_)
            if (q.param == param) return &q;
        return nullptr;
    }
    quant::ActQuantizer<T>* act_quantizer(const std::string& site) {
        for (auto& q : aq_)
            if (q.site == site) return &q;
        return nullptr;
    }

    // Attaches quantizers for a W-E-A bit spec: layer-wise W-bit quantizers on
    // every Transformer weight matrix, row-wise E-bit on the word embedding, and
    // A-bit on every activation site. Layer norms, biases and position
    // embeddings stay full precision. Scheme states are initialized from the
    // current weights, or to placeholders when `fit` is false (the caller
    // restores them).
    void assign_quantizers(const quant::BitSpec& spec, quant::Scheme scheme, bool fit = true) {
        for (auto b : {spec.w, spec.e, spec.a}) {
            if (b && *b != 2 && *b != 4 && *b != 8) {
                throw ConfigError("bit-widths must be 2, 4, 8 or fp; got " + std::to_string(*b));
            }
        }
        bits_ = spec;
        scheme_ = scheme;
        wq_.clear();
        aq_.clear();
        if (spec.e) attach_weight("tok_emb", *spec.e, quant::Granularity::per_row, quant::Target::embedding, fit);
        if (spec.w) {
            for (std::size_t l = 0; l < cfg_.n_layers; ++l)
                for (const auto& w : layer_weight_names())
                    attach_weight(layer_prefix(l) + w, *spec.w, quant::Granularity::per_tensor, quant::Target::weight, fit);
            if (!cfg_.tie_embeddings) attach_weight("lm_head", *spec.w, quant::Granularity::per_tensor, quant::Target::weight, fit);
        }
        if (spec.a) {
            for (std::size_t l = 0; l < cfg_.n_layers; ++l)
                for (const auto& s : layer_act_sites()) aq_.push_back(make_act(layer_prefix(l) + s.name, *spec.a, !s.asymmetric));
            aq_.push_back(make_act("head_in", *spec.a, true));
        }
    }

    // Latent weight as the forward pass sees it in student mode.
    std::vector<T> effective_weight(const std::string& name) const {
        const auto& w = param(name);
        const auto* q = weight_quantizer(name);
        if (q == nullptr || q->frozen) return w.vec();
        auto c = quant::encode_weight(*q, w);
        const auto groups = q->spec.granularity == quant::Granularity::per_row ? w.rows() : 1;
        return quant::decode_weight<T>(q->spec.scheme, c, groups);
    }

    // ---- forward -----------------------------------------------------------

    struct Output {
        Var<T> logits;       // [(batch*seq) x vocab], pre-softmax
        Var<T> last_hidden;  // output of the final block
        Var<T> first_hidden; // output of the first block
    };

    // tokens holds `batch` sequences of `seq` ids back to back. Teacher mode is
    // pure full precision; student mode routes every attached quantizer.
    // `calibrate` feeds this batch into the activation range averages.
    Output forward(Tape<T>& tape, std::span<const std::int32_t> tokens, std::size_t batch, std::size_t seq, Mode mode,
                   bool calibrate = false) {
        if (seq > cfg_.max_seq_len) {
            throw ContractError("sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                                std::to_string(cfg_.max_seq_len));
        }
        if (tokens.size() != batch * seq || seq == 0) throw DimensionError("forward: token count != batch * seq");
        for (auto id : tokens) {
            if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
                throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(cfg_.vocab_size));
            }
        }
        const bool student = mode == Mode::student;
        auto P = [&](const std::string& n) { return tape.param(param(n)); };
        auto W = [&](const std::string& n) {
            auto v = P(n);
            if (student) {
                if (auto* q = weight_quantizer(n)) return quant::quantize_weight(v, *q);
            }
            return v;
        };
        auto A = [&](Var<T> x, const std::string& site) {
            if (student) {
                if (auto* q = act_quantizer(site)) return quant::quantize_activation(x, *q, calibrate);
            }
            return x;
        };
        auto linear = [&](Var<T> x, const std::string& w, const std::string& b) {
            return ops::add_bias(ops::matmul(x, W(w)), P(b));
        };

        const ops::HeadLayout L{batch, seq, cfg_.n_heads, cfg_.d_model};
        auto emb = W("tok_emb");
        auto x = ops::add_positions(ops::embedding(emb, tokens), P("pos_emb"), seq);
        Output out{};
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            const auto p = layer_prefix(l);
            auto a = A(ops::layer_norm(x, P(p + "ln1.g"), P(p + "ln1.b")), p + "ln1_out");
            auto q = A(linear(a, p + "attn.w_q", p + "attn.b_q"), p + "q");
            auto k = A(linear(a, p + "attn.w_k", p + "attn.b_k"), p + "k");
            auto v = A(linear(a, p + "attn.w_v", p + "attn.b_v"), p + "v");
            auto s = A(ops::attention_scores(q, k, L), p + "scores");
            auto ctx = A(ops::attention_context(ops::causal_softmax(s), v, L), p + "context");
            x = ops::add(x, linear(ctx, p + "attn.w_o", p + "attn.b_o"));
            auto a2 = A(ops::layer_norm(x, P(p + "ln2.g"), P(p + "ln2.b")), p + "ln2_out");
            auto f = A(ops::gelu(linear(a2, p + "mlp.w_f", p + "mlp.b_f")), p + "gelu_out");
            x = ops::add(x, linear(f, p + "mlp.w_g", p + "mlp.b_g"));
            if (l == 0) out.first_hidden = x;
        }
        out.last_hidden = x;
        auto h = A(ops::layer_norm(x, P("ln_f.g"), P("ln_f.b")), "head_in");
        out.logits = cfg_.tie_embeddings ? ops::matmul_nt(h, emb) : ops::matmul(h, W("lm_head"));
        return out;
    }

private:
    void add(const std::string& name, Shape shape) {
        params_.emplace(name, Tensor<T>::zeros(std::move(shape), true));
        order_.push_back(name);
    }

    void attach_weight(const std::string& name, int bits, quant::Granularity g, quant::Target target, bool fit) {
        quant::WeightQuantizer<T> q;
        q.param = name;
        q.spec = quant::QuantSpec{bits, g, scheme_, true, target};
        q.spec.validate();
        q.state = fit ? initial_state(param(name), q.spec) : placeholder_state(param(name), q.spec);
        wq_.push_back(std::move(q));
    }

    static quant::SchemeState<T> initial_state(const Tensor<T>& w, const quant::QuantSpec& spec) {
        const auto G = spec.granularity == quant::Granularity::per_row ? w.rows() : 1;
        const auto gs = w.numel() / G;
        auto group = [&](std::size_t g) { return w.data().subspan(g * gs, gs); };
        for (std::size_t g = 0; g < G; ++g) {
            if (!(quant::mean_abs<T>(group(g)) > 0)) {
                throw DegenerateError("cannot quantize an all-zero weight group (group " + std::to_string(g) + ")");
            }
        }
        switch (spec.scheme) {
            case quant::Scheme::dynamic:
                return quant::DynamicState<T>{Tensor<T>::filled({G}, T(1), true)};
            case quant::Scheme::pact:
                return quant::PactState<T>{Tensor<T>::filled({G}, T(quant::kPactInitAlpha), true),
                                           Tensor<T>::filled({G}, T(quant::kPactInitAlpha), true)};
            case quant::Scheme::lsq: {
                std::vector<T> s(G);
                for (std::size_t g = 0; g < G; ++g) s[g] = quant::lsq_init_step<T>(group(g), spec.bits);
                return quant::LsqState<T>{Tensor<T>({G}, std::move(s), true)};
            }
            case quant::Scheme::laq: {
                quant::LaqState<T> st;
                for (std::size_t g = 0; g < G; ++g) st.alpha.push_back(quant::laq_alpha_solver<T>(group(g), spec.bits).alpha);
                return st;
            }
            case quant::Scheme::fixed: {
                quant::FixedState<T> st;
                for (std::size_t g = 0; g < G; ++g) st.alpha.push_back(quant::max_abs<T>(group(g)));
                return st;
            }
        }
        throw ConfigError("unknown scheme");
    }

    static quant::SchemeState<T> placeholder_state(const Tensor<T>& w, const quant::QuantSpec& spec) {
        const auto G = spec.granularity == quant::Granularity::per_row ? w.rows() : 1;
        auto ones = [G] { return Tensor<T>::filled({G}, T(1), true); };
        switch (spec.scheme) {
            case quant::Scheme::dynamic: return quant::DynamicState<T>{ones()};
            case quant::Scheme::pact: return quant::PactState<T>{ones(), ones()};
            case quant::Scheme::lsq: return quant::LsqState<T>{ones()};
            case quant::Scheme::laq: return quant::LaqState<T>{std::vector<T>(G, T(1))};
            case quant::Scheme::fixed: return quant::FixedState<T>{std::vector<T>(G, T(1))};
        }
        throw ConfigError("unknown scheme");
    }

    static quant::ActQuantizer<T> make_act(std::string site, int bits, bool symmetric) {
        quant::ActQuantizer<T> q;
        q.site = std::move(site);
        q.bits = bits;
        q.symmetric = symmetric;
        return q;
    }

    ModelConfig cfg_;
    std::map<std::string, Tensor<T>> params_;
    std::vector<std::string> order_;
    quant::BitSpec bits_;
    quant::Scheme scheme_ = quant::Scheme::dynamic;
    std::vector<quant::WeightQuantizer<T>> wq_;
    std::vector<quant::ActQuantizer<T>> aq_;
};

// Fresh student: deep copy of the teacher's parameters with newly initialized
// quantizers. The teacher is frozen (no gradient slots) afterwards.
template <class T>
GptModel<T> init_student_from_teacher(GptModel<T>& teacher, const quant::BitSpec& spec, quant::Scheme scheme) {
    if (!teacher.weight_quantizers().empty() || !teacher.act_quantizers().empty()) {
        throw ContractError("teacher must be a full-precision model");
    }
    GptModel<T> student = teacher;
    student.set_trainable(true);
    for (const auto& n : student.param_names()) student.param(n).zero_grad();
    student.assign_quantizers(spec, scheme);
    teacher.set_trainable(false);
    return student;
}

// Parameter-wise copy between models of the same architecture.
template <class T>
void copy_parameters(const GptModel<T>& from, GptModel<T>& to) {
    if (!(from.config() == to.config())) throw ContractError("model configurations differ");
    for (const auto& n : from.param_names()) {
        auto& dst = to.param(n);
        const bool rg = dst.requires_grad();
        dst = Tensor<T>(from.param(n).shape(), from.param(n).vec(), rg);
    }
}

}  // namespace qgpt::model
