#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "qgpt/core/error.hpp"
#include "qgpt/core/tensor.hpp"

namespace qgpt::quant {

enum class Scheme { dynamic, pact, lsq, laq, fixed };
enum class Granularity { per_tensor, per_row };
enum class Target { weight, embedding, activation };

inline constexpr std::array<std::string_view, 5> kSchemeNames{"dynamic", "pact", "lsq", "laq", "fixed"};

inline std::string_view to_string(Scheme s) { return kSchemeNames[static_cast<std::size_t>(s)]; }

inline Scheme parse_scheme(std::string_view name) {
    for (std::size_t i = 0; i < kSchemeNames.size(); ++i) {
        if (kSchemeNames[i] == name) return static_cast<Scheme>(i);
    }
    std::string valid;
    for (auto n : kSchemeNames) valid += (valid.empty() ? "" : ", ") + std::string(n);
    throw ConfigError("unknown quantization scheme '" + std::string(name) + "' (valid: " + valid + ")");
}

struct QuantSpec {
    int bits = 8;
    Granularity granularity = Granularity::per_tensor;
    Scheme scheme = Scheme::dynamic;
    bool symmetric = true;
    Target target = Target::weight;

    void validate() const {
        if (bits < 2) throw ConfigError("quantizer bit-width must be >= 2");
        if (target == Target::embedding && granularity != Granularity::per_row) {
            throw ConfigError("embedding quantizers are row-wise");
        }
        if (target == Target::weight && granularity != Granularity::per_tensor) {
            throw ConfigError("weight quantizers are layer-wise (per tensor)");
        }
    }
};

// Bit-widths for Transformer weights, word embeddings and activations; an empty
// optional means full precision.
struct BitSpec {
    std::optional<int> w;
    std::optional<int> e;
    std::optional<int> a;

    static BitSpec full_precision() { return {}; }

    bool any_quantized() const { return w || e || a; }

    std::string str() const {
        auto f = [](const std::optional<int>& b) { return b ? std::to_string(*b) : std::string("fp"); };
        return f(w) + "-" + f(e) + "-" + f(a);
    }
};

// Learned parameters of each scheme. Exactly one alternative is active per quantizer.
template <class T>
struct DynamicState {
    Tensor<T> gamma;  // one entry per group
};

template <class T>
struct PactState {
    Tensor<T> alpha_neg;
    Tensor<T> alpha_pos;
};

template <class T>
struct LsqState {
    Tensor<T> step;
};

// Refit before every forward pass; nothing is learned by gradient.
template <class T>
struct LaqState {
    std::vector<T> alpha;
    int max_iters = 20;
};

// Clipping fixed at max|w| per group when the quantizer is created.
template <class T>
struct FixedState {
    std::vector<T> alpha;
};

template <class T>
using SchemeState = std::variant<DynamicState<T>, PactState<T>, LsqState<T>, LaqState<T>, FixedState<T>>;

inline constexpr double kPactInitAlpha = 2.5;
inline constexpr double kClipFloor = 1e-4;

// Attached to one weight matrix (per tensor) or to the embedding table (per row).
template <class T>
struct WeightQuantizer {
    std::string param;  // name of the quantized parameter
    QuantSpec spec;
    SchemeState<T> state;
    // Set on models restored from packed codes: weights already lie on their
    // grid, and frozen_scalars holds the stored clipping scalars of that grid.
    bool frozen = false;
    std::vector<T> frozen_scalars;

    std::size_t groups() const {
        return std::visit(
            [](const auto& s) -> std::size_t {
                using S = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<S, DynamicState<T>>) return s.gamma.numel();
                else if constexpr (std::is_same_v<S, PactState<T>>) return s.alpha_pos.numel();
                else if constexpr (std::is_same_v<S, LsqState<T>>) return s.step.numel();
                else return s.alpha.size();
            },
            state);
    }

    // Learnable clipping tensors of the active scheme (empty for laq/fixed).
    std::vector<Tensor<T>*> clip_params() {
        std::vector<Tensor<T>*> out;
        std::visit(
            [&out](auto& s) {
                using S = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<S, DynamicState<T>>) out.push_back(&s.gamma);
                else if constexpr (std::is_same_v<S, PactState<T>>) {
                    out.push_back(&s.alpha_neg);
                    out.push_back(&s.alpha_pos);
                } else if constexpr (std::is_same_v<S, LsqState<T>>) out.push_back(&s.step);
            },
            state);
        return out;
    }
};

// Exponential moving average of activation ranges.
template <class T>
struct ActRange {
    bool initialized = false;
    T lo = 0;
    T hi = 0;
};

template <class T>
struct ActQuantizer {
    std::string site;
    int bits = 8;
    bool symmetric = true;
    T decay = T(0.9);
    ActRange<T> range;
};

}  // namespace qgpt::quant
