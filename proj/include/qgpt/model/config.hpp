#pragma once

#include <cstddef>
#include <string>

#include "qgpt/core/error.hpp"

namespace qgpt::model {

struct ModelConfig {
    std::size_t vocab_size = 256;
    std::size_t n_layers = 2;
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t d_ff = 512;
    std::size_t max_seq_len = 128;
    bool tie_embeddings = true;

    void validate() const {
        if (vocab_size < 2) throw ConfigError("model.vocab_size must be >= 2");
        if (n_layers < 1) throw ConfigError("model.n_layers must be >= 1");
        if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
            throw ConfigError("model.d_model (" + std::to_string(d_model) + ") must be divisible by model.n_heads (" +
                              std::to_string(n_heads) + ")");
        }
        if (d_ff < 1) throw ConfigError("model.d_ff must be >= 1");
        if (max_seq_len < 2) throw ConfigError("model.max_seq_len must be >= 2");
    }

    bool operator==(const ModelConfig&) const = default;
};

// GPT-2 small: 12 layers, width 768, 12 heads, 1024 positions, tied embeddings.
inline ModelConfig gpt2_small() {
    return ModelConfig{50257, 12, 768, 12, 3072, 1024, true};
}

// Number of trainable scalars of the decoder for a config.
inline std::size_t parameter_count(const ModelConfig& c) {
    const auto d = c.d_model, f = c.d_ff;
    const auto per_layer = 4 * d * d + 4 * d  // attention projections + biases
                           + 2 * d * f + f + d  // feed-forward weights + biases
                           + 4 * d;             // two layer norms
    auto total = c.vocab_size * d + c.max_seq_len * d + c.n_layers * per_layer + 2 * d;
    if (!c.tie_embeddings) total += d * c.vocab_size;
    return total;
}

}  // namespace qgpt::model
