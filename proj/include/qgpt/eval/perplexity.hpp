#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "qgpt/core/error.hpp"
#include "qgpt/core/ops.hpp"
#include "qgpt/core/tape.hpp"
#include "qgpt/model/gpt.hpp"
#include "qgpt/train/data.hpp"

namespace qgpt::eval {

struct NllSum {
    double total = 0;  // summed negative log-likelihood in nats
    std::size_t tokens = 0;

    double mean() const { return total / static_cast<double>(tokens); }
    double perplexity() const { return std::exp(mean()); }
};

// Models carrying quantizers are evaluated in student mode with frozen
// activation ranges; full-precision models in teacher mode.
template <class T>
model::Mode eval_mode(const model::GptModel<T>& m) {
    return m.weight_quantizers().empty() && m.act_quantizers().empty() ? model::Mode::teacher : model::Mode::student;
}

// Token-level NLL over non-overlapping windows of the model's context length.
// max_windows = 0 evaluates every full window.
template <class T>
NllSum negative_log_likelihood(model::GptModel<T>& m, const std::vector<std::int32_t>& stream, std::size_t batch = 16,
                               std::size_t max_windows = 0) {
    const auto seq = m.config().max_seq_len;
    auto windows = train::window_count(stream.size(), seq);
    if (windows == 0) throw ContractError("perplexity: split shorter than one window of " + std::to_string(seq + 1) + " tokens");
    if (max_windows > 0) windows = std::min(windows, max_windows);
    const auto mode = eval_mode(m);
    NllSum acc;
    for (std::size_t w0 = 0; w0 < windows; w0 += batch) {
        std::vector<std::size_t> ids;
        for (std::size_t w = w0; w < std::min(windows, w0 + batch); ++w) ids.push_back(w);
        const auto b = train::make_batch(stream, ids, seq);
        Tape<T> tape(false);
        auto out = m.forward(tape, b.inputs, b.batch, seq, mode, false);
        auto ce = ops::cross_entropy_logits(out.logits, b.targets);
        acc.total += static_cast<double>(ce.value()[0]) * static_cast<double>(b.targets.size());
        acc.tokens += b.targets.size();
    }
    return acc;
}

template <class T>
double perplexity(model::GptModel<T>& m, const std::vector<std::int32_t>& stream, std::size_t batch = 16,
                  std::size_t max_windows = 0) {
    return negative_log_likelihood(m, stream, batch, max_windows).perplexity();
}

}  // namespace qgpt::eval
