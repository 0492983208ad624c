#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qgpt/core/ops.hpp"
#include "qgpt/core/tape.hpp"
#include "qgpt/distill/losses.hpp"
#include "qgpt/distill/memory_bank.hpp"
#include "qgpt/distill/negatives.hpp"

namespace qgpt::distill {

enum class AnchorMode { bank, immediate };

inline const char* to_string(AnchorMode a) { return a == AnchorMode::bank ? "bank" : "immediate"; }

inline AnchorMode parse_anchor(std::string_view s) {
    if (s == "bank") return AnchorMode::bank;
    if (s == "immediate") return AnchorMode::immediate;
    throw ConfigError("distill.anchor must be 'bank' or 'immediate', got '" + std::string(s) + "'");
}

struct DistillConfig {
    double lambda = 0.1;
    double tau = 0.1;
    double momentum = 0.5;
    std::size_t negatives = 32;
    Strategy strategy = Strategy::default_;
    AnchorMode anchor = AnchorMode::bank;
    bool contrast_first_layer = false;

    void validate() const {
        if (!(lambda >= 0)) throw ConfigError("distill.lambda must be >= 0");
        if (!(tau > 0)) throw ConfigError("distill.tau must be > 0");
        if (!(momentum >= 0 && momentum < 1)) throw ConfigError("distill.momentum must be in [0, 1)");
    }
};

struct LossBreakdown {
    double l_s2t = 0;
    double l_t2s = 0;
    double l_cont = 0;
    double l_dist = 0;
    double total = 0;
    double lambda = 0;
};

// Projection heads and memory banks of both sides. Heads are square and start
// at the identity.
template <class T>
struct DistillState {
    Tensor<T> student_proj;
    Tensor<T> teacher_proj;
    MemoryBank<T> student_bank;
    MemoryBank<T> teacher_bank;

    static DistillState create(std::size_t vocab_size, std::size_t d_model, T momentum) {
        DistillState s;
        s.student_proj = identity(d_model);
        s.teacher_proj = identity(d_model);
        s.student_bank = MemoryBank<T>(Side::student, vocab_size, d_model, momentum);
        s.teacher_bank = MemoryBank<T>(Side::teacher, vocab_size, d_model, momentum);
        return s;
    }

    static Tensor<T> identity(std::size_t d) {
        auto t = Tensor<T>::zeros({d, d}, true);
        for (std::size_t i = 0; i < d; ++i) t.data()[i * d + i] = T(1);
        return t;
    }
};

template <class T>
struct Objective {
    Var<T> total;
    LossBreakdown parts;
    // Current-step projections, fed to the banks after the optimizer step.
    Tensor<T> student_obs;
    Tensor<T> teacher_obs;
    bool has_obs = false;
};

// Rows of the shared candidate matrix: teacher projections, student
// projections, optional per-sequence means of both, then constant bank rows.
template <class T>
class CandidateLayout {
public:
    CandidateLayout(std::size_t n, std::size_t batch, bool with_sequences) : n_(n), batch_(batch), seq_(with_sequences) {}

    std::size_t positive(Side anchor, std::size_t i) const { return anchor == Side::student ? i : n_ + i; }

    std::size_t index(const Negative& g) {
        switch (g.source) {
            case Source::row: return (g.side == Side::teacher ? 0 : n_) + g.index;
            case Source::sequence:
                if (!seq_) throw ContractError("sequence negatives requested without sequence means");
                return 2 * n_ + (g.side == Side::teacher ? 0 : batch_) + g.index;
            case Source::bank: {
                auto key = std::make_pair(g.side, g.index);
                auto it = bank_slot_.find(key);
                if (it == bank_slot_.end()) {
                    it = bank_slot_.emplace(key, bank_rows_.size()).first;
                    bank_rows_.push_back(key);
                }
                return bank_offset() + it->second;
            }
        }
        throw ContractError("unknown negative source");
    }

    std::size_t bank_offset() const { return 2 * n_ + (seq_ ? 2 * batch_ : 0); }
    const std::vector<std::pair<Side, std::size_t>>& bank_rows() const { return bank_rows_; }

private:
    std::size_t n_, batch_;
    bool seq_;
    std::map<std::pair<Side, std::size_t>, std::size_t> bank_slot_;
    std::vector<std::pair<Side, std::size_t>> bank_rows_;
};

// Full distillation objective of one batch: lambda * (l_s2t + l_t2s)/2 + l_dist.
// The teacher side enters as constants; only the teacher projection head is
// trained through it. With lambda = 0 the contrastive branch is skipped.
template <class T, class Rng>
Objective<T> distill_objective(Tape<T>& tape, DistillState<T>& st, const DistillConfig& cfg, Var<T> student_hidden,
                               Var<T> student_logits, const Tensor<T>& teacher_hidden, const Tensor<T>& teacher_logits,
                               const BatchView& b, Rng& rng) {
    cfg.validate();
    Objective<T> obj;
    auto l_dist = logit_distill(student_logits, tape.constant(teacher_logits));
    obj.parts.lambda = cfg.lambda;
    obj.parts.l_dist = static_cast<double>(l_dist.value()[0]);
    if (cfg.lambda == 0) {
        obj.total = l_dist;
        obj.parts.total = obj.parts.l_dist;
        return obj;
    }
    const auto n = b.tokens.size();
    auto hs = ops::matmul(student_hidden, tape.param(st.student_proj));
    auto ht = ops::matmul(tape.constant(teacher_hidden), tape.param(st.teacher_proj));
    const bool banks = cfg.anchor == AnchorMode::bank;
    auto anchor_s = banks ? bank_anchors(hs, b.tokens, st.student_bank) : hs;
    auto anchor_t = banks ? bank_anchors(ht, b.tokens, st.teacher_bank) : ht;

    const auto plan = plan_negatives<T>(cfg.strategy, b, cfg.negatives, rng, st.student_bank, st.teacher_bank, banks);
    const bool with_seq = cfg.strategy == Strategy::in_batch;
    CandidateLayout<T> layout(n, b.batch, with_seq);
    auto build_sets = [&](const NegativeSet& negs, Side anchor) {
        CandidateSets sets(n);
        for (std::size_t i = 0; i < n; ++i) {
            sets[i].push_back(layout.positive(anchor, i));
            for (const auto& g : negs[i]) sets[i].push_back(layout.index(g));
        }
        return sets;
    };
    const auto sets_s2t = build_sets(plan.s2t, Side::student);
    const auto sets_t2s = build_sets(plan.t2s, Side::teacher);

    auto cand = ops::concat_rows(ht, hs);
    if (with_seq) cand = ops::concat_rows(cand, ops::concat_rows(ops::segment_mean(ht, b.seq), ops::segment_mean(hs, b.seq)));
    if (!layout.bank_rows().empty()) {
        const auto d = st.student_bank.dim();
        auto rows = Tensor<T>::zeros({layout.bank_rows().size(), d});
        for (std::size_t r = 0; r < layout.bank_rows().size(); ++r) {
            const auto& [side, id] = layout.bank_rows()[r];
            auto src = (side == Side::student ? st.student_bank : st.teacher_bank).row(id);
            std::copy(src.begin(), src.end(), rows.row(r).begin());
        }
        cand = ops::concat_rows(cand, tape.constant(std::move(rows)));
    }

    const T tau = static_cast<T>(cfg.tau);
    auto l_s2t = contrastive(anchor_s, cand, sets_s2t, tau);
    auto l_t2s = contrastive(anchor_t, cand, sets_t2s, tau);
    auto l_cont = contrastive_total(l_s2t, l_t2s);
    obj.total = total_loss(l_cont, l_dist, static_cast<T>(cfg.lambda));
    obj.parts.l_s2t = static_cast<double>(l_s2t.value()[0]);
    obj.parts.l_t2s = static_cast<double>(l_t2s.value()[0]);
    obj.parts.l_cont = static_cast<double>(l_cont.value()[0]);
    obj.parts.total = static_cast<double>(obj.total.value()[0]);
    obj.student_obs = hs.value();
    obj.teacher_obs = ht.value();
    obj.has_obs = true;
    return obj;
}

template <class T>
void update_banks(DistillState<T>& st, const Objective<T>& obj, std::span<const std::int32_t> ids) {
    if (!obj.has_obs) return;
    st.student_bank.update(ids, obj.student_obs);
    st.teacher_bank.update(ids, obj.teacher_obs);
}

}  // namespace qgpt::distill
