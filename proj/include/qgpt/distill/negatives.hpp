#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qgpt/core/error.hpp"
#include "qgpt/distill/memory_bank.hpp"

namespace qgpt::distill {

enum class Strategy { default_, fp_quan, quan_only, global, in_batch };

inline constexpr std::array<std::string_view, 5> kStrategyNames{"default", "fp+quan", "quan-only", "global", "in-batch"};

inline std::string_view to_string(Strategy s) { return kStrategyNames[static_cast<std::size_t>(s)]; }

inline Strategy parse_strategy(std::string_view name) {
    for (std::size_t i = 0; i < kStrategyNames.size(); ++i)
        if (kStrategyNames[i] == name) return static_cast<Strategy>(i);
    std::string valid;
    for (auto n : kStrategyNames) valid += (valid.empty() ? "" : ", ") + std::string(n);
    throw ConfigError("unknown negative-sampling strategy '" + std::string(name) + "' (valid: " + valid + ")");
}

// Where a negative representation is read from.
enum class Source {
    bank,      // smoothed bank row; index is a vocabulary id
    row,       // current-step projection; index is a flattened position
    sequence,  // mean of one sequence's current-step projections; index is the sequence
};

struct Negative {
    Side side = Side::teacher;
    Source source = Source::bank;
    std::size_t index = 0;

    bool operator==(const Negative&) const = default;
    auto operator<=>(const Negative&) const = default;
};

// Negatives of every anchor position for one loss direction.
using NegativeSet = std::vector<std::vector<Negative>>;

struct NegativePlan {
    NegativeSet s2t;  // student anchors against teacher positives
    NegativeSet t2s;
};

struct BatchView {
    std::span<const std::int32_t> tokens;  // batch * seq ids, sequence-major
    std::size_t batch = 1;
    std::size_t seq = 1;
};

namespace detail {

inline Side counter(Side anchor) { return anchor == Side::student ? Side::teacher : Side::student; }

// Uniform sample of `count` elements without replacement, returned sorted so
// the summation order of the loss does not depend on the draw order.
template <class V, class Rng>
std::vector<V> sample_subset(std::vector<V> pool, std::size_t count, Rng& rng) {
    if (pool.size() <= count) {
        std::sort(pool.begin(), pool.end());
        return pool;
    }
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> ud(i, idx.size() - 1);
        std::swap(idx[i], idx[ud(rng)]);
    }
    idx.resize(count);
    std::vector<V> out;
    out.reserve(count);
    for (auto i : idx) out.push_back(pool[i]);
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace detail

// Builds the negatives of each anchor. With banks in use (use_banks), bank
// rows stand in for other tokens and only initialized rows are served;
// otherwise the current-step projections of the other positions are used.
// Negatives never carry the anchor's own token id.
template <class T, class Rng>
NegativeSet sample_negatives(Strategy strategy, Side anchor_side, const BatchView& b, std::size_t count, Rng& rng,
                             const MemoryBank<T>& student_bank, const MemoryBank<T>& teacher_bank, bool use_banks) {
    if (b.tokens.size() != b.batch * b.seq) throw DimensionError("sample_negatives: token count != batch * seq");
    const Side ctr = detail::counter(anchor_side);
    auto bank_of = [&](Side s) -> const MemoryBank<T>& { return s == Side::student ? student_bank : teacher_bank; };
    NegativeSet out(b.tokens.size());

    for (std::size_t s = 0; s < b.batch; ++s) {
        // First position of each distinct id in this sequence.
        std::vector<std::pair<std::int32_t, std::size_t>> firsts;
        for (std::size_t p = 0; p < b.seq; ++p) {
            const auto gp = s * b.seq + p;
            const auto id = b.tokens[gp];
            if (std::none_of(firsts.begin(), firsts.end(), [id](const auto& f) { return f.first == id; })) {
                firsts.emplace_back(id, gp);
            }
        }
        for (std::size_t p = 0; p < b.seq; ++p) {
            const auto gp = s * b.seq + p;
            const auto own = b.tokens[gp];
            std::vector<Negative> pool;
            auto add_side = [&](Side side) {
                for (const auto& [id, first] : firsts) {
                    if (id == own) continue;
                    if (use_banks) {
                        if (bank_of(side).initialized(static_cast<std::size_t>(id))) pool.push_back({side, Source::bank, static_cast<std::size_t>(id)});
                    } else {
                        pool.push_back({side, Source::row, first});
                    }
                }
            };
            switch (strategy) {
                case Strategy::default_: add_side(ctr); break;
                case Strategy::fp_quan:
                    add_side(Side::teacher);
                    add_side(Side::student);
                    break;
                case Strategy::quan_only: add_side(Side::student); break;
                case Strategy::global: {
                    const auto& bank = bank_of(ctr);
                    for (std::size_t id = 0; id < bank.vocab_size(); ++id) {
                        if (static_cast<std::int32_t>(id) != own && bank.initialized(id)) pool.push_back({ctr, Source::bank, id});
                    }
                    break;
                }
                case Strategy::in_batch:
                    for (std::size_t o = 0; o < b.batch; ++o)
                        if (o != s) pool.push_back({ctr, Source::sequence, o});
                    break;
            }
            out[gp] = detail::sample_subset(std::move(pool), count, rng);
        }
    }
    return out;
}

template <class T, class Rng>
NegativePlan plan_negatives(Strategy strategy, const BatchView& b, std::size_t count, Rng& rng,
                            const MemoryBank<T>& student_bank, const MemoryBank<T>& teacher_bank, bool use_banks) {
    NegativePlan plan;
    plan.s2t = sample_negatives<T>(strategy, Side::student, b, count, rng, student_bank, teacher_bank, use_banks);
    plan.t2s = sample_negatives<T>(strategy, Side::teacher, b, count, rng, student_bank, teacher_bank, use_banks);
    return plan;
}

}  // namespace qgpt::distill
