#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "qgpt/core/error.hpp"
#include "qgpt/core/tensor.hpp"

namespace qgpt::distill {

enum class Side { student, teacher };

inline const char* to_string(Side s) { return s == Side::student ? "student" : "teacher"; }

// Exponentially smoothed token representations, one row per vocabulary id.
template <class T>
class MemoryBank {
public:
    MemoryBank() = default;
    MemoryBank(Side side, std::size_t vocab_size, std::size_t dim, T momentum)
        : side_(side), vocab_(vocab_size), dim_(dim), m_(momentum), rows_(vocab_size * dim, T(0)), init_(vocab_size, 0) {
        if (!(momentum >= 0 && momentum < 1)) throw ContractError("bank momentum must be in [0, 1)");
        if (vocab_size == 0 || dim == 0) throw DimensionError("bank extents must be positive");
    }

    Side side() const { return side_; }
    std::size_t vocab_size() const { return vocab_; }
    std::size_t dim() const { return dim_; }
    T momentum() const { return m_; }

    bool initialized(std::size_t id) const { return init_.at(id) != 0; }

    std::size_t initialized_count() const {
        std::size_t n = 0;
        for (auto f : init_) n += f;
        return n;
    }

    std::span<const T> row(std::size_t id) const {
        check_id(id);
        return std::span<const T>(rows_).subspan(id * dim_, dim_);
    }

    void set_row(std::size_t id, std::span<const T> values) {
        check_id(id);
        if (values.size() != dim_) throw DimensionError("bank row has " + std::to_string(dim_) + " entries");
        std::copy(values.begin(), values.end(), rows_.begin() + static_cast<std::ptrdiff_t>(id * dim_));
        init_[id] = 1;
    }

    // Occurrences of one id are averaged first; an uninitialized row takes the
    // average directly, otherwise row = m * row + (1 - m) * average.
    void update(std::span<const std::int32_t> ids, const Tensor<T>& obs) {
        if (obs.ndim() != 2 || obs.rows() != ids.size() || obs.cols() != dim_) {
            throw DimensionError("bank update: observations " + shape_str(obs.shape()) + " for " +
                                 std::to_string(ids.size()) + " ids of width " + std::to_string(dim_));
        }
        std::map<std::int32_t, std::vector<std::size_t>> where;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            check_id(static_cast<std::size_t>(ids[i]));
            where[ids[i]].push_back(i);
        }
        std::vector<T> avg(dim_);
        for (const auto& [id, pos] : where) {
            std::fill(avg.begin(), avg.end(), T(0));
            for (auto p : pos)
                for (std::size_t c = 0; c < dim_; ++c) avg[c] += obs.at(p, c);
            if (pos.size() > 1) {
                const T inv = T(1) / static_cast<T>(pos.size());
                for (auto& v : avg) v *= inv;
            }
            const auto r = static_cast<std::size_t>(id);
            T* dst = rows_.data() + r * dim_;
            if (!init_[r]) {
                std::copy(avg.begin(), avg.end(), dst);
                init_[r] = 1;
            } else {
                for (std::size_t c = 0; c < dim_; ++c) dst[c] = m_ * dst[c] + (T(1) - m_) * avg[c];
            }
        }
    }

private:
    void check_id(std::size_t id) const {
        if (id >= vocab_) throw IndexError("bank id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab_));
    }

    Side side_ = Side::student;
    std::size_t vocab_ = 0;
    std::size_t dim_ = 0;
    T m_ = T(0.5);
    std::vector<T> rows_;
    std::vector<std::uint8_t> init_;
};

}  // namespace qgpt::distill
