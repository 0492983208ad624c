#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "qgpt/core/error.hpp"
#include "qgpt/core/tensor.hpp"

namespace qgpt {

template <class T>
class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return tape->value(id); }
    const Shape& shape() const { return value().shape(); }
    std::size_t numel() const { return value().numel(); }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    bool requires_grad() const { return tape->requires_grad(id); }
};

// Records operations in execution order and replays them in exact reverse order
// during backward. Gradient rules are closures stored per node; a rule registered
// for an operation kind replaces the closure of every node of that kind.
template <class T>
class Tape {
public:
    // Receives the tape and the node id; reads upstream(id) and accumulates into
    // accum(input) for each input.
    using Rule = std::function<void(Tape&, std::size_t)>;

    struct Node {
        std::string kind;
        Tensor<T> value;
        std::vector<T> grad;
        std::vector<std::size_t> inputs;
        bool requires_grad = false;
        Rule backward;
        Tensor<T>* param = nullptr;
        std::shared_ptr<const void> ctx;
    };

    explicit Tape(bool recording = true) : recording_(recording) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return recording_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    // Leaf bound to a persistent tensor; backward accumulates into p's gradient
    // buffer when p requires grad.
    Var<T> param(Tensor<T>& p) {
        Node n;
        n.kind = "param";
        n.value = Tensor<T>(p.shape(), p.vec());
        n.requires_grad = recording_ && p.requires_grad();
        n.param = n.requires_grad ? &p : nullptr;
        return append(std::move(n));
    }

    Var<T> constant(Tensor<T> v) {
        Node n;
        n.kind = "constant";
        n.value = std::move(v);
        return append(std::move(n));
    }

    // Records an operation result. The rule is dropped when no input needs a gradient.
    Var<T> push(std::string kind, Tensor<T> value, std::vector<std::size_t> inputs, Rule backward,
                std::shared_ptr<const void> ctx = nullptr) {
        if (!value.all_finite()) {
            throw NonFiniteError("non-finite value produced by '" + kind + "' (node " +
                                 std::to_string(nodes_.size()) + ")");
        }
        Node n;
        n.kind = std::move(kind);
        n.value = std::move(value);
        bool needs = false;
        if (recording_) {
            for (auto in : inputs) needs = needs || nodes_.at(in).requires_grad;
        }
        n.requires_grad = needs;
        if (needs) {
            n.inputs = std::move(inputs);
            n.backward = std::move(backward);
            n.ctx = std::move(ctx);
        }
        return append(std::move(n));
    }

    void register_rule(const std::string& kind, Rule rule) { rules_[kind] = std::move(rule); }
    void clear_rule(const std::string& kind) { rules_.erase(kind); }

    const Node& node(std::size_t id) const { return nodes_.at(id); }
    const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    template <class Ctx>
    const Ctx& ctx(std::size_t id) const {
        return *static_cast<const Ctx*>(nodes_.at(id).ctx.get());
    }

    // Upstream gradient of a node during backward.
    std::span<const T> upstream(std::size_t id) const { return nodes_[id].grad; }

    // Gradient buffer of an input; nullptr when the input does not require grad.
    T* accum(std::size_t id) {
        auto& n = nodes_[id];
        if (!n.requires_grad) return nullptr;
        if (n.grad.empty()) n.grad.assign(n.value.numel(), T(0));
        return n.grad.data();
    }

    // Gradient of a node as left by the last backward call (empty if untouched).
    std::span<const T> grad(Var<T> v) const { return nodes_.at(v.id).grad; }

    void backward(Var<T> loss) {
        if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
        if (value(loss.id).numel() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " + shape_str(value(loss.id).shape()));
        }
        for (auto& n : nodes_) n.grad.clear();
        if (!nodes_[loss.id].requires_grad) return;
        nodes_[loss.id].grad.assign(1, T(1));
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.param != nullptr) {
                auto g = n.param->grad_buffer();
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
                continue;
            }
            if (auto it = rules_.find(n.kind); it != rules_.end()) {
                it->second(*this, i);
            } else if (n.backward) {
                n.backward(*this, i);
            }
        }
    }

private:
    Var<T> append(Node n) {
        nodes_.push_back(std::move(n));
        return Var<T>{this, nodes_.size() - 1};
    }

    bool recording_;
    std::vector<Node> nodes_;
    std::unordered_map<std::string, Rule> rules_;
};

}  // namespace qgpt
