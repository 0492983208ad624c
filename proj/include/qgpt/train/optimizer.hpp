#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "qgpt/core/error.hpp"
#include "qgpt/core/tensor.hpp"

namespace qgpt::train {

// lr0 * (1 - step / total), defined for 0 <= step <= total.
inline double lr_at(std::size_t step, std::size_t total_steps, double lr0) {
    if (step > total_steps) {
        throw ContractError("lr_at: step " + std::to_string(step) + " beyond schedule of " + std::to_string(total_steps));
    }
    if (total_steps == 0) return lr0;
    return lr0 * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <class T>
struct ParamGroup {
    std::string name;
    double lr0 = 0;
    double weight_decay = 0;
    std::vector<Tensor<T>*> params;
    std::vector<std::string> names;
};

// Adam with decoupled weight decay, one base learning rate per group.
template <class T>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    std::size_t add_group(std::string name, double lr0, double weight_decay) {
        if (!(lr0 > 0)) throw ConfigError("learning rate of group '" + name + "' must be > 0");
        groups_.push_back(ParamGroup<T>{std::move(name), lr0, weight_decay, {}, {}});
        state_.emplace_back();
        return groups_.size() - 1;
    }

    void add_param(std::size_t group, Tensor<T>& p, std::string name) {
        if (!p.requires_grad()) throw ContractError("optimizer parameter '" + name + "' does not require grad");
        groups_.at(group).params.push_back(&p);
        groups_.at(group).names.push_back(std::move(name));
        state_.at(group).push_back(Moments{std::vector<double>(p.numel(), 0.0), std::vector<double>(p.numel(), 0.0)});
    }

    const std::vector<ParamGroup<T>>& groups() const { return groups_; }
    std::size_t steps_taken() const { return t_; }

    void zero_grad() {
        for (auto& g : groups_)
            for (auto* p : g.params) p->zero_grad();
    }

    // Global L2 norm of all gradients.
    double grad_norm() const {
        double s = 0;
        for (const auto& g : groups_)
            for (const auto* p : g.params)
                if (p->has_grad())
                    for (T v : p->grad()) s += static_cast<double>(v) * static_cast<double>(v);
        return std::sqrt(s);
    }

    void scale_grads(double factor) {
        for (auto& g : groups_)
            for (auto* p : g.params)
                if (p->has_grad())
                    for (T& v : p->grad()) v = static_cast<T>(static_cast<double>(v) * factor);
    }

    // One update; lrs[i] is the current learning rate of group i.
    void step(const std::vector<double>& lrs) {
        if (lrs.size() != groups_.size()) throw ContractError("AdamW::step: one learning rate per group required");
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
            auto& g = groups_[gi];
            const double lr = lrs[gi];
            for (std::size_t pi = 0; pi < g.params.size(); ++pi) {
                auto* p = g.params[pi];
                if (!p->has_grad()) continue;
                auto& mo = state_[gi][pi];
                auto data = p->data();
                auto grad = p->grad();
                for (std::size_t i = 0; i < data.size(); ++i) {
                    const double gr = static_cast<double>(grad[i]);
                    mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * gr;
                    mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * gr * gr;
                    const double mh = mo.m[i] / bc1;
                    const double vh = mo.v[i] / bc2;
                    double x = static_cast<double>(data[i]);
                    x -= lr * g.weight_decay * x;
                    x -= lr * mh / (std::sqrt(vh) + cfg_.eps);
                    data[i] = static_cast<T>(x);
                }
            }
        }
    }

private:
    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
    };

    AdamWConfig cfg_;
    std::vector<ParamGroup<T>> groups_;
    std::vector<std::vector<Moments>> state_;
    std::size_t t_ = 0;
};

}  // namespace qgpt::train
