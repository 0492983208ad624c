#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "qgpt/core/tape.hpp"
#include "qgpt/core/tensor.hpp"

namespace qgpt::check {

using Loss = std::function<Var<double>(Tape<double>&)>;

inline Tensor<double> randn(Shape shape, std::uint64_t seed, double sd = 1.0, bool requires_grad = true) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, sd);
    auto t = Tensor<double>::zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = nd(rng);
    return t;
}

inline double eval_loss(const Loss& f) {
    Tape<double> tape(false);
    return f(tape).value()[0];
}

// Analytic gradient of f w.r.t. each tensor, via one backward pass.
inline std::vector<std::vector<double>> analytic_grads(const Loss& f, const std::vector<Tensor<double>*>& params) {
    for (auto* p : params) p->zero_grad();
    Tape<double> tape;
    tape.backward(f(tape));
    std::vector<std::vector<double>> out;
    for (auto* p : params) {
        if (p->has_grad()) out.emplace_back(p->grad().begin(), p->grad().end());
        else out.emplace_back(p->numel(), 0.0);
    }
    return out;
}

inline std::vector<std::vector<double>> numeric_grads(const Loss& f, const std::vector<Tensor<double>*>& params,
                                                      double eps = 1e-4) {
    std::vector<std::vector<double>> out;
    for (auto* p : params) {
        std::vector<double> g(p->numel());
        for (std::size_t i = 0; i < p->numel(); ++i) {
            const double x = p->data()[i];
            p->data()[i] = x + eps;
            const double up = eval_loss(f);
            p->data()[i] = x - eps;
            const double dn = eval_loss(f);
            p->data()[i] = x;
            g[i] = (up - dn) / (2 * eps);
        }
        out.push_back(std::move(g));
    }
    return out;
}

// ||a - n|| / max(||a||, ||n||) over all entries; 0 when both vanish.
inline double relative_error(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& n) {
    double diff = 0, na = 0, nn = 0;
    for (std::size_t t = 0; t < a.size(); ++t) {
        for (std::size_t i = 0; i < a[t].size(); ++i) {
            diff += (a[t][i] - n[t][i]) * (a[t][i] - n[t][i]);
            na += a[t][i] * a[t][i];
            nn += n[t][i] * n[t][i];
        }
    }
    const double den = std::sqrt(std::max(na, nn));
    return den == 0 ? 0 : std::sqrt(diff) / den;
}

inline double gradcheck(const Loss& f, const std::vector<Tensor<double>*>& params, double eps = 1e-4) {
    return relative_error(analytic_grads(f, params), numeric_grads(f, params, eps));
}

}  // namespace qgpt::check
