#pragma once

// Central finite-difference oracle used by the gradient tests. It only
// evaluates the scalar function; it never looks at the tape.

#include "bitseg/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace bitseg::testing {

using ScalarFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

struct GradCheckResult {
    double max_rel_error = 0.0; // worst per-tensor ||analytic - numeric|| / max(norms)
    double max_abs_error = 0.0;
};

inline std::vector<Tensor<double>> numeric_grads(const ScalarFn& f, const std::vector<Tensor<double>>& inputs, double h = 1e-3)
{
    NoGradGuard guard;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs)
        vars.emplace_back(t, false);
    std::vector<Tensor<double>> out;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        Tensor<double> g(inputs[i].shape());
        for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
            const double orig = vars[i].value()[j];
            vars[i].mutable_value()[j] = orig + h;
            const double fp = f(vars).value().item();
            vars[i].mutable_value()[j] = orig - h;
            const double fm = f(vars).value().item();
            vars[i].mutable_value()[j] = orig;
            g[j] = (fp - fm) / (2 * h);
        }
        out.push_back(std::move(g));
    }
    return out;
}

inline std::vector<Tensor<double>> analytic_grads(const ScalarFn& f, const std::vector<Tensor<double>>& inputs)
{
    std::vector<Var<double>> vars;
    for (const auto& t : inputs)
        vars.emplace_back(t, true);
    backward(f(vars));
    std::vector<Tensor<double>> out;
    for (const auto& v : vars)
        out.push_back(v.has_grad() ? v.grad() : Tensor<double>(v.shape()));
    return out;
}

inline GradCheckResult compare_grads(const std::vector<Tensor<double>>& a, const std::vector<Tensor<double>>& n)
{
    GradCheckResult r;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double diff = 0, na = 0, nn = 0;
        for (std::size_t j = 0; j < a[i].numel(); ++j) {
            const double d = a[i][j] - n[i][j];
            diff += d * d;
            na += a[i][j] * a[i][j];
            nn += n[i][j] * n[i][j];
            r.max_abs_error = std::max(r.max_abs_error, std::abs(d));
        }
        const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-10});
        r.max_rel_error = std::max(r.max_rel_error, std::sqrt(diff) / denom);
    }
    return r;
}

inline GradCheckResult gradcheck(const ScalarFn& f, const std::vector<Tensor<double>>& inputs, double h = 1e-3)
{
    return compare_grads(analytic_grads(f, inputs), numeric_grads(f, inputs, h));
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0)
{
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data())
        v = u(rng);
    return t;
}

} // namespace bitseg::testing
