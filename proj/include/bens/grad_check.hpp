#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "bens/autodiff.hpp"

namespace bens {

/// Closure under test: builds a scalar from the given input variables on `tape`.
using GradCheckFn = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_element = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Compares reverse-mode gradients against central differences for every element of
/// every input. Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
/// near-zero gradients from amplifying finite-difference noise. With `max_probes` > 0
/// only that many evenly spaced elements per input are probed (large networks).
inline GradCheckResult grad_check_detailed(const GradCheckFn& fn, std::vector<Tensor<double>> inputs,
                                           double epsilon = 1e-5, double floor = 1e-3, std::size_t max_probes = 0) {
    std::vector<Tensor<double>> analytic;
    {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (const auto& in : inputs) vars.push_back(tape.leaf(in, true));
        auto out = fn(tape, vars);
        auto grads = tape.backward(out);
        for (const auto& v : vars) analytic.push_back(grads.of(v));
    }
    auto evaluate = [&]() {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (const auto& in : inputs) vars.push_back(tape.leaf(in, false));
        return fn(tape, vars).value().item();
    };

    GradCheckResult result;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const std::size_t n = inputs[i].numel();
        const std::size_t step = max_probes && n > max_probes ? (n + max_probes - 1) / max_probes : 1;
        for (std::size_t e = 0; e < n; e += step) {
            const double orig = inputs[i][e];
            inputs[i][e] = orig + epsilon;
            const double up = evaluate();
            inputs[i][e] = orig - epsilon;
            const double down = evaluate();
            inputs[i][e] = orig;
            const double numeric = (up - down) / (2.0 * epsilon);
            const double a = analytic[i][e];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            if (err > result.max_relative_error) result = {err, i, e, a, numeric};
        }
    }
    return result;
}

inline double grad_check(const GradCheckFn& fn, std::vector<Tensor<double>> inputs, double epsilon = 1e-5,
                         double floor = 1e-3, std::size_t max_probes = 0) {
    return grad_check_detailed(fn, std::move(inputs), epsilon, floor, max_probes).max_relative_error;
}

}  // namespace bens
