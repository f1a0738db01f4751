#pragma once

#include <cmath>
#include <cstdint>

#include "bens/errors.hpp"
#include "bens/tensor.hpp"

namespace bens {

namespace detail {
template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (a.shape() != b.shape()) throw ShapeError(std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail

/// Nesterov SGD with coupled weight decay:
///   g += wd*p;  v = mu*v - lr*g;  p += mu*v - lr*g
template <class T>
void sgd_nesterov_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity, double lr, double momentum,
                       double weight_decay) {
    detail::require_same_shape(param, grad, "sgd step gradient");
    detail::require_same_shape(param, velocity, "sgd step velocity");
    auto p = param.data();
    auto g = grad.data();
    auto v = velocity.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]) + weight_decay * static_cast<double>(p[i]);
        const double vi = momentum * static_cast<double>(v[i]) - lr * gi;
        v[i] = static_cast<T>(vi);
        p[i] = static_cast<T>(static_cast<double>(p[i]) + momentum * vi - lr * gi);
    }
}

struct AdamConfig {
    double step = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <class T>
struct AdamState {
    Tensor<T> m, v;
    std::uint64_t t = 0;

    AdamState() = default;
    explicit AdamState(const Shape& shape) : m(shape, T(0)), v(shape, T(0)) {}
};

/// Bias-corrected Adam update; `step` overrides cfg.step (for scheduled decay).
template <class T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state, const AdamConfig& cfg, double step) {
    detail::require_same_shape(param, grad, "adam step gradient");
    detail::require_same_shape(param, state.m, "adam step moments");
    ++state.t;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    auto p = param.data();
    auto g = grad.data();
    auto m = state.m.data();
    auto v = state.v.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i];
        const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        p[i] = static_cast<T>(p[i] - step * (mi / c1) / (std::sqrt(vi / c2) + cfg.epsilon));
    }
}

template <class T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state, const AdamConfig& cfg = {}) {
    adam_step(param, grad, state, cfg, cfg.step);
}

}  // namespace bens
