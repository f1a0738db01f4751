#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <map>
#include <vector>

#include "bens/errors.hpp"
#include "bens/rng.hpp"
#include "bens/tensor.hpp"

namespace bens {

struct TsneConfig {
    double perplexity = 30.0;
    int iterations = 1000;
    double learning_rate = 200.0;
    double exaggeration = 12.0;
    int exaggeration_iterations = 250;
    double initial_momentum = 0.5;
    double final_momentum = 0.8;
    int momentum_switch = 250;
    double min_gain = 0.01;
    std::uint64_t seed = 0;
};

struct Affinities {
    Tensor<double> joint;        // symmetric P, sums to 1
    Tensor<double> conditional;  // row-stochastic P(j|i)
    std::vector<double> beta;    // 1 / (2 sigma_i^2)
    std::vector<double> row_perplexity;
};

namespace detail {

inline Tensor<double> squared_distances(const Tensor<double>& X) {
    const std::size_t n = X.dim(0), F = X.numel() / n;
    Tensor<double> D(Shape{n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double acc = 0;
            for (std::size_t f = 0; f < F; ++f) {
                const double d = X[i * F + f] - X[j * F + f];
                acc += d * d;
            }
            D[i * n + j] = D[j * n + i] = acc;
        }
    return D;
}

}  // namespace detail

/// Gaussian conditional affinities with per-row bandwidth found by bisection so that each
/// row's entropy matches log(perplexity); symmetrized as (P + P^T) / 2n.
inline Affinities pairwise_affinities(const Tensor<double>& X, double perplexity) {
    if (X.rank() != 2) throw ShapeError("tsne features must be [n,F], got " + shape_str(X.shape()));
    const std::size_t n = X.dim(0);
    if (n < 4) throw ConfigError("tsne needs at least 4 points, got " + std::to_string(n));
    for (double v : X.data())
        if (!std::isfinite(v)) throw ConfigError("tsne features contain non-finite values");
    if (perplexity <= 1.0 || perplexity >= static_cast<double>(n - 1) / 3.0)
        throw ConfigError("perplexity " + std::to_string(perplexity) + " outside (1, " +
                          std::to_string(static_cast<double>(n - 1) / 3.0) + ") for " + std::to_string(n) + " points");
    const auto D = detail::squared_distances(X);
    if (*std::max_element(D.data().begin(), D.data().end()) <= 0.0)
        throw ConfigError("tsne features are all identical");

    Affinities a;
    a.conditional = Tensor<double>(Shape{n, n}, 0.0);
    a.beta.assign(n, 1.0);
    a.row_perplexity.assign(n, 0.0);
    const double target = std::log(perplexity);
    std::vector<double> row(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* d = &D[i * n];
        double dmin = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) dmin = std::min(dmin, d[j]);
        double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
        double H = 0;
        auto evaluate = [&](double b) {
            double sum = 0, weighted = 0;
            for (std::size_t j = 0; j < n; ++j) {
                row[j] = j == i ? 0.0 : std::exp(-b * (d[j] - dmin));
                sum += row[j];
                weighted += row[j] * (d[j] - dmin);
            }
            for (auto& r : row) r /= sum;
            return std::log(sum) + b * weighted / sum;
        };
        // the scale of distances is arbitrary, so start from the mean gap
        double mean_gap = 0;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) mean_gap += d[j] - dmin;
        mean_gap /= static_cast<double>(n - 1);
        if (mean_gap > 0) beta = 1.0 / mean_gap;
        for (int it = 0; it < 200; ++it) {
            H = evaluate(beta);
            const double diff = H - target;
            if (std::abs(diff) < 1e-10) break;
            if (diff > 0) {
                lo = beta;
                beta = std::isinf(hi) ? beta * 2 : (beta + hi) / 2;
            } else {
                hi = beta;
                beta = (beta + lo) / 2;
            }
        }
        H = evaluate(beta);
        a.beta[i] = beta;
        a.row_perplexity[i] = std::exp(H);
        std::copy(row.begin(), row.end(), &a.conditional[i * n]);
    }
    a.joint = Tensor<double>(Shape{n, n}, 0.0);
    const double denom = 2.0 * static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            a.joint[i * n + j] = (a.conditional[i * n + j] + a.conditional[j * n + i]) / denom;
    return a;
}

struct TsneResult {
    Tensor<double> coordinates;  // [n,2]
    std::vector<double> kl;      // KL(P || Q) after every iteration
    Affinities affinities;
};

namespace detail {

// Row-content hash so the initial position of a point does not depend on where the row
// sits in the input.
inline std::uint64_t row_key(const double* row, std::size_t F) {
    std::uint64_t h = 0x9E3779B97F4A7C15ULL;
    for (std::size_t f = 0; f < F; ++f) {
        std::uint64_t bits;
        std::memcpy(&bits, &row[f], sizeof bits);
        h = splitmix64(h ^ bits);
    }
    return h;
}

inline double kl_divergence(const Tensor<double>& P, const Tensor<double>& Y) {
    const std::size_t n = Y.dim(0);
    double z = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) {
                const double dx = Y[i * 2] - Y[j * 2], dy = Y[i * 2 + 1] - Y[j * 2 + 1];
                z += 1.0 / (1.0 + dx * dx + dy * dy);
            }
    double kl = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double p = P[i * n + j];
            if (p <= 0) continue;
            const double dx = Y[i * 2] - Y[j * 2], dy = Y[i * 2 + 1] - Y[j * 2 + 1];
            const double q = std::max(1.0 / (1.0 + dx * dx + dy * dy) / z, 1e-300);
            kl += p * std::log(p / q);
        }
    return kl;
}

}  // namespace detail

/// Exact 2-D tSNE: gradient descent with momentum and per-coordinate gains on
/// KL(P || Q), Student-t Q, early exaggeration for the first iterations.
///
/// The descent is chaotic enough that summation order alone changes the result, so rows
/// are processed in lexicographic order of their content and mapped back afterwards;
/// permuting the input rows then permutes the output rows exactly.
inline TsneResult tsne(const Tensor<double>& X, const TsneConfig& cfg = {}) {
    if (X.rank() != 2) throw ShapeError("tsne features must be [n,F], got " + shape_str(X.shape()));
    const std::size_t n = X.dim(0), F = X.numel() / n;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::lexicographical_compare(&X[a * F], &X[a * F] + F, &X[b * F], &X[b * F] + F);
    });
    Tensor<double> Xc(Shape{n, F});
    for (std::size_t i = 0; i < n; ++i) std::copy_n(&X[order[i] * F], F, &Xc[i * F]);

    TsneResult r;
    auto aff = pairwise_affinities(Xc, cfg.perplexity);
    const auto& P = aff.joint;

    Tensor<double> Y(Shape{n, 2});
    std::map<std::uint64_t, std::uint64_t> seen;
    for (std::size_t i = 0; i < n; ++i) {
        const auto key = detail::row_key(&Xc[i * F], F);
        RngStream rng(cfg.seed, stream_id({key, seen[key]++}));
        Y[i * 2] = rng.normal() * 1e-4;
        Y[i * 2 + 1] = rng.normal() * 1e-4;
    }
    auto center = [&] {
        double mx = 0, my = 0;
        for (std::size_t i = 0; i < n; ++i) {
            mx += Y[i * 2];
            my += Y[i * 2 + 1];
        }
        mx /= static_cast<double>(n);
        my /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            Y[i * 2] -= mx;
            Y[i * 2 + 1] -= my;
        }
    };
    center();

    std::vector<double> grad(2 * n), update(2 * n, 0.0), gains(2 * n, 1.0), num(n * n);
    for (int it = 0; it < cfg.iterations; ++it) {
        const double exag = it < cfg.exaggeration_iterations ? cfg.exaggeration : 1.0;
        const double momentum = it < cfg.momentum_switch ? cfg.initial_momentum : cfg.final_momentum;
        double z = 0;
        for (std::size_t i = 0; i < n; ++i) {
            num[i * n + i] = 0;
            for (std::size_t j = i + 1; j < n; ++j) {
                const double dx = Y[i * 2] - Y[j * 2], dy = Y[i * 2 + 1] - Y[j * 2 + 1];
                const double w = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = num[j * n + i] = w;
                z += 2 * w;
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            double gx = 0, gy = 0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double w = num[i * n + j];
                const double mult = (exag * P[i * n + j] - w / z) * w;
                gx += mult * (Y[i * 2] - Y[j * 2]);
                gy += mult * (Y[i * 2 + 1] - Y[j * 2 + 1]);
            }
            grad[i * 2] = 4 * gx;
            grad[i * 2 + 1] = 4 * gy;
        }
        for (std::size_t e = 0; e < 2 * n; ++e) {
            const bool same_sign = (grad[e] > 0) == (update[e] > 0);
            gains[e] = same_sign ? gains[e] * 0.8 : gains[e] + 0.2;
            gains[e] = std::max(gains[e], cfg.min_gain);
            update[e] = momentum * update[e] - cfg.learning_rate * gains[e] * grad[e];
            Y[e] += update[e];
        }
        center();
        r.kl.push_back(detail::kl_divergence(P, Y));
    }

    r.coordinates = Tensor<double>(Shape{n, 2});
    r.affinities.joint = Tensor<double>(Shape{n, n});
    r.affinities.conditional = Tensor<double>(Shape{n, n});
    r.affinities.beta.resize(n);
    r.affinities.row_perplexity.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t oi = order[i];
        r.coordinates[oi * 2] = Y[i * 2];
        r.coordinates[oi * 2 + 1] = Y[i * 2 + 1];
        r.affinities.beta[oi] = aff.beta[i];
        r.affinities.row_perplexity[oi] = aff.row_perplexity[i];
        for (std::size_t j = 0; j < n; ++j) {
            r.affinities.joint[oi * n + order[j]] = aff.joint[i * n + j];
            r.affinities.conditional[oi * n + order[j]] = aff.conditional[i * n + j];
        }
    }
    return r;
}

/// Mean silhouette of a labelled 2-D (or any-D) embedding under Euclidean distance.
inline double silhouette(const Tensor<double>& Y, const std::vector<int>& labels) {
    const std::size_t n = Y.dim(0), F = Y.numel() / n;
    if (labels.size() != n) throw ShapeError("silhouette: label count mismatch");
    int K = 0;
    for (int l : labels) K = std::max(K, l + 1);
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> sum(K, 0.0);
        std::vector<std::size_t> cnt(K, 0);
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            double acc = 0;
            for (std::size_t f = 0; f < F; ++f) {
                const double d = Y[i * F + f] - Y[j * F + f];
                acc += d * d;
            }
            sum[labels[j]] += std::sqrt(acc);
            ++cnt[labels[j]];
        }
        const int own = labels[i];
        if (cnt[own] == 0) continue;
        const double a = sum[own] / static_cast<double>(cnt[own]);
        double b = std::numeric_limits<double>::infinity();
        for (int k = 0; k < K; ++k)
            if (k != own && cnt[k] > 0) b = std::min(b, sum[k] / static_cast<double>(cnt[k]));
        if (std::isinf(b)) continue;
        total += (b - a) / std::max(a, b);
    }
    return total / static_cast<double>(n);
}

}  // namespace bens
