#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bens/data.hpp"
#include "bens/model.hpp"
#include "bens/train.hpp"

namespace bens {

/// Differentiable map from an input batch [B,...] to scores [B,K].
template <class T>
using ScoreFn = std::function<Var<T>(Tape<T>&, Var<T>)>;

/// phi(g(x)) of one member: eval-mode batch norm, no dropout.
template <class T>
ScoreFn<T> member_fn(const ModelInstance<T>& m) {
    return [&m](Tape<T>& tape, Var<T> x) {
        auto params = bind_parameters(m, tape, false);
        return phi(forward<T>(m, params, x, Mode::eval).output, m.spec.head);
    };
}

template <class T>
Tensor<T> member_scores(const ModelInstance<T>& m, const Tensor<T>& batch) {
    Tape<T> tape;
    return member_fn(m)(tape, tape.constant(batch)).value();
}

/// Element-wise mean of equally shaped tensors. Each element's terms are sorted before a
/// double-precision sum, so the result does not depend on the order of `parts`, a single
/// part is returned unchanged and M copies of one tensor average back to it exactly.
template <class T>
Tensor<T> combine_mean(std::span<const Tensor<T>> parts) {
    if (parts.empty()) throw ConfigError("cannot average an empty ensemble");
    Tensor<T> out(parts[0].shape());
    std::vector<T> terms(parts.size());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        for (std::size_t m = 0; m < parts.size(); ++m) {
            if (parts[m].shape() != out.shape()) throw ShapeError("ensemble members disagree on output shape");
            terms[m] = parts[m][i];
        }
        std::sort(terms.begin(), terms.end());
        double acc = 0;
        for (T v : terms) acc += static_cast<double>(v);
        out[i] = static_cast<T>(acc / static_cast<double>(parts.size()));
    }
    return out;
}

/// f(x) = (1/M) sum_m phi(g_m(x)) for a batch.
template <class T>
Tensor<T> ensemble_predict(std::span<const ModelInstance<T>> members, const Tensor<T>& batch) {
    if (members.empty()) throw ConfigError("cannot predict with an empty ensemble");
    std::vector<Tensor<T>> scores;
    scores.reserve(members.size());
    for (const auto& m : members) scores.push_back(member_scores(m, batch));
    return combine_mean<T>(scores);
}

inline Tensor<float> ensemble_predict(const EnsembleModel& ens, const Tensor<float>& batch) {
    return ensemble_predict<float>(ens.members, batch);
}

/// Full Jacobian d f_k / d x for every sample of the batch, shape [B, K, D] with D the
/// per-sample input size. One forward pass, then one backward pass per output k seeded
/// with the column sum over the batch (samples do not interact in eval mode).
template <class T>
Tensor<T> jacobian(const ScoreFn<T>& f, const Tensor<T>& batch) {
    Tape<T> tape;
    auto x = tape.leaf(batch, true);
    auto y = f(tape, x);
    if (y.shape().size() != 2 || y.shape()[0] != batch.dim(0))
        throw ShapeError("score function must return [B,K], got " + shape_str(y.shape()));
    const std::size_t B = batch.dim(0), K = y.shape()[1], D = batch.numel() / B;
    Tensor<T> J(Shape{B, K, D}, T(0));
    for (std::size_t k = 0; k < K; ++k) {
        auto grads = tape.backward(ops::column_sum(y, k));
        if (!grads.contains(x)) continue;  // score does not depend on x: zero rows
        const auto& g = grads.of(x);
        for (std::size_t b = 0; b < B; ++b)
            std::copy_n(g.data().begin() + static_cast<std::ptrdiff_t>(b * D), D,
                        J.data().begin() + static_cast<std::ptrdiff_t>((b * K + k) * D));
    }
    return J;
}

/// Jacobian of the averaged predictor: member Jacobians combined like the scores.
template <class T>
Tensor<T> ensemble_jacobian(std::span<const ModelInstance<T>> members, const Tensor<T>& batch) {
    if (members.empty()) throw ConfigError("cannot differentiate an empty ensemble");
    std::vector<Tensor<T>> parts;
    parts.reserve(members.size());
    for (const auto& m : members) parts.push_back(jacobian<T>(member_fn(m), batch));
    return combine_mean<T>(parts);
}

/// ||J(x)||_F per sample of a [B,K,D] Jacobian.
template <class T>
std::vector<double> frobenius_rows(const Tensor<T>& J) {
    const std::size_t B = J.dim(0), per = J.numel() / B;
    std::vector<double> out(B);
    for (std::size_t b = 0; b < B; ++b) {
        double acc = 0;
        for (std::size_t i = 0; i < per; ++i) {
            const double v = J[b * per + i];
            acc += v * v;
        }
        out[b] = std::sqrt(acc);
    }
    return out;
}

/// ||d f(x) / d x||_F of a single sample (leading batch axis of extent 1).
template <class T>
double jacobian_frobenius(const ScoreFn<T>& f, const Tensor<T>& x) {
    if (x.rank() < 2 || x.dim(0) != 1) throw ShapeError("jacobian_frobenius takes one sample [1,...]");
    return frobenius_rows(jacobian(f, x))[0];
}

inline double jacobian_frobenius(const EnsembleModel& ens, const Tensor<float>& x) {
    return frobenius_rows(ensemble_jacobian<float>(ens.members, x))[0];
}

/// Any batch -> per-sample sensitivity map.
using SensitivityFn = std::function<std::vector<double>(const Tensor<float>&)>;

inline SensitivityFn ensemble_sensitivity_fn(const EnsembleModel& ens) {
    return [&ens](const Tensor<float>& batch) { return frobenius_rows(ensemble_jacobian<float>(ens.members, batch)); };
}

inline SensitivityFn score_sensitivity_fn(ScoreFn<float> f) {
    return [f = std::move(f)](const Tensor<float>& batch) { return frobenius_rows(jacobian<float>(f, batch)); };
}

using PredictFn = std::function<Tensor<float>(const Tensor<float>&)>;

inline PredictFn ensemble_predict_fn(const EnsembleModel& ens) {
    return [&ens](const Tensor<float>& batch) { return ensemble_predict(ens, batch); };
}

inline std::size_t argmax_row(const Tensor<float>& scores, std::size_t row) {
    const std::size_t K = scores.dim(1);
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
        if (scores[row * K + k] > scores[row * K + best]) best = k;
    return best;
}

/// Fraction of argmax matches over the split (mean-subtracted with `norm`).
inline double accuracy(const PredictFn& predict, const DatasetSplit& split, const NormalizationStats& norm,
                       std::size_t batch_size = 100) {
    if (split.size() == 0) throw ConfigError("accuracy of an empty split");
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t b0 = 0; b0 < split.size(); b0 += batch_size) {
        idx.clear();
        for (std::size_t i = b0; i < std::min(split.size(), b0 + batch_size); ++i) idx.push_back(i);
        auto scores = predict(make_batch(split, idx, norm));
        if (scores.rank() != 2 || scores.dim(0) != idx.size()) throw ShapeError("predictor returned " + shape_str(scores.shape()));
        for (std::size_t r = 0; r < idx.size(); ++r)
            correct += static_cast<int>(argmax_row(scores, r)) == split.labels[idx[r]];
    }
    return static_cast<double>(correct) / static_cast<double>(split.size());
}

/// Accuracy over seeds with population mean and standard deviation.
struct RunResult {
    std::vector<double> values;
    double mean = 0;
    double std = 0;
    std::string fingerprint;
};

inline RunResult aggregate_runs(std::span<const double> values, std::string fingerprint = {}) {
    if (values.empty()) throw ConfigError("aggregate_runs needs at least one value");
    RunResult r;
    r.values.assign(values.begin(), values.end());
    std::vector<double> sorted = r.values;
    std::sort(sorted.begin(), sorted.end());
    double sum = 0;
    for (double v : sorted) sum += v;
    r.mean = sum / static_cast<double>(sorted.size());
    double sq = 0;
    for (double v : sorted) sq += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(sq / static_cast<double>(sorted.size()));
    r.fingerprint = std::move(fingerprint);
    return r;
}

struct SensitivityReport {
    std::vector<std::size_t> sample_ids;
    std::vector<int> labels;
    std::vector<double> values;
    double mean = 0;
    double std = 0;
    std::string input_space = "mean-subtracted pixels";

    void write_csv(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw FormatError("cannot write " + path.string());
        out << "sample_id,class,jacobian_frobenius\n";
        out.precision(9);
        for (std::size_t i = 0; i < values.size(); ++i) out << sample_ids[i] << "," << labels[i] << "," << values[i] << "\n";
    }

    void write_tnsr_file(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw FormatError("cannot write " + path.string());
        Tensor<float> t(Shape{std::max<std::size_t>(values.size(), 1)}, 0.0f);
        for (std::size_t i = 0; i < values.size(); ++i) t[i] = static_cast<float>(values[i]);
        write_tnsr(out, t);
    }

    static SensitivityReport read_csv(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw FormatError("cannot open " + path.string());
        SensitivityReport r;
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto parts = detail::split(line, ',');
            if (parts.size() != 3) throw FormatError(path.string() + ": bad row '" + line + "'");
            r.sample_ids.push_back(std::stoul(parts[0]));
            r.labels.push_back(std::stoi(parts[1]));
            r.values.push_back(std::stod(parts[2]));
        }
        r.finish();
        return r;
    }

    void finish() {
        auto agg = values.empty() ? RunResult{} : aggregate_runs(values);
        mean = agg.mean;
        std = agg.std;
    }
};

/// Seeded uniform choice of `cap` sample ids (increasing), or all ids when the split is
/// not larger than the cap.
inline std::vector<std::size_t> capped_indices(std::size_t count, std::optional<std::size_t> cap, std::uint64_t seed) {
    std::vector<std::size_t> ids(count);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    if (!cap || *cap >= count) return ids;
    RngStream rng(seed, stream_id({0x5e25ULL}));
    for (std::size_t i = 0; i < *cap; ++i) std::swap(ids[i], ids[i + rng.uniform_int(count - i)]);
    ids.resize(*cap);
    std::sort(ids.begin(), ids.end());
    return ids;
}

inline constexpr std::size_t kSensitivityCap = 2000;

/// Per-sample ||J(x)||_F over the (capped) split.
inline SensitivityReport mean_sensitivity(const SensitivityFn& sens, const DatasetSplit& split,
                                          const NormalizationStats& norm,
                                          std::optional<std::size_t> cap = kSensitivityCap, std::uint64_t seed = 0,
                                          std::size_t batch_size = 50) {
    if (split.size() == 0) throw ConfigError("sensitivity of an empty split");
    SensitivityReport r;
    r.sample_ids = capped_indices(split.size(), cap, seed);
    for (std::size_t b0 = 0; b0 < r.sample_ids.size(); b0 += batch_size) {
        auto idx = std::span<const std::size_t>(r.sample_ids).subspan(b0, std::min(batch_size, r.sample_ids.size() - b0));
        auto v = sens(make_batch(split, idx, norm));
        if (v.size() != idx.size()) throw ShapeError("sensitivity map returned the wrong number of values");
        r.values.insert(r.values.end(), v.begin(), v.end());
        for (auto i : idx) r.labels.push_back(split.labels[i]);
    }
    r.finish();
    return r;
}

}  // namespace bens
