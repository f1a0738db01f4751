#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>

#include "bens/eval.hpp"

using namespace bens;

namespace {

ArchitectureSpec tiny(Family f, int K, int side, Head head = Head::softmax_xe) {
    ArchitectureSpec s;
    s.family = f;
    s.depth = f == Family::vgg ? 5 : (f == Family::densenet_bc ? 16 : (f == Family::wrn ? 10 : 8));
    s.width = f == Family::wrn ? 1 : 3;
    s.num_classes = K;
    s.input = {side, side, 3};
    s.head = head;
    return s;
}

template <class T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
    RngStream rng(seed, 3);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.normal() * scale);
    return t;
}

// running stats away from the identity so eval-mode batch norm is non-trivial
template <class T>
void perturb_stats(ModelInstance<T>& m, std::uint64_t seed) {
    RngStream rng(seed, 8);
    for (auto& s : m.bn_stats) {
        for (auto& v : s.mean.data()) v = static_cast<T>(0.1 * rng.normal());
        for (auto& v : s.var.data()) v = static_cast<T>(0.5 + rng.uniform());
    }
}

}  // namespace

TEST(Phi, SoftmaxAndCosineScores) {
    Tape<double> tape;
    auto z = tape.constant(Tensor<double>(Shape{1, 4}, 0.0));
    auto s = phi(z, Head::softmax_xe).value();
    for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 0.25);
    auto l = tape.constant(random_tensor<double>(Shape{3, 7}, 1, 5.0));
    auto p = phi(l, Head::softmax_xe).value();
    for (std::size_t b = 0; b < 3; ++b) {
        double sum = 0;
        for (std::size_t k = 0; k < 7; ++k) sum += p[b * 7 + k];
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
    // embedding equal to prototype j: cosine 1 maps to score 1
    auto m = build<double>(tiny(Family::resnet, 3, 8, Head::cosine), RngStream(1, 1));
    const std::size_t F = feature_width(m.spec);
    const auto& proto = m.params.back().value;
    ASSERT_EQ(proto.shape(), (Shape{3, F}));
    Tensor<double> emb(Shape{1, F});
    for (std::size_t f = 0; f < F; ++f) emb[f] = 2.5 * proto[1 * F + f];
    auto cos = ops::matmul(ops::l2_normalize(tape.constant(emb)), ops::transpose(ops::l2_normalize(tape.constant(proto))));
    auto sc = phi(cos, Head::cosine).value();
    EXPECT_NEAR(sc[1], 1.0, 1e-12);
    for (double v : sc.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Predict, CombineMeanAlgebra) {
    std::vector<Tensor<float>> parts{Tensor<float>(Shape{1, 2}, {1.0f, 0.0f}), Tensor<float>(Shape{1, 2}, {0.0f, 1.0f})};
    auto m = combine_mean<float>(parts);
    EXPECT_EQ(m, Tensor<float>(Shape{1, 2}, {0.5f, 0.5f}));
    EXPECT_THROW(combine_mean<float>(std::span<const Tensor<float>>{}), ConfigError);
    parts.push_back(Tensor<float>(Shape{2, 2}));
    EXPECT_THROW(combine_mean<float>(parts), ShapeError);
}

TEST(Predict, IdentityPermutationAndSimplex) {
    const auto spec = tiny(Family::resnet, 5, 8);
    std::vector<ModelInstance<float>> members;
    for (std::uint64_t m = 0; m < 4; ++m) members.push_back(build<float>(spec, RngStream(11, m)));
    auto x = random_tensor<float>(Shape{6, 8, 8, 3}, 4, 30.0);
    auto single = ensemble_predict<float>(std::span(members).first(1), x);
    EXPECT_EQ(single, member_scores(members[0], x));
    auto f = ensemble_predict<float>(members, x);
    std::vector<ModelInstance<float>> shuffled{members[2], members[0], members[3], members[1]};
    EXPECT_EQ(ensemble_predict<float>(shuffled, x), f);
    for (std::size_t b = 0; b < 6; ++b) {
        double sum = 0;
        for (std::size_t k = 0; k < 5; ++k) {
            EXPECT_GE(f[b * 5 + k], 0.0f);
            EXPECT_LE(f[b * 5 + k], 1.0f);
            sum += f[b * 5 + k];
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
    EXPECT_THROW(ensemble_predict<float>(std::span<const ModelInstance<float>>{}, x), ConfigError);
    EXPECT_THROW(ensemble_predict<float>(members, random_tensor<float>(Shape{1, 4, 4, 3}, 1)), ShapeError);
}

TEST(Accuracy, OracleConstantAndMonotone) {
    auto split = synth_clusters(4, 5, 2, 2, 1, 1.0, 3);
    NormalizationStats norm{{0.0f}};
    // the label is recoverable from nothing but position in the split, so wire an oracle
    // through a lookup on the pixel payload
    std::map<std::vector<float>, int> label_of;
    for (std::size_t i = 0; i < split.size(); ++i) {
        auto img = to_float(split, i);
        label_of[{img.data().begin(), img.data().end()}] = split.labels[i];
    }
    PredictFn oracle = [&](const Tensor<float>& batch) {
        const std::size_t B = batch.dim(0), D = batch.numel() / B;
        Tensor<float> out(Shape{B, 4}, 0.0f);
        for (std::size_t b = 0; b < B; ++b) {
            std::vector<float> key(batch.data().begin() + b * D, batch.data().begin() + (b + 1) * D);
            out[b * 4 + label_of.at(key)] = 1.0f;
        }
        return out;
    };
    EXPECT_DOUBLE_EQ(accuracy(oracle, split, norm, 3), 1.0);
    PredictFn constant = [](const Tensor<float>& batch) {
        Tensor<float> out(Shape{batch.dim(0), 4}, 0.1f);
        for (std::size_t b = 0; b < batch.dim(0); ++b) out[b * 4 + 2] = 0.7f;
        return out;
    };
    EXPECT_DOUBLE_EQ(accuracy(constant, split, norm), 0.25);

    auto spec = tiny(Family::resnet, 4, 2);
    spec.input = {2, 2, 1};
    EnsembleModel ens;
    ens.members.push_back(build<float>(spec, RngStream(3, 3)));
    auto base = ensemble_predict_fn(ens);
    PredictFn warped = [&](const Tensor<float>& batch) {
        auto s = base(batch);
        for (auto& v : s.data()) v = std::exp(3.0f * v) - 7.0f;
        return s;
    };
    EXPECT_DOUBLE_EQ(accuracy(base, split, norm), accuracy(warped, split, norm));
    EXPECT_THROW(accuracy(base, DatasetSplit{}, norm), ConfigError);
}

TEST(Aggregate, PopulationStatistics) {
    std::vector<double> a{0.5, 0.5, 0.5};
    auto r = aggregate_runs(a);
    EXPECT_DOUBLE_EQ(r.mean, 0.5);
    EXPECT_DOUBLE_EQ(r.std, 0.0);
    std::vector<double> b{0.4, 0.6};
    r = aggregate_runs(b);
    EXPECT_NEAR(r.mean, 0.5, 1e-15);
    EXPECT_NEAR(r.std, 0.1, 1e-15);
    std::vector<double> c{0.1, 0.7, 0.3, 0.9}, d{0.9, 0.3, 0.1, 0.7};
    EXPECT_EQ(aggregate_runs(c).mean, aggregate_runs(d).mean);
    EXPECT_EQ(aggregate_runs(c).std, aggregate_runs(d).std);
    EXPECT_THROW(aggregate_runs(std::span<const double>{}), ConfigError);
}

TEST(Jacobian, LinearAndScaled) {
    for (std::uint64_t seed : {1, 2, 3}) {
        auto W = random_tensor<double>(Shape{12, 5}, seed);
        ScoreFn<double> f = [&W](Tape<double>& t, Var<double> x) { return ops::dense(ops::flatten(x), t.constant(W)); };
        double fro = 0;
        for (double w : W.data()) fro += w * w;
        fro = std::sqrt(fro);
        for (std::uint64_t xs : {5, 6}) {
            auto x = random_tensor<double>(Shape{1, 2, 2, 3}, xs, 10.0);
            EXPECT_NEAR(jacobian_frobenius(f, x), fro, 1e-12 * fro);
        }
    }
    for (std::size_t n : {1, 4, 9}) {
        ScoreFn<double> twice = [](Tape<double>&, Var<double> x) { return ops::scale(x, 2.0); };
        auto x = random_tensor<double>(Shape{1, n}, n);
        EXPECT_NEAR(jacobian_frobenius(twice, x), 2.0 * std::sqrt(static_cast<double>(n)), 1e-12);
    }
    ScoreFn<double> bad = [](Tape<double>&, Var<double> x) { return ops::sum(x); };
    EXPECT_THROW(jacobian(bad, random_tensor<double>(Shape{2, 3}, 1)), ShapeError);
    EXPECT_THROW(jacobian_frobenius(bad, random_tensor<double>(Shape{2, 3}, 1)), ShapeError);
}

TEST(Jacobian, MatchesFiniteDifferencesOnConvNets) {
    for (auto fam : {Family::resnet, Family::densenet_bc}) {
        const int side = fam == Family::densenet_bc ? 4 : 6;
        auto m = build<double>(tiny(fam, 3, side), RngStream(5, 1));
        perturb_stats(m, 2);
        auto f = member_fn(m);
        auto x = random_tensor<double>(Shape{2, static_cast<std::size_t>(side), static_cast<std::size_t>(side), 3}, 9);
        auto J = jacobian<double>(f, x);
        const std::size_t B = 2, K = 3, D = x.numel() / B;
        const double h = 1e-5;
        double max_rel = 0;
        for (std::size_t i = 0; i < x.numel(); ++i) {
            auto xp = x, xm = x;
            xp[i] += h;
            xm[i] -= h;
            auto fp = member_scores(m, xp), fm = member_scores(m, xm);
            const std::size_t b = i / D, d = i % D;
            for (std::size_t k = 0; k < K; ++k) {
                const double num = (fp[b * K + k] - fm[b * K + k]) / (2 * h);
                const double ana = J[(b * K + k) * D + d];
                max_rel = std::max(max_rel, std::abs(num - ana) / std::max(1e-6, std::abs(num) + std::abs(ana)));
                // the other sample of the batch never moves
                EXPECT_EQ(fp[(1 - b) * K + k], fm[(1 - b) * K + k]);
            }
        }
        EXPECT_LT(max_rel, 1e-4) << to_string(fam);
    }
}

TEST(Jacobian, EnsembleAlgebraIsExact) {
    const auto spec = tiny(Family::resnet, 4, 6);
    auto a = build<float>(spec, RngStream(1, 1));
    auto b = build<float>(spec, RngStream(1, 2));
    auto c = build<float>(spec, RngStream(1, 3));
    auto x = random_tensor<float>(Shape{3, 6, 6, 3}, 12, 20.0);
    std::vector<ModelInstance<float>> one{a}, same{a, a, a}, abc{a, b, c}, cab{c, a, b};
    const auto single = jacobian<float>(member_fn(a), x);
    EXPECT_EQ(ensemble_jacobian<float>(one, x), single);
    EXPECT_EQ(ensemble_jacobian<float>(same, x), single);
    EXPECT_EQ(ensemble_jacobian<float>(abc, x), ensemble_jacobian<float>(cab, x));
    EXPECT_EQ(frobenius_rows(ensemble_jacobian<float>(same, x)), frobenius_rows(single));
}

TEST(Sensitivity, ConstantSingletonAndScaling) {
    auto split = synth_clusters(3, 4, 4, 4, 3, 1.0, 6);
    auto norm = channel_means(split);
    ScoreFn<float> constant = [](Tape<float>& t, Var<float> x) {
        return ops::add(ops::scale(ops::dense(ops::flatten(x), t.constant(Tensor<float>(Shape{48, 3}, 1.0f))), 0.0f),
                        t.constant(Tensor<float>(Shape{x.shape()[0], 3}, 0.3f)));
    };
    auto zero = mean_sensitivity(score_sensitivity_fn(constant), split, norm);
    for (double v : zero.values) EXPECT_EQ(v, 0.0);
    ScoreFn<float> ignores = [](Tape<float>& t, Var<float> x) {
        return t.constant(Tensor<float>(Shape{x.shape()[0], 3}, 0.5f));
    };
    for (double v : mean_sensitivity(score_sensitivity_fn(ignores), split, norm).values) EXPECT_EQ(v, 0.0);

    auto spec = tiny(Family::resnet, 3, 4);
    spec.input = {4, 4, 3};
    auto m = build<float>(spec, RngStream(2, 2));
    ScoreFn<float> f = member_fn(m);
    ScoreFn<float> g = [&](Tape<float>& t, Var<float> x) { return ops::scale(f(t, x), -3.0f); };
    auto rf = mean_sensitivity(score_sensitivity_fn(f), split, norm, std::nullopt, 0, 5);
    auto rg = mean_sensitivity(score_sensitivity_fn(g), split, norm, std::nullopt, 0, 5);
    ASSERT_EQ(rf.values.size(), split.size());
    for (std::size_t i = 0; i < rf.values.size(); ++i) {
        EXPECT_GE(rf.values[i], 0.0);
        EXPECT_NEAR(rg.values[i], 3.0 * rf.values[i], 1e-5 * rf.values[i]);
    }
    EXPECT_EQ(rf.labels, split.labels);

    auto single = split.select(std::vector<std::size_t>{4});
    auto r1 = mean_sensitivity(score_sensitivity_fn(f), single, norm);
    EXPECT_EQ(r1.mean, r1.values[0]);
    EXPECT_EQ(r1.std, 0.0);
    EXPECT_THROW(mean_sensitivity(score_sensitivity_fn(f), DatasetSplit{}, norm), ConfigError);
}

TEST(Sensitivity, CapAndCsvRoundTrip) {
    auto ids = capped_indices(100, 10, 4);
    EXPECT_EQ(ids.size(), 10u);
    EXPECT_TRUE(std::is_sorted(ids.begin(), ids.end()));
    EXPECT_EQ(capped_indices(100, 10, 4), ids);
    EXPECT_EQ(capped_indices(5, 10, 4).size(), 5u);
    EXPECT_EQ(capped_indices(7, std::nullopt, 4).size(), 7u);

    SensitivityReport r;
    r.sample_ids = {3, 8};
    r.labels = {1, 0};
    r.values = {0.25, 1.5};
    r.finish();
    auto p = std::filesystem::temp_directory_path() / "bens_sens.csv";
    r.write_csv(p);
    auto back = SensitivityReport::read_csv(p);
    EXPECT_EQ(back.sample_ids, r.sample_ids);
    EXPECT_EQ(back.values, r.values);
    EXPECT_DOUBLE_EQ(back.mean, 0.875);
    EXPECT_DOUBLE_EQ(back.std, 0.625);
}
