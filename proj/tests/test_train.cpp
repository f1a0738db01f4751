#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "bens/eval.hpp"
#include "bens/train.hpp"

using namespace bens;
namespace fs = std::filesystem;

namespace {

ArchitectureSpec tiny_resnet(int K, int side) {
    ArchitectureSpec s;
    s.family = Family::resnet;
    s.depth = 8;
    s.width = 4;
    s.num_classes = K;
    s.input = {side, side, 3};
    return s;
}

TrainingSchedule short_schedule(int epochs) {
    TrainingSchedule s;
    s.epochs = epochs;
    s.batch_size = 8;
    s.lr0 = 0.05;
    return s;
}

bool same_params(const ModelInstance<float>& a, const ModelInstance<float>& b) {
    if (a.params.size() != b.params.size()) return false;
    for (std::size_t i = 0; i < a.params.size(); ++i)
        if (!(a.params[i].value == b.params[i].value)) return false;
    for (std::size_t i = 0; i < a.bn_stats.size(); ++i)
        if (!(a.bn_stats[i].mean == b.bn_stats[i].mean) || !(a.bn_stats[i].var == b.bn_stats[i].var)) return false;
    return true;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Schedule, EpochTable) {
    EXPECT_EQ(epochs_for(10), 400);
    EXPECT_EQ(epochs_for(50), 300);
    EXPECT_EQ(epochs_for(100), 300);
    EXPECT_EQ(epochs_for(250), 250);
    EXPECT_EQ(epochs_for(10, 100), 100);
    EXPECT_EQ(epochs_for(33, 7), 7);
    EXPECT_THROW(epochs_for(33), ConfigError);
}

TEST(Schedule, SingleDecay) {
    EXPECT_DOUBLE_EQ(lr_at(0, 1000, 0.1), 0.1);
    EXPECT_DOUBLE_EQ(lr_at(749, 1000, 0.1), 0.1);
    EXPECT_DOUBLE_EQ(lr_at(750, 1000, 0.1), 0.1 * 0.1);
    int drops = 0;
    for (std::size_t i = 1; i < 1000; ++i) drops += lr_at(i, 1000, 0.1) != lr_at(i - 1, 1000, 0.1);
    EXPECT_EQ(drops, 1);
    TrainingSchedule s;
    s.epochs = 3;
    s.batch_size = 32;
    EXPECT_EQ(s.batches_per_epoch(100), 4u);  // last partial batch kept
    EXPECT_EQ(s.total_iterations(100), 12u);
    EXPECT_EQ(s.decay_iteration(12), 9u);
}

TEST(Schedule, RecipeDefaults) {
    auto r = [](int d) { return tiny_resnet(10, 32).with_depth(d).with_width(16); };
    EXPECT_DOUBLE_EQ(default_lr0(r(8), "cifar10"), 0.1);
    EXPECT_DOUBLE_EQ(default_lr0(r(20), "cifar10"), 0.1);
    EXPECT_DOUBLE_EQ(default_lr0(r(26), "cifar10"), 0.01);
    EXPECT_DOUBLE_EQ(default_lr0(r(110), "cifar10"), 0.01);
    EXPECT_DOUBLE_EQ(default_lr0(r(50), "cifar100"), 0.1);
    EXPECT_DOUBLE_EQ(default_lr0(r(110), "cifar100"), 0.01);
    ArchitectureSpec vgg;
    vgg.family = Family::vgg;
    vgg.depth = 5;
    vgg.width = 32;
    auto s = default_schedule(vgg, "cifar10", 50);
    EXPECT_EQ(s.optimizer, OptimizerKind::adam);
    EXPECT_EQ(s.epochs, 300);
    EXPECT_EQ(s.batch_size, 32u);
    EXPECT_EQ(default_schedule(r(8), "cifar10", 10).optimizer, OptimizerKind::sgd_nesterov);
    EXPECT_DOUBLE_EQ(s.momentum, 0.9);
    EXPECT_DOUBLE_EQ(s.weight_decay, 1e-4);
}

TEST(Sgd, PlainDescentAndQuadraticOracle) {
    Tensor<double> p(Shape{1}, {1.0}), v(Shape{1}, 0.0);
    sgd_nesterov_step(p, Tensor<double>(Shape{1}, {2.0}), v, 0.1, 0.0, 0.0);
    EXPECT_DOUBLE_EQ(p[0], 0.8);

    // f(p) = p^2/2, g = p. Hand-computed: v1 = -0.1, p1 = 1 - 0.09 - 0.1 = 0.81;
    // v2 = -0.09 - 0.081 = -0.171, p2 = 0.81 - 0.1539 - 0.081 = 0.5751.
    p[0] = 1.0;
    v[0] = 0.0;
    for (int i = 0; i < 2; ++i) sgd_nesterov_step(p, Tensor<double>(Shape{1}, {p[0]}), v, 0.1, 0.9, 0.0);
    EXPECT_NEAR(p[0], 0.5751, 1e-12);
    EXPECT_NEAR(v[0], -0.171, 1e-12);

    Tensor<double> q(Shape{1}, {3.0}), w(Shape{1}, {1.0});
    const Tensor<double> zero(Shape{1}, 0.0);
    for (int i = 1; i <= 5; ++i) {
        sgd_nesterov_step(q, zero, w, 0.1, 0.9, 0.0);
        EXPECT_NEAR(w[0], std::pow(0.9, i), 1e-12);
    }
    Tensor<double> dec(Shape{1}, {2.0}), dv(Shape{1}, 0.0);
    sgd_nesterov_step(dec, zero, dv, 0.5, 0.0, 0.1);
    EXPECT_DOUBLE_EQ(dec[0], 2.0 - 0.5 * 0.2);
    EXPECT_THROW(sgd_nesterov_step(dec, Tensor<double>(Shape{2}), dv, 0.1, 0.9, 0.0), ShapeError);
}

TEST(Adam, BiasCorrectionZeroGradAndQuadratic) {
    for (double g : {1e-3, 0.5, -40.0}) {
        Tensor<double> p(Shape{1}, {0.0});
        AdamState<double> st(Shape{1});
        adam_step(p, Tensor<double>(Shape{1}, {g}), st);
        EXPECT_NEAR(std::abs(p[0]), 1e-3, 1e-7);
    }
    Tensor<double> p(Shape{3}, {1.0, -2.0, 3.0});
    AdamState<double> st(Shape{3});
    const auto start = p;
    for (int i = 0; i < 50; ++i) adam_step(p, Tensor<double>(Shape{3}, 0.0), st);
    EXPECT_EQ(p, start);

    // with the default step 1e-3 the parameter can move at most ~0.2 in 200 steps; the
    // oracle is run at step 0.05
    AdamConfig cfg;
    cfg.step = 0.05;
    Tensor<double> q(Shape{1}, {1.0});
    AdamState<double> qs(Shape{1});
    for (int i = 0; i < 200; ++i) adam_step(q, Tensor<double>(Shape{1}, {q[0]}), qs, cfg);
    EXPECT_LT(std::abs(q[0]), 1e-2);
    EXPECT_THROW(adam_step(q, Tensor<double>(Shape{2}), qs, cfg), ShapeError);
}

TEST(Train, SeparableToyReachesFullTrainAccuracy) {
    auto data = synth_clusters(2, 16, 16, 16, 3, 3.0, 5);
    ArchitectureSpec vgg;
    vgg.family = Family::vgg;
    vgg.depth = 5;
    vgg.width = 4;
    vgg.num_classes = 2;
    vgg.input = {16, 16, 3};
    auto s = default_schedule(vgg, "synthetic", 16, 50);
    s.batch_size = 8;
    s.adam.step = 3e-3;
    auto m = train_member(vgg, data, s, AugmentationPolicy{}, 3);
    EnsembleModel ens;
    ens.members.push_back(m.model);
    EXPECT_DOUBLE_EQ(accuracy(ensemble_predict_fn(ens), data, m.normalization), 1.0);
    ASSERT_EQ(m.loss_trace.size(), 50u);
    double first = 0, last = 0;
    for (int i = 0; i < 12; ++i) {
        first += m.loss_trace[i];
        last += m.loss_trace[49 - i];
    }
    EXPECT_LE(last, first);
}

TEST(Train, DeterministicAndParallelEqualsSerial) {
    auto data = synth_clusters(3, 6, 8, 8, 3, 2.0, 1);
    auto spec = tiny_resnet(3, 8);
    AugmentationPolicy aug;
    aug.level = AugLevel::plusplusplus;
    auto s = short_schedule(3);
    auto a = train_ensemble(spec, 3, data, s, aug, 42);
    auto b = train_ensemble(spec, 3, data, s, aug, 42);
    TrainOptions par;
    par.workers = 3;
    auto c = train_ensemble(spec, 3, data, s, aug, 42, par);
    par.workers = 2;
    auto d = train_ensemble(spec, 3, data, s, aug, 42, par);
    for (std::size_t m = 0; m < 3; ++m) {
        EXPECT_TRUE(same_params(a.members[m], b.members[m]));
        EXPECT_TRUE(same_params(a.members[m], c.members[m]));
        EXPECT_TRUE(same_params(a.members[m], d.members[m]));
        EXPECT_EQ(a.loss_traces[m], c.loss_traces[m]);
    }
    EXPECT_FALSE(same_params(a.members[0], a.members[1]));
}

TEST(Train, MemberIndependenceAndSingleMember) {
    auto data = synth_clusters(2, 5, 8, 8, 3, 2.0, 2);
    auto spec = tiny_resnet(2, 8);
    AugmentationPolicy aug;
    aug.level = AugLevel::plus;
    auto s = short_schedule(2);
    auto one = train_member(spec, data, s, aug, 9);
    auto two = train_ensemble(spec, 2, data, s, aug, 9);
    auto three = train_ensemble(spec, 3, data, s, aug, 9);
    EXPECT_TRUE(same_params(one.model, two.members[0]));
    EXPECT_TRUE(same_params(two.members[0], three.members[0]));
    EXPECT_TRUE(same_params(two.members[1], three.members[1]));

    auto init0 = build<float>(spec, member_init_stream(9, 0));
    auto init1 = build<float>(spec, member_init_stream(9, 1));
    EXPECT_FALSE(same_params(init0, init1));

    s.independent_member_augmentation = true;
    auto indep = train_ensemble(spec, 2, data, s, aug, 9);
    EXPECT_FALSE(same_params(indep.members[1], two.members[1]));
}

TEST(Train, DivergenceCarriesEpoch) {
    auto data = synth_clusters(2, 4, 8, 8, 3, 2.0, 2);
    auto s = short_schedule(3);
    s.lr0 = 1e30;
    try {
        train_ensemble(tiny_resnet(2, 8), 2, data, s, AugmentationPolicy{}, 1);
        FAIL() << "expected divergence";
    } catch (const TrainingError& e) {
        EXPECT_GE(e.epoch(), 0);
        EXPECT_GE(e.member(), 0);
    }
    EXPECT_THROW(train_ensemble(tiny_resnet(3, 8), 1, data, s, AugmentationPolicy{}, 1), ConfigError);
    EXPECT_THROW(train_ensemble(tiny_resnet(2, 8), 0, data, s, AugmentationPolicy{}, 1), ConfigError);
}

TEST(Train, EpochCallbackAndCheckpointRoundTrip) {
    auto data = synth_clusters(2, 4, 8, 8, 3, 2.0, 3);
    auto spec = tiny_resnet(2, 8);
    spec.head = Head::cosine;
    TrainOptions opt;
    int calls = 0;
    opt.on_epoch = [&](std::size_t, int, double loss) {
        ++calls;
        EXPECT_TRUE(std::isfinite(loss));
    };
    auto ens = train_ensemble(spec, 2, data, short_schedule(2), AugmentationPolicy{}, 5, opt);
    EXPECT_EQ(calls, 4);
    auto dir = fs::temp_directory_path() / "bens_test_train_ckpt";
    fs::remove_all(dir);
    save_ensemble(dir, ens);
    const auto first = file_bytes(dir / "member_0.ckpt");
    save_ensemble(dir, ens);
    EXPECT_EQ(file_bytes(dir / "member_0.ckpt"), first);
    auto back = load_ensemble(dir);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back.normalization.means, ens.normalization.means);
    EXPECT_EQ(back.head(), Head::cosine);
    for (std::size_t m = 0; m < 2; ++m) EXPECT_TRUE(same_params(back.members[m], ens.members[m]));
    std::vector<std::size_t> idx{0, 1, 2};
    auto batch = make_batch(data, idx, ens.normalization);
    EXPECT_EQ(ensemble_predict(back, batch), ensemble_predict(ens, batch));

    std::ofstream(dir / "member_1.ckpt", std::ios::binary) << "BENSCKPT 1\nfamily = resnet\n";
    EXPECT_THROW(load_ensemble(dir), FormatError);
    EXPECT_THROW(load_checkpoint(dir / "absent.ckpt"), FormatError);
}
