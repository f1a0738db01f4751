#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "bens/grad_check.hpp"
#include "bens/ops.hpp"

using namespace bens;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t stream, double scale = 1.0) {
    RngStream rng(42, stream);
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data()) v = rng.normal() * scale;
    return t;
}

// Weighted sum with fixed pseudo-random weights, so every output element matters.
Var<double> probe(Var<double> y) {
    auto w = random_tensor(Shape{y.value().numel()}, 999).reshaped(y.shape());
    Tape<double>& t = *y.tape;
    return ops::sum(ops::mul(y, t.constant(w)));
}

}  // namespace

TEST(Tensor, RejectsZeroExtentAndMismatchedData) {
    EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
    EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
    Tensor<float> t(Shape{2, 3}, 1.5f);
    EXPECT_EQ(t.numel(), 6u);
}

TEST(Tensor, TnsrRoundTrip) {
    Tensor<float> t(Shape{2, 3}, {1, -2, 3.5f, 4, 5, 6});
    std::stringstream ss;
    write_tnsr(ss, t);
    EXPECT_EQ(ss.str().substr(0, 4), "TNSR");
    EXPECT_EQ(ss.str().size(), 4u + 4 + 8 + 24);
    auto back = read_tnsr(ss);
    EXPECT_EQ(back, t);
}

TEST(Conv2d, CountsOverlapWithSamePadding) {
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>(Shape{1, 3, 3, 1}, 1.0));
    auto k = tape.constant(Tensor<double>(Shape{3, 3, 1, 1}, 1.0));
    auto y = ops::conv2d(x, k, std::nullopt, 1, Padding::same).value();
    EXPECT_EQ(y.shape(), (Shape{1, 3, 3, 1}));
    EXPECT_DOUBLE_EQ(y[4], 9.0);
    EXPECT_DOUBLE_EQ(y[0], 4.0);
    EXPECT_DOUBLE_EQ(y[8], 4.0);
    EXPECT_DOUBLE_EQ(y[1], 6.0);
}

TEST(Conv2d, ZeroKernelAndShapes) {
    Tape<double> tape;
    auto x = tape.constant(random_tensor(Shape{2, 7, 7, 3}, 1));
    auto k = tape.constant(Tensor<double>(Shape{3, 3, 3, 4}, 0.0));
    auto y = ops::conv2d(x, k, std::nullopt, 1, Padding::same).value();
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(ops::conv2d(x, k, std::nullopt, 2, Padding::same).shape(), (Shape{2, 4, 4, 4}));
    EXPECT_EQ(ops::conv2d(x, k, std::nullopt, 2, Padding::valid).shape(), (Shape{2, 3, 3, 4}));
    auto k5 = tape.constant(Tensor<double>(Shape{5, 5, 3, 2}, 0.0));
    EXPECT_EQ(ops::conv2d(x, k5, std::nullopt, 1, Padding::same).shape(), (Shape{2, 7, 7, 2}));
    auto bad = tape.constant(Tensor<double>(Shape{3, 3, 2, 4}, 0.0));
    EXPECT_THROW(ops::conv2d(x, bad, std::nullopt, 1, Padding::same), ShapeError);
    EXPECT_THROW(ops::conv2d(x, k, std::nullopt, 3, Padding::same), ShapeError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
    auto err = grad_check(
        [](Tape<double>&, std::span<const Var<double>> v) {
            return probe(ops::conv2d(v[0], v[1], std::optional<Var<double>>(v[2]), 1, Padding::same));
        },
        {random_tensor(Shape{1, 8, 8, 3}, 1), random_tensor(Shape{3, 3, 3, 4}, 2), random_tensor(Shape{4}, 3)});
    EXPECT_LT(err, 1e-6);
    auto strided = grad_check(
        [](Tape<double>&, std::span<const Var<double>> v) {
            return probe(ops::conv2d(v[0], v[1], std::nullopt, 2, Padding::same));
        },
        {random_tensor(Shape{2, 7, 6, 2}, 4), random_tensor(Shape{3, 3, 2, 3}, 5)});
    EXPECT_LT(strided, 1e-6);
    auto pointwise = grad_check(
        [](Tape<double>&, std::span<const Var<double>> v) {
            return probe(ops::conv2d(v[0], v[1], std::nullopt, 1, Padding::valid));
        },
        {random_tensor(Shape{2, 4, 4, 3}, 6), random_tensor(Shape{1, 1, 3, 5}, 7)});
    EXPECT_LT(pointwise, 1e-6);
}

TEST(BatchNorm, TrainModeNormalises) {
    Tape<double> tape;
    auto x = tape.constant(random_tensor(Shape{4, 3, 3, 2}, 8, 3.0));
    auto g = tape.constant(Tensor<double>(Shape{2}, 1.0));
    auto b = tape.constant(Tensor<double>(Shape{2}, 0.0));
    RunningStats<double> stats(2), updated(2);
    auto y = ops::batch_norm(x, g, b, stats, &updated, Mode::train).value();
    for (std::size_t c = 0; c < 2; ++c) {
        double m = 0, v = 0;
        for (std::size_t i = c; i < y.numel(); i += 2) m += y[i];
        m /= 36;
        for (std::size_t i = c; i < y.numel(); i += 2) v += (y[i] - m) * (y[i] - m);
        v /= 36;
        EXPECT_NEAR(m, 0.0, 1e-5);
        EXPECT_NEAR(v, 1.0, 1e-3);
    }
    EXPECT_NE(updated.mean[0], 0.0);
}

TEST(BatchNorm, EvalIdentityAndSingleSampleError) {
    Tape<double> tape;
    auto xv = random_tensor(Shape{2, 2, 2, 3}, 9);
    auto x = tape.constant(xv);
    auto g = tape.constant(Tensor<double>(Shape{3}, 1.0));
    auto b = tape.constant(Tensor<double>(Shape{3}, 0.0));
    RunningStats<double> stats(3);
    auto y = ops::batch_norm(x, g, b, stats, nullptr, Mode::eval).value();
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], xv[i], 1e-5 * std::abs(xv[i]) + 1e-12);
    auto one = tape.constant(Tensor<double>(Shape{1, 1, 1, 3}, 1.0));
    EXPECT_THROW(ops::batch_norm(one, g, b, stats, nullptr, Mode::train), ShapeError);
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
    RunningStats<double> stats(3);
    for (Mode mode : {Mode::train, Mode::eval}) {
        auto err = grad_check(
            [&](Tape<double>&, std::span<const Var<double>> v) {
                return probe(ops::batch_norm(v[0], v[1], v[2], stats, nullptr, mode));
            },
            {random_tensor(Shape{2, 3, 3, 3}, 10), random_tensor(Shape{3}, 11), random_tensor(Shape{3}, 12)});
        EXPECT_LT(err, 1e-5);
    }
}

TEST(Pool, Semantics) {
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>(Shape{1, 2, 2, 1}, {1, 2, 3, 4}));
    EXPECT_EQ(ops::max_pool(x, 2, 2).value().item(), 4.0);
    EXPECT_EQ(ops::avg_pool(x, 2, 2).value().item(), 2.5);
    auto c = tape.constant(Tensor<double>(Shape{2, 5, 3, 4}, 1.75));
    auto g = ops::global_avg_pool(c).value();
    EXPECT_EQ(g.shape(), (Shape{2, 1, 1, 4}));
    for (double v : g.data()) EXPECT_DOUBLE_EQ(v, 1.75);
    EXPECT_THROW(ops::max_pool(x, 3, 1), ShapeError);
}

TEST(Pool, MaxTiesRouteToFirstElement) {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>(Shape{1, 2, 2, 1}, 5.0), true);
    auto grads = tape.backward(ops::sum(ops::max_pool(x, 2, 2)));
    EXPECT_EQ(grads.of(x).storage(), (std::vector<double>{1, 0, 0, 0}));
}

TEST(Pool, AvgGradientIsUniformShare) {
    Tape<double> tape;
    auto x = tape.leaf(random_tensor(Shape{1, 4, 4, 2}, 13), true);
    auto grads = tape.backward(ops::sum(ops::avg_pool(x, 2, 2)));
    for (double v : grads.of(x).data()) EXPECT_DOUBLE_EQ(v, 0.25);
    for (PoolKind kind : {PoolKind::avg, PoolKind::global_avg, PoolKind::max}) {
        auto err = grad_check([&](Tape<double>&, std::span<const Var<double>> v) { return probe(ops::pool(v[0], kind)); },
                              {random_tensor(Shape{2, 4, 6, 3}, 14)});
        EXPECT_LT(err, 1e-6);
    }
}

TEST(Dense, IdentityAndBias) {
    Tape<double> tape;
    auto xv = random_tensor(Shape{3, 4}, 15);
    Tensor<double> eye(Shape{4, 4}, 0.0);
    for (std::size_t i = 0; i < 4; ++i) eye[i * 5] = 1.0;
    auto y = ops::dense(tape.constant(xv), tape.constant(eye), tape.constant(Tensor<double>(Shape{4}, 0.0))).value();
    EXPECT_EQ(y, xv);
    Tensor<double> bias(Shape{2}, {0.5, -1.0});
    auto z = ops::dense(tape.constant(xv), tape.constant(Tensor<double>(Shape{4, 2}, 0.0)), tape.constant(bias)).value();
    for (std::size_t r = 0; r < 3; ++r) {
        EXPECT_EQ(z[r * 2], 0.5);
        EXPECT_EQ(z[r * 2 + 1], -1.0);
    }
    EXPECT_THROW(ops::dense(tape.constant(xv), tape.constant(Tensor<double>(Shape{3, 2}))), ShapeError);
}

TEST(Dense, AffineGradientIsExact) {
    auto err = grad_check(
        [](Tape<double>&, std::span<const Var<double>> v) {
            return probe(ops::dense(v[0], v[1], std::optional<Var<double>>(v[2])));
        },
        {random_tensor(Shape{3, 5}, 16), random_tensor(Shape{5, 4}, 17), random_tensor(Shape{4}, 18)});
    EXPECT_LT(err, 1e-7);
}

TEST(Activations, Values) {
    Tape<double> tape;
    auto s = ops::softmax(tape.constant(Tensor<double>(Shape{1, 2}, 0.0))).value();
    EXPECT_DOUBLE_EQ(s[0], 0.5);
    EXPECT_DOUBLE_EQ(s[1], 0.5);
    auto n = ops::l2_normalize(tape.constant(Tensor<double>(Shape{1, 2}, {3, 4}))).value();
    EXPECT_NEAR(n[0], 0.6, 1e-15);
    EXPECT_NEAR(n[1], 0.8, 1e-15);
    auto r = ops::relu(tape.constant(Tensor<double>(Shape{3}, {-1, 0, 2}))).value();
    EXPECT_EQ(r.storage(), (std::vector<double>{0, 0, 2}));

    auto big = random_tensor(Shape{6, 7}, 19, 30.0);
    auto sm = ops::softmax(tape.constant(big)).value();
    for (std::size_t b = 0; b < 6; ++b) {
        double total = 0;
        for (std::size_t k = 0; k < 7; ++k) {
            double v = sm[b * 7 + k];
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
            total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-6);
    }
}

TEST(Activations, DropoutModes) {
    Tape<float> tape;
    Tensor<float> xv(Shape{1000}, 1.0f);
    auto x = tape.constant(xv);
    RngStream rng(7, 0);
    EXPECT_EQ(ops::dropout(x, 0.0, Mode::train, rng).value(), xv);
    EXPECT_EQ(ops::dropout(x, 0.0, Mode::eval, rng).value(), xv);
    EXPECT_EQ(ops::dropout(x, 0.4, Mode::eval, rng).value(), xv);
    auto y = ops::dropout(x, 0.4, Mode::train, rng).value();
    std::size_t zeros = 0;
    for (float v : y.data()) {
        if (v == 0.0f)
            ++zeros;
        else
            EXPECT_FLOAT_EQ(v, 1.0f / 0.6f);
    }
    EXPECT_NEAR(zeros / 1000.0, 0.4, 0.06);
    EXPECT_THROW(ops::dropout(x, 1.0, Mode::train, rng), ShapeError);
}

TEST(Activations, Gradients) {
    Tensor<double> away(Shape{3, 4});
    RngStream rng(3, 3);
    for (auto& v : away.data()) v = (rng.uniform() < 0.5 ? -1 : 1) * (0.1 + rng.uniform());
    EXPECT_LT(grad_check([](Tape<double>&, std::span<const Var<double>> v) { return probe(ops::relu(v[0])); }, {away}),
              1e-6);
    EXPECT_LT(grad_check([](Tape<double>&, std::span<const Var<double>> v) { return probe(ops::softmax(v[0])); },
                         {random_tensor(Shape{3, 5}, 20)}),
              1e-5);
    EXPECT_LT(grad_check([](Tape<double>&, std::span<const Var<double>> v) { return probe(ops::l2_normalize(v[0])); },
                         {random_tensor(Shape{3, 5}, 21)}),
              1e-5);
    EXPECT_LT(grad_check(
                  [](Tape<double>&, std::span<const Var<double>> v) {
                      RngStream r(1, 2);
                      return probe(ops::dropout(v[0], 0.3, Mode::train, r));
                  },
                  {random_tensor(Shape{4, 5}, 22)}),
              1e-6);
}

TEST(Structural, Gradients) {
    auto a = random_tensor(Shape{2, 3, 3, 2}, 23);
    auto b = random_tensor(Shape{2, 3, 3, 4}, 24);
    EXPECT_LT(grad_check([](Tape<double>&, std::span<const Var<double>> v) { return probe(ops::concat_channels(v[0], v[1])); },
                         {a, b}),
              1e-7);
    EXPECT_LT(grad_check([](Tape<double>&, std::span<const Var<double>> v) { return probe(ops::add(v[0], v[1])); },
                         {a, random_tensor(a.shape(), 25)}),
              1e-7);
    EXPECT_LT(grad_check([](Tape<double>&, std::span<const Var<double>> v) { return probe(ops::mul(v[0], v[1])); },
                         {a, random_tensor(a.shape(), 26)}),
              1e-7);
    EXPECT_LT(grad_check([](Tape<double>&, std::span<const Var<double>> v) { return probe(ops::transpose(ops::flatten(v[0]))); },
                         {a}),
              1e-7);
    EXPECT_LT(grad_check([](Tape<double>&, std::span<const Var<double>> v) { return ops::mean(ops::affine(v[0], 2.0, 1.0)); },
                         {a}),
              1e-7);
    EXPECT_LT(grad_check([](Tape<double>&, std::span<const Var<double>> v) { return ops::column_sum(v[0], 1); },
                         {random_tensor(Shape{4, 3}, 27)}),
              1e-7);
}

TEST(Losses, Gradients) {
    Tensor<double> t(Shape{3, 4}, 0.0);
    t[1] = t[4 + 3] = t[8] = 1.0;
    EXPECT_LT(grad_check([&](Tape<double>&, std::span<const Var<double>> v) { return ops::softmax_cross_entropy(v[0], t); },
                         {random_tensor(Shape{3, 4}, 28)}),
              1e-5);
    EXPECT_LT(grad_check([&](Tape<double>&, std::span<const Var<double>> v) { return ops::target_dot_mean(v[0], t); },
                         {random_tensor(Shape{3, 4}, 29)}),
              1e-7);
}

TEST(Backward, SimpleCases) {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>(Shape{1}, 3.0), true);
    auto p = tape.leaf(Tensor<double>(Shape{1}, 5.0), true);
    auto grads = tape.backward(ops::sum(ops::mul(x, x)));
    EXPECT_DOUBLE_EQ(grads.of(x).item(), 6.0);
    EXPECT_DOUBLE_EQ(grads.of(p).item(), 0.0);
}

TEST(Backward, Errors) {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>(Shape{2}, 1.0), true);
    EXPECT_THROW(tape.backward(x), TapeError);
    auto y = ops::sum(x);
    tape.clear();
    EXPECT_THROW(tape.backward(y), TapeError);
    EXPECT_THROW((void)y.value(), TapeError);
    Tape<double> other;
    auto z = other.leaf(Tensor<double>(Shape{1}, 1.0), true);
    auto x2 = tape.leaf(Tensor<double>(Shape{1}, 1.0), true);
    EXPECT_THROW(ops::add(x2, z), TapeError);
}

TEST(Backward, CompositeGraph) {
    Tensor<double> t(Shape{2, 3}, 0.0);
    t[0] = t[5] = 1.0;
    RunningStats<double> stats(4);
    auto err = grad_check(
        [&](Tape<double>&, std::span<const Var<double>> v) {
            auto h = ops::conv2d(v[0], v[1], std::nullopt, 1, Padding::same);
            h = ops::relu(ops::batch_norm(h, v[2], v[3], stats, nullptr, Mode::train));
            h = ops::flatten(ops::global_avg_pool(h));
            return ops::softmax_cross_entropy(ops::dense(h, v[4], std::optional<Var<double>>(v[5])), t);
        },
        {random_tensor(Shape{2, 5, 5, 2}, 30), random_tensor(Shape{3, 3, 2, 4}, 31), random_tensor(Shape{4}, 32),
         random_tensor(Shape{4}, 33), random_tensor(Shape{4, 3}, 34), random_tensor(Shape{3}, 35)});
    EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, LinearExactAndCorruptedRuleDetected) {
    EXPECT_LT(grad_check([](Tape<double>&, std::span<const Var<double>> v) { return ops::sum(ops::affine(v[0], 3.0, 1.0)); },
                         {random_tensor(Shape{5}, 36)}),
              1e-9);
    auto broken = [](Tape<double>&, std::span<const Var<double>> v) {
        Var<double> x = v[0];
        Tensor<double> y = x.value();
        for (auto& e : y.data()) e = e * e;
        auto sq = x.tape->record(std::move(y), {x}, [](const BackwardArgs<double>& a) {
            for (std::size_t i = 0; i < a.out_grad.numel(); ++i) (*a.in_grads[0])[i] += a.out_grad[i] * (*a.in_values[0])[i];
        });
        return ops::sum(sq);
    };
    EXPECT_GT(grad_check(broken, {random_tensor(Shape{4}, 37)}), 1e-2);
}

TEST(Rng, DeterministicAndStreamsIndependent) {
    RngStream a(5, 1), b(5, 1), c(5, 2);
    std::vector<std::uint64_t> va, vb, vc;
    for (int i = 0; i < 16; ++i) {
        va.push_back(a.next_u64());
        vb.push_back(b.next_u64());
        vc.push_back(c.next_u64());
    }
    EXPECT_EQ(va, vb);
    EXPECT_NE(va, vc);
    EXPECT_EQ(RngStream(3, 0).derive({1, 2}).stream(), RngStream(3, 0).derive({1, 2}).stream());
    EXPECT_NE(RngStream(3, 0).derive({1, 2}).stream(), RngStream(3, 0).derive({2, 1}).stream());
}

TEST(Rng, ForwardBitIdenticalAcrossRuns) {
    auto run = [] {
        Tape<float> tape;
        RngStream rng(11, 4);
        Tensor<float> x(Shape{2, 6, 6, 3});
        for (auto& v : x.data()) v = static_cast<float>(rng.normal());
        Tensor<float> k(Shape{3, 3, 3, 5});
        for (auto& v : k.data()) v = static_cast<float>(rng.normal());
        auto y = ops::conv2d(tape.constant(x), tape.constant(k), std::nullopt, 1, Padding::same);
        return ops::dropout(y, 0.5, Mode::train, rng).value();
    };
    EXPECT_EQ(run(), run());
}
