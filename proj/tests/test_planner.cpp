#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "bens/planner.hpp"

using namespace bens;

namespace {

ArchitectureSpec spec(Family f, int d, int w) {
    ArchitectureSpec s;
    s.family = f;
    s.depth = d;
    s.width = w;
    return s;
}

// Independent oracle: brute force over the whole grid, closest with ties to smaller.
int brute_width(const ArchitectureSpec& s, std::uint64_t target) {
    int best = 1;
    double best_d = 1e300;
    for (int w = 1; w <= 300; ++w) {
        double d = std::abs(static_cast<double>(flops(s.with_width(w)).macs) - static_cast<double>(target));
        if (d < best_d) {
            best_d = d;
            best = w;
        }
    }
    return best;
}

}  // namespace

TEST(EnsembleBudget, Linearity) {
    auto base = spec(Family::resnet, 8, 16);
    EXPECT_EQ(ensemble_budget(base, 1), flops(base));
    EXPECT_EQ(ensemble_budget(base, 20).macs, 20 * flops(base).macs);
    for (int m = 1; m < 10; ++m) EXPECT_LT(ensemble_budget(base, m), ensemble_budget(base, m + 1));
}

TEST(MatchWidth, ReferencePairings) {
    auto r8 = spec(Family::resnet, 8, 16);
    int w = match_width(r8, ensemble_budget(r8, 20));
    EXPECT_NEAR(w, 72, 4);
    auto dn = spec(Family::densenet_bc, 16, 12);
    EXPECT_NEAR(match_width(dn, ensemble_budget(dn, 6)), 30, 2);
}

TEST(MatchWidth, AgreesWithBruteForce) {
    for (auto base : {spec(Family::resnet, 8, 16), spec(Family::vgg, 5, 32), spec(Family::wrn, 10, 2),
                      spec(Family::densenet_bc, 16, 12)})
        for (int m : {2, 3, 5, 9}) {
            auto B = ensemble_budget(base, m);
            EXPECT_EQ(match_width(base, B), brute_width(base, B.macs)) << arch_name(base) << " M=" << m;
        }
}

TEST(MatchWidth, RoundTripAndErrors) {
    for (auto base : {spec(Family::resnet, 8, 16), spec(Family::vgg, 9, 32), spec(Family::wrn, 28, 10),
                      spec(Family::densenet_bc, 52, 12)})
        EXPECT_EQ(match_width(base, flops(base)), base.width);
    EXPECT_THROW(match_width(spec(Family::resnet, 8, 16), FlopCount{10}), ConfigError);
}

TEST(MatchDepth, ReferencePairingsAndFixedPoint) {
    auto r8 = spec(Family::resnet, 8, 16);
    EXPECT_NEAR(match_depth(r8, ensemble_budget(r8, 20)), 110, 6);
    EXPECT_EQ(match_depth(r8, flops(r8)), 8);
    int d5 = match_depth(r8, ensemble_budget(r8, 5));
    EXPECT_TRUE(d5 == 26 || d5 == 32) << d5;
    for (int d : {14, 26, 50, 110}) EXPECT_EQ(match_depth(r8, flops(r8.with_depth(d))), d);
    EXPECT_THROW(match_depth(r8, FlopCount{1000}), ConfigError);
}

TEST(Plan, Table2Rows) {
    auto p = plan(spec(Family::resnet, 8, 16), 20);
    EXPECT_EQ(p.members, 20);
    EXPECT_NEAR(p.deep.depth, 110, 6);
    EXPECT_EQ(p.deep.width, 16);
    EXPECT_NEAR(p.wide.width, 72, 4);
    EXPECT_EQ(p.wide.depth, 8);
    auto v = plan(spec(Family::vgg, 5, 32), 5);
    EXPECT_GE(v.wide.width, 71 * 0.93);
    EXPECT_LE(v.wide.width, 78 * 1.07);
}

TEST(Plan, CompetitorsGrowForTwoMembers) {
    for (auto base : {spec(Family::resnet, 8, 16), spec(Family::vgg, 5, 32), spec(Family::wrn, 10, 5),
                      spec(Family::densenet_bc, 16, 12), spec(Family::resnet, 110, 16)}) {
        auto p = plan(base, 2);
        EXPECT_GT(p.deep.depth, base.depth) << arch_name(base);
        EXPECT_GT(p.wide.width, base.width) << arch_name(base);
    }
    EXPECT_THROW(plan(spec(Family::resnet, 8, 16), 1), ConfigError);
}

TEST(Plan, MonotoneInBudget) {
    auto base = spec(Family::resnet, 8, 16);
    int prev_w = 0, prev_d = 0;
    for (int m = 2; m <= 30; ++m) {
        auto p = plan(base, m);
        EXPECT_GE(p.wide.width, prev_w);
        EXPECT_GE(p.deep.depth, prev_d);
        prev_w = p.wide.width;
        prev_d = p.deep.depth;
    }
}

TEST(Plan, ErrorWithinGridGranularity) {
    for (auto base : {spec(Family::resnet, 8, 16), spec(Family::densenet_bc, 16, 12), spec(Family::wrn, 10, 4)})
        for (int m : {3, 5, 9, 20}) {
            auto p = plan(base, m);
            // half the relative jump between the matched design and its neighbours
            auto jump = [&](const ArchitectureSpec& s, ArchitectureSpec lo, ArchitectureSpec hi) {
                double f = static_cast<double>(flops(s).macs);
                double a = std::abs(f - static_cast<double>(flops(lo).macs));
                double b = std::abs(static_cast<double>(flops(hi).macs) - f);
                return std::max(a, b) / 2.0 / static_cast<double>(p.budget.macs);
            };
            EXPECT_LE(p.wide_error(), jump(p.wide, p.wide.with_width(p.wide.width - 1), p.wide.with_width(p.wide.width + 1)) + 1e-12);
            EXPECT_LE(p.deep_error(), jump(p.deep, p.deep.with_depth(p.deep.depth - 6), p.deep.with_depth(p.deep.depth + 6)) + 1e-12);
        }
}

TEST(Plan, WidthNearSqrtM) {
    auto base = spec(Family::resnet, 8, 16);
    for (int m : {5, 20}) {
        double expected = 16.0 * std::sqrt(static_cast<double>(m));
        EXPECT_NEAR(plan(base, m).wide.width, expected, 0.1 * expected);
    }
}

TEST(Plan, PrintsTable) {
    std::ostringstream os;
    print_plan(os, plan(spec(Family::resnet, 8, 16), 5));
    EXPECT_NE(os.str().find("resnet-32-16"), std::string::npos);
    EXPECT_NE(os.str().find("5xresnet-8-16"), std::string::npos);
}
