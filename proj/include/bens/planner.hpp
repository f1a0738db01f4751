#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "bens/arch.hpp"

namespace bens {

inline constexpr int kMaxPlannedWidth = 1024;

/// Budget-matched competitors of an M-member ensemble of `base`.
struct BudgetPlan {
    ArchitectureSpec base;
    int members = 1;
    FlopCount budget;
    ArchitectureSpec deep;
    ArchitectureSpec wide;
    FlopCount ensemble_flops, deep_flops, wide_flops;

    static double relative_error(FlopCount achieved, FlopCount target) {
        return std::abs(static_cast<double>(achieved.macs) - static_cast<double>(target.macs)) /
               static_cast<double>(target.macs);
    }
    double deep_error() const { return relative_error(deep_flops, budget); }
    double wide_error() const { return relative_error(wide_flops, budget); }
};

/// M * flops(base).
inline FlopCount ensemble_budget(const ArchitectureSpec& base, int members) {
    if (members < 1) throw ConfigError("ensemble size must be positive, got " + std::to_string(members));
    return FlopCount{flops(base).macs * static_cast<std::uint64_t>(members)};
}

namespace detail {

inline std::uint64_t distance(std::uint64_t a, std::uint64_t b) { return a > b ? a - b : b - a; }

/// Valid depths of a family in increasing order, starting at `from`.
inline int next_depth(Family f, int d) {
    switch (f) {
        case Family::vgg: return d < 5 ? 5 : (d < 9 ? 9 : -1);
        case Family::resnet: return d < 8 ? 8 : d + 6;
        case Family::wrn: return d < 10 ? 10 : d + 6;
        case Family::densenet_bc: return d < 16 ? 16 : d + 6;
    }
    return -1;
}

}  // namespace detail

/// Integer width whose flops are closest to `target` at fixed depth (ties to the smaller
/// width). `above` restricts the search to widths strictly greater than it.
inline int match_width(const ArchitectureSpec& at_depth, FlopCount target, std::optional<int> above = std::nullopt) {
    const int start = above ? *above + 1 : 1;
    const auto minimum = flops(at_depth.with_width(1));
    if (target.macs < minimum.macs)
        throw ConfigError("budget of " + std::to_string(target.macs) + " MACs is below " + arch_name(at_depth.with_width(1)) +
                          " (" + std::to_string(minimum.macs) + " MACs)");
    int best = -1;
    std::uint64_t best_dist = 0;
    for (int w = start; w <= kMaxPlannedWidth; ++w) {
        const auto f = flops(at_depth.with_width(w)).macs;
        const auto dist = detail::distance(f, target.macs);
        if (best < 0 || dist < best_dist) {
            best = w;
            best_dist = dist;
        }
        if (f > target.macs) break;  // flops grow with width
    }
    if (best < 0) throw ConfigError("no width above " + std::to_string(start - 1) + " within the search grid");
    return best;
}

/// Valid family depth whose flops are closest to `target` at fixed width (ties to the
/// smaller depth). `above` restricts the search to depths strictly greater than it.
inline int match_depth(const ArchitectureSpec& at_width, FlopCount target, std::optional<int> above = std::nullopt) {
    const int first = detail::next_depth(at_width.family, 0);
    const auto minimum = flops(at_width.with_depth(first));
    if (target.macs < minimum.macs)
        throw ConfigError("budget of " + std::to_string(target.macs) + " MACs is below " +
                          arch_name(at_width.with_depth(first)) + " (" + std::to_string(minimum.macs) + " MACs)");
    int best = -1;
    std::uint64_t best_dist = 0;
    for (int d = first; d > 0; d = detail::next_depth(at_width.family, d)) {
        if (above && d <= *above) continue;
        const auto f = flops(at_width.with_depth(d)).macs;
        const auto dist = detail::distance(f, target.macs);
        if (best < 0 || dist < best_dist) {
            best = d;
            best_dist = dist;
        }
        if (f > target.macs) break;
    }
    if (best < 0)
        throw ConfigError("no " + to_string(at_width.family) + " depth above " + std::to_string(above.value_or(0)) +
                          " exists");
    return best;
}

/// Ensemble of `members` copies of base against the deeper and the wider single network
/// of the same budget. Both competitors strictly grow their dimension.
inline BudgetPlan plan(const ArchitectureSpec& base, int members) {
    require_valid(base);
    if (members < 2) throw ConfigError("plan needs at least two members, got " + std::to_string(members));
    BudgetPlan p;
    p.base = base;
    p.members = members;
    p.budget = ensemble_budget(base, members);
    p.ensemble_flops = p.budget;
    p.deep = base.with_depth(match_depth(base, p.budget, base.depth));
    p.wide = base.with_width(match_width(base, p.budget, base.width));
    p.deep_flops = flops(p.deep);
    p.wide_flops = flops(p.wide);
    return p;
}

/// Aligned text table of a plan.
inline void print_plan(std::ostream& os, const BudgetPlan& p) {
    std::ostringstream ens;
    ens << p.members << "x" << arch_name(p.base);
    os << "budget " << std::fixed << std::setprecision(2) << p.budget.mflops() << " MFLOPs (" << p.members << " x "
       << arch_name(p.base) << ")\n";
    os << std::left << std::setw(10) << "design" << std::setw(24) << "architecture" << std::right << std::setw(12)
       << "MFLOPs" << std::setw(10) << "rel.err" << "\n";
    auto row = [&](const char* design, const std::string& name, FlopCount f) {
        os << std::left << std::setw(10) << design << std::setw(24) << name << std::right << std::setw(12)
           << std::setprecision(2) << f.mflops() << std::setw(10) << std::setprecision(4)
           << BudgetPlan::relative_error(f, p.budget) << "\n";
    };
    row("ensemble", ens.str(), p.ensemble_flops);
    row("deep", arch_name(p.deep), p.deep_flops);
    row("wide", arch_name(p.wide), p.wide_flops);
}

}  // namespace bens
