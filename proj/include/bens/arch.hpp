#pragma once

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bens/errors.hpp"

namespace bens {

enum class Family { resnet, vgg, wrn, densenet_bc };

/// softmax-xe: dense classifier + cross-entropy. cosine / cosine-plus-xe: learned
/// unit-norm class prototypes scored by cosine similarity.
enum class Head { softmax_xe, cosine, cosine_plus_xe };

struct InputShape {
    int height = 32;
    int width = 32;
    int channels = 3;
    bool operator==(const InputShape&) const = default;
};

/// Design-space coordinates of one network. `width` is the base filter count for
/// resnet/vgg, the widen factor for wrn and the growth rate k for densenet-bc.
struct ArchitectureSpec {
    Family family = Family::resnet;
    int depth = 8;
    int width = 16;
    int num_classes = 10;
    InputShape input{};
    Head head = Head::softmax_xe;
    std::optional<double> dropout{};  // family default when unset

    double dropout_rate() const {
        if (dropout) return *dropout;
        switch (family) {
            case Family::vgg: return 0.4;
            case Family::wrn: return 0.3;
            default: return 0.0;
        }
    }

    ArchitectureSpec with_depth(int d) const {
        auto s = *this;
        s.depth = d;
        return s;
    }
    ArchitectureSpec with_width(int w) const {
        auto s = *this;
        s.width = w;
        return s;
    }

    bool operator==(const ArchitectureSpec&) const = default;
};

inline std::string to_string(Family f) {
    switch (f) {
        case Family::resnet: return "resnet";
        case Family::vgg: return "vgg";
        case Family::wrn: return "wrn";
        case Family::densenet_bc: return "densenet-bc";
    }
    return "?";
}

inline std::string to_string(Head h) {
    switch (h) {
        case Head::softmax_xe: return "softmax-xe";
        case Head::cosine: return "cosine";
        case Head::cosine_plus_xe: return "cosine-plus-xe";
    }
    return "?";
}

inline Family parse_family(std::string_view s) {
    if (s == "resnet") return Family::resnet;
    if (s == "vgg") return Family::vgg;
    if (s == "wrn") return Family::wrn;
    if (s == "densenet-bc" || s == "densenet") return Family::densenet_bc;
    throw ConfigError("unknown architecture family '" + std::string(s) + "'");
}

inline Head parse_head(std::string_view s) {
    if (s == "softmax-xe" || s == "xe") return Head::softmax_xe;
    if (s == "cosine") return Head::cosine;
    if (s == "cosine-plus-xe" || s == "cosine+xe") return Head::cosine_plus_xe;
    throw ConfigError("unknown head '" + std::string(s) + "'");
}

/// "resnet-8-16", "wrn-28-10", "densenet-bc-16-12".
inline std::string arch_name(const ArchitectureSpec& s) {
    return to_string(s.family) + "-" + std::to_string(s.depth) + "-" + std::to_string(s.width);
}

inline ArchitectureSpec parse_arch(std::string_view text, int num_classes = 10) {
    auto dash = text.rfind('-');
    if (dash == std::string_view::npos) throw ConfigError("architecture '" + std::string(text) + "' is not family-depth-width");
    auto dash2 = text.rfind('-', dash - 1);
    if (dash2 == std::string_view::npos) throw ConfigError("architecture '" + std::string(text) + "' is not family-depth-width");
    ArchitectureSpec spec;
    spec.family = parse_family(text.substr(0, dash2));
    try {
        spec.depth = std::stoi(std::string(text.substr(dash2 + 1, dash - dash2 - 1)));
        spec.width = std::stoi(std::string(text.substr(dash + 1)));
    } catch (const std::exception&) {
        throw ConfigError("architecture '" + std::string(text) + "' has a non-numeric depth or width");
    }
    spec.num_classes = num_classes;
    return spec;
}

struct Diagnostic {
    std::string constraint;  // short name of the violated rule
    std::string message;
};

/// Stage count per family: blocks per stage for resnet/wrn, bottleneck blocks per stack
/// for densenet-bc.
inline int blocks_per_stage(const ArchitectureSpec& s) {
    switch (s.family) {
        case Family::resnet: return (s.depth - 2) / 6;
        case Family::wrn:
        case Family::densenet_bc: return (s.depth - 4) / 6;
        case Family::vgg: return 0;
    }
    return 0;
}

/// Conv widths per VGG block; a 2x2 max-pool follows every block.
inline std::vector<std::vector<int>> vgg_blocks(int depth, int w) {
    if (depth == 5) return {{w}, {2 * w}, {4 * w}, {8 * w}};
    return {{w}, {2 * w}, {4 * w, 4 * w}, {8 * w, 8 * w}, {8 * w, 8 * w}};
}

/// nullopt when the spec is valid.
inline std::optional<Diagnostic> validate(const ArchitectureSpec& s) {
    auto fail = [](std::string c, std::string m) { return std::optional<Diagnostic>(Diagnostic{std::move(c), std::move(m)}); };
    const std::string name = arch_name(s);
    switch (s.family) {
        case Family::resnet:
            if (s.depth < 8) return fail("depth ≥ 8", name + ": resnet depth must be at least 8");
            if ((s.depth - 2) % 6 != 0) return fail("depth ≢ 2 mod 6", name + ": resnet depth must be 6n+2");
            break;
        case Family::wrn:
            if (s.depth < 10) return fail("depth ≥ 10", name + ": wrn depth must be at least 10");
            if ((s.depth - 4) % 6 != 0) return fail("depth ≢ 4 mod 6", name + ": wrn depth must be 6n+4");
            break;
        case Family::densenet_bc:
            if (s.depth < 16) return fail("depth ≥ 16", name + ": densenet-bc depth must be at least 16");
            if ((s.depth - 4) % 6 != 0) return fail("depth ≢ 4 mod 6", name + ": densenet-bc depth must be 6n+4");
            break;
        case Family::vgg:
            if (s.depth != 5 && s.depth != 9) return fail("depth ∈ {5, 9}", name + ": vgg depth must be 5 or 9");
            break;
    }
    if (s.width < 1) return fail("w ≥ 1", name + ": width must be positive");
    if (s.num_classes < 2) return fail("K ≥ 2", name + ": at least two classes are required");
    if (s.input.height < 1 || s.input.width < 1 || s.input.channels < 1)
        return fail("input extents ≥ 1", name + ": input extents must be positive");
    const double rate = s.dropout_rate();
    if (rate < 0.0 || rate >= 1.0) return fail("dropout ∈ [0,1)", name + ": dropout rate out of range");
    int min_side = 1;
    if (s.family == Family::vgg) min_side = s.depth == 5 ? 16 : 32;
    if (s.family == Family::densenet_bc) min_side = 4;
    if (s.input.height < min_side || s.input.width < min_side)
        return fail("input ≥ " + std::to_string(min_side), name + ": input too small for the pooling stages");
    return std::nullopt;
}

inline void require_valid(const ArchitectureSpec& s) {
    if (auto d = validate(s)) throw ConfigError(d->message + " (" + d->constraint + ")");
}

/// Multiply-accumulate count of one forward pass; flops = 2 * macs.
struct FlopCount {
    std::uint64_t macs = 0;
    std::uint64_t flops() const { return 2 * macs; }
    double mflops() const { return static_cast<double>(flops()) / 1e6; }
    auto operator<=>(const FlopCount&) const = default;
};

namespace detail {

struct Counter {
    std::uint64_t macs = 0;
    std::uint64_t params = 0;

    void conv(std::uint64_t out_h, std::uint64_t out_w, std::uint64_t cin, std::uint64_t cout, std::uint64_t k) {
        macs += out_h * out_w * cin * cout * k * k;
        params += cin * cout * k * k;
    }
    void bn(std::uint64_t c) { params += 2 * c; }
    void head(const ArchitectureSpec& s, std::uint64_t features) {
        const std::uint64_t K = s.num_classes;
        macs += features * K;
        params += features * K + (s.head == Head::softmax_xe ? K : 0);
    }
};

inline std::uint64_t ceil_half(std::uint64_t v) { return (v + 1) / 2; }

// Closed-form per-family counts (conv + dense MACs; batch-norm, activations and pooling
// contribute parameters only).
inline Counter analytic_counts(const ArchitectureSpec& s) {
    require_valid(s);
    Counter c;
    std::uint64_t h = s.input.height, w = s.input.width;
    const std::uint64_t C = s.input.channels;
    switch (s.family) {
        case Family::resnet:
        case Family::wrn: {
            const bool wrn = s.family == Family::wrn;
            const std::uint64_t stem = wrn ? 16 : s.width;
            const std::uint64_t base = wrn ? 16ull * s.width : s.width;
            c.conv(h, w, C, stem, 3);
            c.bn(stem);
            std::uint64_t cin = stem;
            const int n = blocks_per_stage(s);
            for (int stage = 0; stage < 3; ++stage) {
                const std::uint64_t cout = base << stage;
                for (int b = 0; b < n; ++b) {
                    const bool down = stage > 0 && b == 0;
                    if (down) {
                        h = ceil_half(h);
                        w = ceil_half(w);
                    }
                    c.conv(h, w, cin, cout, 3);
                    c.bn(cout);
                    c.conv(h, w, cout, cout, 3);
                    c.bn(cout);
                    if (down || cin != cout) {
                        c.conv(h, w, cin, cout, 1);
                        c.bn(cout);
                    }
                    cin = cout;
                }
            }
            c.head(s, cin);
            break;
        }
        case Family::densenet_bc: {
            const std::uint64_t k = s.width;
            std::uint64_t ch = 2 * k;
            c.conv(h, w, C, ch, 3);
            const int n = blocks_per_stage(s);
            for (int stack = 0; stack < 3; ++stack) {
                for (int b = 0; b < n; ++b) {
                    c.bn(ch);
                    c.conv(h, w, ch, 4 * k, 1);
                    c.bn(4 * k);
                    c.conv(h, w, 4 * k, k, 3);
                    ch += k;
                }
                if (stack < 2) {
                    c.bn(ch);
                    c.conv(h, w, ch, ch / 2, 1);
                    ch /= 2;
                    h /= 2;
                    w /= 2;
                }
            }
            c.bn(ch);
            c.head(s, ch);
            break;
        }
        case Family::vgg: {
            std::uint64_t cin = C;
            for (const auto& block : vgg_blocks(s.depth, s.width)) {
                for (int ch : block) {
                    c.conv(h, w, cin, ch, 3);
                    c.bn(ch);
                    cin = ch;
                }
                h /= 2;
                w /= 2;
            }
            c.head(s, h * w * cin);
            break;
        }
    }
    return c;
}

}  // namespace detail

inline FlopCount flops(const ArchitectureSpec& s) { return FlopCount{detail::analytic_counts(s).macs}; }

/// Trainable parameters including batch-norm scale and shift.
inline std::uint64_t param_count(const ArchitectureSpec& s) { return detail::analytic_counts(s).params; }

/// Width of the penultimate (pre-classifier) feature vector.
inline std::size_t feature_width(const ArchitectureSpec& s) {
    require_valid(s);
    switch (s.family) {
        case Family::resnet: return 4ull * s.width;
        case Family::wrn: return 64ull * s.width;
        case Family::densenet_bc: {
            std::size_t ch = 2ull * s.width;
            const int n = blocks_per_stage(s);
            for (int stack = 0; stack < 3; ++stack) {
                ch += static_cast<std::size_t>(n) * s.width;
                if (stack < 2) ch /= 2;
            }
            return ch;
        }
        case Family::vgg: {
            std::size_t h = s.input.height, w = s.input.width;
            auto blocks = vgg_blocks(s.depth, s.width);
            for (std::size_t i = 0; i < blocks.size(); ++i) {
                h /= 2;
                w /= 2;
            }
            return h * w * static_cast<std::size_t>(blocks.back().back());
        }
    }
    return 0;
}

}  // namespace bens
