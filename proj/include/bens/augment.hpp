#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "bens/data.hpp"

namespace bens {

enum class AugLevel { none, plus, plusplus, plusplusplus };

inline std::string to_string(AugLevel l) {
    switch (l) {
        case AugLevel::none: return "none";
        case AugLevel::plus: return "+";
        case AugLevel::plusplus: return "++";
        case AugLevel::plusplusplus: return "+++";
    }
    return "?";
}

inline AugLevel parse_aug_level(std::string_view s) {
    if (s == "none" || s.empty()) return AugLevel::none;
    if (s == "+" || s == "plus") return AugLevel::plus;
    if (s == "++" || s == "plusplus") return AugLevel::plusplus;
    if (s == "+++" || s == "plusplusplus") return AugLevel::plusplusplus;
    throw ConfigError("unknown augmentation level '" + std::string(s) + "'");
}

/// Parameters of the three nested augmentation levels. Colour magnitudes are fractions of
/// the full pixel range (brightness, hue circle) or scale half-widths (contrast,
/// saturation).
struct AugmentationPolicy {
    AugLevel level = AugLevel::none;
    int pad = 4;
    double flip_probability = 0.5;
    double brightness = 0.25;
    double contrast = 0.25;
    double saturation = 0.25;
    double hue = 0.1;
    double erase_probability = 0.5;
    double erase_area_min = 0.02;
    double erase_area_max = 0.4;
    double erase_aspect_min = 0.3;
    double erase_aspect_max = 3.33;

    std::vector<std::string> transforms() const {
        std::vector<std::string> t;
        if (level >= AugLevel::plus) t.insert(t.end(), {"pad-crop", "flip"});
        if (level >= AugLevel::plusplus) t.insert(t.end(), {"brightness", "contrast", "saturation", "hue"});
        if (level >= AugLevel::plusplusplus) t.push_back("erase");
        return t;
    }
};

/// What one augment call did.
struct AugmentRecord {
    int crop_y = 0, crop_x = 0;
    bool flipped = false;
    bool erased = false;
    int erase_y = 0, erase_x = 0, erase_h = 0, erase_w = 0;
    double erase_area_fraction(std::size_t height, std::size_t width) const {
        return erased ? static_cast<double>(erase_h * erase_w) / static_cast<double>(height * width) : 0.0;
    }
};

namespace detail {

inline void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
    const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const float d = mx - mn;
    v = mx;
    s = mx > 0 ? d / mx : 0.0f;
    if (d <= 0) {
        h = 0;
        return;
    }
    if (mx == r)
        h = std::fmod((g - b) / d, 6.0f);
    else if (mx == g)
        h = (b - r) / d + 2.0f;
    else
        h = (r - g) / d + 4.0f;
    h /= 6.0f;
    if (h < 0) h += 1.0f;
}

inline void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    const float hh = h * 6.0f;
    const int sector = static_cast<int>(std::floor(hh)) % 6;
    const float f = hh - std::floor(hh);
    const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (sector) {
        case 0: r = v, g = t, b = p; break;
        case 1: r = q, g = v, b = p; break;
        case 2: r = p, g = v, b = t; break;
        case 3: r = p, g = q, b = v; break;
        case 4: r = t, g = p, b = v; break;
        default: r = v, g = p, b = q; break;
    }
}

inline void clamp_pixels(Tensor<float>& img) {
    for (auto& v : img.data()) v = std::clamp(v, 0.0f, 255.0f);
}

}  // namespace detail

/// Augments one [H,W,C] float image in pixel units (0..255). Level + zero-pads by `pad`,
/// crops back at a uniform offset and flips with probability 0.5; ++ then jitters
/// brightness, contrast, saturation and hue in that order; +++ then erases one random
/// rectangle with uniform random values.
inline Tensor<float> augment(const Tensor<float>& image, const AugmentationPolicy& policy, RngStream& rng,
                             AugmentRecord* record = nullptr) {
    if (image.rank() != 3) throw ShapeError("augment expects an [H,W,C] image, got " + shape_str(image.shape()));
    const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
    if (C != 1 && C != 3) throw ShapeError("augment supports 1 or 3 channels, got " + std::to_string(C));
    AugmentRecord rec;
    if (policy.level == AugLevel::none) {
        if (record) *record = rec;
        return image;
    }
    Tensor<float> out(image.shape(), 0.0f);

    const int pad = policy.pad;
    rec.crop_y = static_cast<int>(rng.uniform_int(0, 2 * pad));
    rec.crop_x = static_cast<int>(rng.uniform_int(0, 2 * pad));
    rec.flipped = rng.bernoulli(policy.flip_probability);
    for (std::size_t y = 0; y < H; ++y) {
        const long sy = static_cast<long>(y) + rec.crop_y - pad;
        if (sy < 0 || sy >= static_cast<long>(H)) continue;
        for (std::size_t x = 0; x < W; ++x) {
            const std::size_t dx = rec.flipped ? W - 1 - x : x;
            const long sx = static_cast<long>(x) + rec.crop_x - pad;
            if (sx < 0 || sx >= static_cast<long>(W)) continue;
            for (std::size_t c = 0; c < C; ++c) out[(y * W + dx) * C + c] = image[(sy * W + sx) * C + c];
        }
    }

    if (policy.level >= AugLevel::plusplus) {
        const float shift = static_cast<float>(rng.uniform(-policy.brightness, policy.brightness) * 255.0);
        for (auto& v : out.data()) v += shift;
        detail::clamp_pixels(out);

        const float cscale = static_cast<float>(rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast));
        double mean = 0;
        for (float v : out.data()) mean += v;
        mean /= static_cast<double>(out.numel());
        for (auto& v : out.data()) v = static_cast<float>((v - mean) * cscale + mean);
        detail::clamp_pixels(out);

        const float sscale = static_cast<float>(rng.uniform(1.0 - policy.saturation, 1.0 + policy.saturation));
        const float hshift = static_cast<float>(rng.uniform(-policy.hue, policy.hue));
        if (C == 3) {
            for (std::size_t p = 0; p < H * W; ++p) {
                float* px = &out[p * 3];
                const float gray = 0.299f * px[0] + 0.587f * px[1] + 0.114f * px[2];
                for (int c = 0; c < 3; ++c) px[c] = std::clamp(gray + (px[c] - gray) * sscale, 0.0f, 255.0f);
            }
            for (std::size_t p = 0; p < H * W; ++p) {
                float* px = &out[p * 3];
                float h, s, v;
                detail::rgb_to_hsv(px[0] / 255.0f, px[1] / 255.0f, px[2] / 255.0f, h, s, v);
                h += hshift;
                h -= std::floor(h);
                detail::hsv_to_rgb(h, s, v, px[0], px[1], px[2]);
                for (int c = 0; c < 3; ++c) px[c] = std::clamp(px[c] * 255.0f, 0.0f, 255.0f);
            }
        }
    }

    if (policy.level >= AugLevel::plusplusplus && rng.bernoulli(policy.erase_probability)) {
        const double area = static_cast<double>(H * W);
        for (int attempt = 0; attempt < 100; ++attempt) {
            const double target = rng.uniform(policy.erase_area_min, policy.erase_area_max) * area;
            const double aspect = rng.uniform(policy.erase_aspect_min, policy.erase_aspect_max);
            const auto eh = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
            const auto ew = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
            const double frac = static_cast<double>(eh * ew) / area;
            // rounding may leave the sampled range; such draws count as failed attempts
            if (eh < 1 || ew < 1 || eh >= H || ew >= W || frac < policy.erase_area_min || frac > policy.erase_area_max)
                continue;
            rec.erased = true;
            rec.erase_h = static_cast<int>(eh);
            rec.erase_w = static_cast<int>(ew);
            rec.erase_y = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(H - eh)));
            rec.erase_x = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(W - ew)));
            for (std::size_t y = 0; y < eh; ++y)
                for (std::size_t x = 0; x < ew; ++x)
                    for (std::size_t c = 0; c < C; ++c)
                        out[((rec.erase_y + y) * W + rec.erase_x + x) * C + c] = static_cast<float>(rng.uniform(0.0, 255.0));
            break;
        }
    }
    if (record) *record = rec;
    return out;
}

/// Training batch: each sample augmented with its own stream `base.derive({position})`,
/// then mean-subtracted. Labels are written to `labels`.
inline Tensor<float> make_augmented_batch(const DatasetSplit& split, std::span<const std::size_t> indices,
                                          const NormalizationStats& stats, const AugmentationPolicy& policy,
                                          const RngStream& base, std::vector<int>& labels) {
    Tensor<float> batch(Shape{indices.size(), split.height, split.width, split.channels});
    const std::size_t sz = split.image_size();
    labels.clear();
    for (std::size_t b = 0; b < indices.size(); ++b) {
        RngStream rng = base.derive({b});
        auto img = augment(to_float(split, indices[b]), policy, rng);
        normalize(img, stats);
        std::copy(img.data().begin(), img.data().end(), batch.data().begin() + static_cast<std::ptrdiff_t>(b * sz));
        labels.push_back(split.labels[indices[b]]);
    }
    return batch;
}

}  // namespace bens
