#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bens/errors.hpp"

namespace bens {

/// One scatter point: coordinates plus either a class id or a continuous value.
struct EmbeddingPoint {
    double p1 = 0, p2 = 0;
    int label = 0;
    double value = 0;
};

enum class ColorMode { categorical, continuous };

struct Rgb {
    int r = 0, g = 0, b = 0;
    std::string hex() const {
        char buf[8];
        std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
        return buf;
    }
};

/// Ten-colour categorical palette; further classes cycle through hues.
inline Rgb category_color(int k) {
    static const std::array<Rgb, 10> base{{{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40}, {148, 103, 189},
                                           {140, 86, 75}, {227, 119, 194}, {127, 127, 127}, {188, 189, 34}, {23, 190, 207}}};
    if (k >= 0 && k < 10) return base[k];
    const double h = std::fmod(k * 0.618033988749895, 1.0) * 6.0;
    const double x = 1 - std::abs(std::fmod(h, 2.0) - 1);
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(h)) {
        case 0: r = 1, g = x; break;
        case 1: r = x, g = 1; break;
        case 2: g = 1, b = x; break;
        case 3: g = x, b = 1; break;
        case 4: r = x, b = 1; break;
        default: r = 1, b = x; break;
    }
    return {static_cast<int>(40 + 180 * r), static_cast<int>(40 + 180 * g), static_cast<int>(40 + 180 * b)};
}

/// Viridis ramp sampled at nine stops, linear in between; t in [0,1].
inline Rgb ramp_color(double t) {
    static const std::array<Rgb, 9> stops{{{68, 1, 84}, {71, 44, 122}, {59, 81, 139}, {44, 113, 142}, {33, 144, 141},
                                           {39, 173, 129}, {92, 200, 99}, {170, 220, 50}, {253, 231, 37}}};
    t = std::clamp(t, 0.0, 1.0);
    const double pos = t * (stops.size() - 1);
    const auto i = std::min<std::size_t>(static_cast<std::size_t>(pos), stops.size() - 2);
    const double f = pos - static_cast<double>(i);
    auto mix = [&](int a, int b) { return static_cast<int>(std::lround(a + (b - a) * f)); };
    return {mix(stops[i].r, stops[i + 1].r), mix(stops[i].g, stops[i + 1].g), mix(stops[i].b, stops[i + 1].b)};
}

struct ScatterOptions {
    std::string title;
    int num_classes = 0;          // categorical legend size; 0 = max label + 1
    double clip_quantile = 0.99;  // continuous mode
    int size = 640;
    double marker_radius = 3.0;
};

/// Value range used by the continuous ramp: [min, quantile-clipped max].
inline std::pair<double, double> ramp_range(const std::vector<EmbeddingPoint>& pts, double quantile) {
    std::vector<double> v;
    for (const auto& p : pts) v.push_back(p.value);
    std::sort(v.begin(), v.end());
    const double lo = v.front();
    const auto at = static_cast<std::size_t>(std::ceil(quantile * static_cast<double>(v.size())));
    const double hi = v[std::min(v.size() - 1, at == 0 ? 0 : at - 1)];
    return {lo, hi};
}

inline std::string scatter_svg_string(const std::vector<EmbeddingPoint>& pts, ColorMode mode, const ScatterOptions& opt = {}) {
    if (pts.empty()) throw ConfigError("scatter plot needs at least one point");
    const double S = opt.size;
    const double margin = 20, legend_w = 130;
    double xmin = pts[0].p1, xmax = xmin, ymin = pts[0].p2, ymax = ymin;
    for (const auto& p : pts) {
        xmin = std::min(xmin, p.p1), xmax = std::max(xmax, p.p1);
        ymin = std::min(ymin, p.p2), ymax = std::max(ymax, p.p2);
    }
    // one scale for both axes keeps the aspect ratio
    const double span = std::max({xmax - xmin, ymax - ymin, 1e-12});
    const double scale = (S - 2 * margin) / span;
    const double cx = (xmin + xmax) / 2, cy = (ymin + ymax) / 2;
    auto px = [&](double x) { return S / 2 + (x - cx) * scale; };
    auto py = [&](double y) { return S / 2 - (y - cy) * scale; };

    std::ostringstream os;
    os.precision(6);
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << S + legend_w << "\" height=\"" << S << "\" viewBox=\"0 0 "
       << S + legend_w << " " << S << "\">\n";
    os << "<rect x=\"0\" y=\"0\" width=\"" << S + legend_w << "\" height=\"" << S << "\" fill=\"white\"/>\n";
    if (!opt.title.empty()) os << "<title>" << opt.title << "</title>\n";

    double lo = 0, hi = 1;
    if (mode == ColorMode::continuous) std::tie(lo, hi) = ramp_range(pts, opt.clip_quantile);
    os << "<g id=\"points\">\n";
    for (const auto& p : pts) {
        Rgb c = mode == ColorMode::categorical ? category_color(p.label)
                                               : ramp_color(hi > lo ? (p.value - lo) / (hi - lo) : 0.0);
        os << "<circle cx=\"" << px(p.p1) << "\" cy=\"" << py(p.p2) << "\" r=\"" << opt.marker_radius << "\" fill=\""
           << c.hex() << "\"/>\n";
    }
    os << "</g>\n<g id=\"legend\" font-family=\"sans-serif\" font-size=\"12\">\n";
    const double lx = S + 10;
    if (mode == ColorMode::categorical) {
        int K = opt.num_classes;
        if (K <= 0)
            for (const auto& p : pts) K = std::max(K, p.label + 1);
        for (int k = 0; k < K; ++k) {
            const double y = margin + 18.0 * k;
            os << "<rect class=\"legend-entry\" x=\"" << lx << "\" y=\"" << y << "\" width=\"12\" height=\"12\" fill=\""
               << category_color(k).hex() << "\"/><text x=\"" << lx + 18 << "\" y=\"" << y + 11 << "\">class " << k
               << "</text>\n";
        }
    } else {
        os << "<defs><linearGradient id=\"ramp\" x1=\"0\" y1=\"1\" x2=\"0\" y2=\"0\">";
        for (int i = 0; i <= 8; ++i)
            os << "<stop offset=\"" << i / 8.0 << "\" stop-color=\"" << ramp_color(i / 8.0).hex() << "\"/>";
        os << "</linearGradient></defs>\n";
        os << "<rect class=\"value-bar\" x=\"" << lx << "\" y=\"" << margin << "\" width=\"16\" height=\"" << S - 2 * margin
           << "\" fill=\"url(#ramp)\"/>\n";
        os << "<text class=\"ramp-max\" x=\"" << lx + 22 << "\" y=\"" << margin + 10 << "\">" << hi << "</text>\n";
        os << "<text class=\"ramp-min\" x=\"" << lx + 22 << "\" y=\"" << S - margin << "\">" << lo << "</text>\n";
    }
    os << "</g>\n</svg>\n";
    return os.str();
}

inline void scatter_svg(const std::vector<EmbeddingPoint>& pts, ColorMode mode, const std::filesystem::path& path,
                        const ScatterOptions& opt = {}) {
    const auto text = scatter_svg_string(pts, mode, opt);
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw FormatError("cannot write " + path.string());
}

}  // namespace bens
