#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <vector>

#include "bens/eval.hpp"
#include "bens/svg.hpp"
#include "bens/tsne.hpp"

namespace bens {

struct EmbedConfig {
    TsneConfig tsne{};
    std::optional<std::size_t> cap = kSensitivityCap;
    std::uint64_t sample_seed = 0;  // same seed as the sensitivity cap, so ids line up
    std::size_t batch_size = 100;
};

struct Embedding {
    std::vector<std::size_t> sample_ids;
    std::vector<int> labels;
    std::vector<EmbeddingPoint> points;  // label = class, value = class id until recoloured
    std::vector<double> kl;
    double perplexity = 0;  // value actually used
};

/// Feature rows (penultimate layer, eval mode) of the selected samples as doubles.
inline Tensor<double> feature_rows(const ModelInstance<float>& oracle, const DatasetSplit& split,
                                   const NormalizationStats& norm, std::span<const std::size_t> ids,
                                   std::size_t batch_size = 100) {
    const std::size_t F = feature_width(oracle.spec);
    Tensor<double> X(Shape{ids.size(), F});
    for (std::size_t b0 = 0; b0 < ids.size(); b0 += batch_size) {
        auto idx = ids.subspan(b0, std::min(batch_size, ids.size() - b0));
        auto f = extract_features(oracle, make_batch(split, idx, norm));
        for (std::size_t i = 0; i < f.numel(); ++i) X[b0 * F + i] = f[i];
    }
    return X;
}

/// Oracle features of the (capped) test split embedded in 2-D. The coordinates are fixed
/// here once and reused for every sensitivity plot of the same dataset.
inline Embedding oracle_embed(const ModelInstance<float>& oracle, const NormalizationStats& norm,
                              const DatasetSplit& split, const EmbedConfig& cfg = {}) {
    const auto& in = oracle.spec.input;
    if (static_cast<std::size_t>(in.height) != split.height || static_cast<std::size_t>(in.width) != split.width ||
        static_cast<std::size_t>(in.channels) != split.channels)
        throw ConfigError("oracle " + arch_name(oracle.spec) + " expects " + std::to_string(in.height) + "x" +
                          std::to_string(in.width) + "x" + std::to_string(in.channels) + " images, split has " +
                          std::to_string(split.height) + "x" + std::to_string(split.width) + "x" +
                          std::to_string(split.channels));
    if (static_cast<std::size_t>(oracle.spec.num_classes) != split.num_classes)
        throw ConfigError("oracle has " + std::to_string(oracle.spec.num_classes) + " classes, split has " +
                          std::to_string(split.num_classes));
    if (norm.means.size() != split.channels) throw ConfigError("oracle normalization does not match the split");

    Embedding e;
    e.sample_ids = capped_indices(split.size(), cfg.cap, cfg.sample_seed);
    auto X = feature_rows(oracle, split, norm, e.sample_ids, cfg.batch_size);
    TsneConfig tc = cfg.tsne;
    // small test sets cannot support the default perplexity
    const double limit = (static_cast<double>(e.sample_ids.size()) - 1.0) / 3.0;
    if (tc.perplexity >= limit) tc.perplexity = std::max(1.5, 0.99 * limit);
    e.perplexity = tc.perplexity;
    auto r = tsne(X, tc);
    e.kl = std::move(r.kl);
    for (std::size_t i = 0; i < e.sample_ids.size(); ++i) {
        const int label = split.labels[e.sample_ids[i]];
        e.labels.push_back(label);
        e.points.push_back({r.coordinates[i * 2], r.coordinates[i * 2 + 1], label, static_cast<double>(label)});
    }
    return e;
}

/// Same coordinates, coloured by per-sample sensitivity. The report must cover every
/// embedded sample id.
inline std::vector<EmbeddingPoint> color_by_sensitivity(const Embedding& e, const SensitivityReport& r) {
    std::map<std::size_t, double> value;
    for (std::size_t i = 0; i < r.sample_ids.size(); ++i) value[r.sample_ids[i]] = r.values[i];
    auto pts = e.points;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        auto it = value.find(e.sample_ids[i]);
        if (it == value.end())
            throw ConfigError("sensitivity report lacks sample " + std::to_string(e.sample_ids[i]) +
                              "; compute it with the same cap and sample seed as the embedding");
        pts[i].value = it->second;
    }
    return pts;
}

/// sample_id,p1,p2,color
inline void write_points_csv(const std::filesystem::path& path, const std::vector<std::size_t>& ids,
                             const std::vector<EmbeddingPoint>& pts) {
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out.precision(9);
    out << "sample_id,p1,p2,color\n";
    for (std::size_t i = 0; i < pts.size(); ++i)
        out << ids[i] << "," << pts[i].p1 << "," << pts[i].p2 << "," << pts[i].value << "\n";
}

inline Embedding read_points_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    Embedding e;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = detail::split(line, ',');
        if (f.size() != 4) throw FormatError(path.string() + ": bad row '" + line + "'");
        e.sample_ids.push_back(std::stoul(f[0]));
        const double c = std::stod(f[3]);
        e.labels.push_back(static_cast<int>(c));
        e.points.push_back({std::stod(f[1]), std::stod(f[2]), static_cast<int>(c), c});
    }
    return e;
}

}  // namespace bens
