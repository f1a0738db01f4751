#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bens/errors.hpp"
#include "bens/rng.hpp"
#include "bens/tensor.hpp"

namespace bens {

/// Labeled 8-bit images, HWC per image, images stored back to back.
struct DatasetSplit {
    std::size_t height = 32, width = 32, channels = 3;
    std::size_t num_classes = 10;
    std::vector<std::uint8_t> pixels;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t image_size() const { return height * width * channels; }

    std::span<const std::uint8_t> image(std::size_t i) const {
        return std::span<const std::uint8_t>(pixels).subspan(i * image_size(), image_size());
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(num_classes, 0);
        for (int l : labels) ++counts.at(static_cast<std::size_t>(l));
        return counts;
    }

    /// N when every class holds exactly N samples.
    std::optional<std::size_t> per_class() const {
        auto counts = class_counts();
        if (counts.empty() || !std::all_of(counts.begin(), counts.end(), [&](auto c) { return c == counts[0]; }))
            return std::nullopt;
        return counts[0];
    }
    bool balanced() const { return per_class().has_value(); }

    void check() const {
        if (pixels.size() != labels.size() * image_size())
            throw FormatError("split holds " + std::to_string(pixels.size()) + " pixel bytes for " +
                              std::to_string(labels.size()) + " images of " + std::to_string(image_size()));
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
                throw FormatError("label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                                  " outside [0," + std::to_string(num_classes) + ")");
    }

    /// Samples at `indices`, in that order.
    DatasetSplit select(std::span<const std::size_t> indices) const {
        DatasetSplit out;
        out.height = height;
        out.width = width;
        out.channels = channels;
        out.num_classes = num_classes;
        out.pixels.reserve(indices.size() * image_size());
        for (auto i : indices) {
            auto img = image(i);
            out.pixels.insert(out.pixels.end(), img.begin(), img.end());
            out.labels.push_back(labels[i]);
        }
        return out;
    }
};

enum class CifarVariant { cifar10, cifar100 };

namespace detail {

inline std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

inline void put_u32_le(std::vector<char>& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t u32_le(const std::vector<char>& buf, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    return v;
}

}  // namespace detail

/// CIFAR binary batches: per record the label byte(s) then 3072 bytes as R, G, B planes.
/// CIFAR-100 records carry coarse then fine label; the fine label is kept.
inline DatasetSplit load_cifar(const std::vector<std::filesystem::path>& files, CifarVariant variant) {
    const std::size_t label_bytes = variant == CifarVariant::cifar10 ? 1 : 2;
    const std::size_t plane = 32 * 32;
    const std::size_t record = label_bytes + 3 * plane;
    DatasetSplit split;
    split.num_classes = variant == CifarVariant::cifar10 ? 10 : 100;
    for (const auto& path : files) {
        auto bytes = detail::read_file(path);
        if (bytes.size() % record != 0)
            throw FormatError(path.string() + ": truncated record at byte offset " +
                              std::to_string(bytes.size() - bytes.size() % record) + " (record length " +
                              std::to_string(record) + ")");
        const std::size_t n = bytes.size() / record;
        split.pixels.reserve(split.pixels.size() + n * 3 * plane);
        for (std::size_t r = 0; r < n; ++r) {
            const std::size_t off = r * record;
            const std::size_t label_at = off + label_bytes - 1;
            const int label = static_cast<unsigned char>(bytes[label_at]);
            if (static_cast<std::size_t>(label) >= split.num_classes)
                throw FormatError(path.string() + ": label " + std::to_string(label) + " at byte offset " +
                                  std::to_string(label_at) + " exceeds " + std::to_string(split.num_classes - 1));
            split.labels.push_back(label);
            const char* planes = bytes.data() + off + label_bytes;
            for (std::size_t p = 0; p < plane; ++p)
                for (std::size_t c = 0; c < 3; ++c) split.pixels.push_back(static_cast<std::uint8_t>(planes[c * plane + p]));
        }
    }
    return split;
}

/// Train or test split of the published binary distribution below `root` (either the
/// extracted batch directory itself or its parent).
inline DatasetSplit load_cifar_dir(const std::filesystem::path& root, CifarVariant variant, bool train) {
    namespace fs = std::filesystem;
    const char* sub = variant == CifarVariant::cifar10 ? "cifar-10-batches-bin" : "cifar-100-binary";
    fs::path dir = fs::exists(root / sub) ? root / sub : root;
    std::vector<fs::path> files;
    if (variant == CifarVariant::cifar10) {
        if (train)
            for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
        else
            files.push_back(dir / "test_batch.bin");
    } else {
        files.push_back(dir / (train ? "train.bin" : "test.bin"));
    }
    for (const auto& f : files)
        if (!fs::exists(f)) throw FormatError("dataset file " + f.string() + " not found");
    return load_cifar(files, variant);
}

/// "SDS1" portable format: magic, u32 count, H, W, C, K, then per record u32 label and
/// H*W*C bytes (HWC).
inline void save_portable(const std::filesystem::path& path, const DatasetSplit& split) {
    split.check();
    std::vector<char> buf{'S', 'D', 'S', '1'};
    for (auto v : {split.size(), split.height, split.width, split.channels, split.num_classes})
        detail::put_u32_le(buf, static_cast<std::uint32_t>(v));
    for (std::size_t i = 0; i < split.size(); ++i) {
        detail::put_u32_le(buf, static_cast<std::uint32_t>(split.labels[i]));
        auto img = split.image(i);
        buf.insert(buf.end(), img.begin(), img.end());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline DatasetSplit load_portable(const std::filesystem::path& path) {
    auto bytes = detail::read_file(path);
    if (bytes.size() < 24 || std::string(bytes.data(), 4) != "SDS1")
        throw FormatError(path.string() + ": missing SDS1 header");
    DatasetSplit split;
    const std::size_t count = detail::u32_le(bytes, 4);
    split.height = detail::u32_le(bytes, 8);
    split.width = detail::u32_le(bytes, 12);
    split.channels = detail::u32_le(bytes, 16);
    split.num_classes = detail::u32_le(bytes, 20);
    if (split.image_size() == 0) throw FormatError(path.string() + ": zero image extent");
    const std::size_t record = 4 + split.image_size();
    if (bytes.size() < 24 + count * record)
        throw FormatError(path.string() + ": " + std::to_string(count) + " records declared but data ends at byte " +
                          std::to_string(bytes.size()));
    split.pixels.reserve(count * split.image_size());
    for (std::size_t r = 0; r < count; ++r) {
        const std::size_t off = 24 + r * record;
        const std::uint32_t label = detail::u32_le(bytes, off);
        if (label >= split.num_classes)
            throw FormatError(path.string() + ": label " + std::to_string(label) + " at byte offset " +
                              std::to_string(off) + " is not below K=" + std::to_string(split.num_classes));
        split.labels.push_back(static_cast<int>(label));
        split.pixels.insert(split.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(off + 4),
                            bytes.begin() + static_cast<std::ptrdiff_t>(off + record));
    }
    return split;
}

/// Indices of exactly N samples per class, drawn without replacement; returned in
/// increasing order so the original order within each class is kept.
inline std::vector<std::size_t> subsample_indices(const DatasetSplit& split, std::size_t n, std::uint64_t seed) {
    std::vector<std::vector<std::size_t>> by_class(split.num_classes);
    for (std::size_t i = 0; i < split.size(); ++i) by_class.at(static_cast<std::size_t>(split.labels[i])).push_back(i);
    const RngStream root(seed, stream_id({0x5ab5ULL}));
    std::vector<std::size_t> chosen;
    chosen.reserve(n * split.num_classes);
    for (std::size_t k = 0; k < split.num_classes; ++k) {
        auto& pool = by_class[k];
        if (pool.size() < n)
            throw ConfigError("class " + std::to_string(k) + " has " + std::to_string(pool.size()) +
                              " samples, fewer than N=" + std::to_string(n));
        RngStream rng = root.derive({k});
        // partial Fisher-Yates: the first n slots end up a uniform sample
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(pool.size() - i));
            std::swap(pool[i], pool[j]);
        }
        chosen.insert(chosen.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

inline DatasetSplit subsample_balanced(const DatasetSplit& split, std::size_t n, std::uint64_t seed) {
    auto idx = subsample_indices(split, n, seed);
    return split.select(idx);
}

/// Per-channel pixel means (0..255 scale).
struct NormalizationStats {
    std::vector<float> means;
};

inline NormalizationStats channel_means(const DatasetSplit& split) {
    if (split.size() == 0) throw ConfigError("channel means of an empty split");
    std::vector<double> acc(split.channels, 0.0);
    for (std::size_t i = 0; i < split.pixels.size(); ++i) acc[i % split.channels] += split.pixels[i];
    NormalizationStats s;
    const double n = static_cast<double>(split.pixels.size() / split.channels);
    for (double a : acc) s.means.push_back(static_cast<float>(a / n));
    return s;
}

/// uint8 image -> float [H,W,C] in pixel units.
inline Tensor<float> to_float(const DatasetSplit& split, std::size_t i) {
    Tensor<float> t(Shape{split.height, split.width, split.channels});
    auto img = split.image(i);
    std::copy(img.begin(), img.end(), t.data().begin());
    return t;
}

/// Subtracts the channel means in place (no division).
inline void normalize(Tensor<float>& image, const NormalizationStats& stats) {
    const std::size_t C = stats.means.size();
    if (image.shape().back() != C) throw ShapeError("normalize: image has " + std::to_string(image.shape().back()) +
                                                    " channels, stats have " + std::to_string(C));
    auto d = image.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= stats.means[i % C];
}

inline void denormalize(Tensor<float>& image, const NormalizationStats& stats) {
    const std::size_t C = stats.means.size();
    auto d = image.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += stats.means[i % C];
}

/// Eval batch of samples `indices`: normalized float images [B,H,W,C].
inline Tensor<float> make_batch(const DatasetSplit& split, std::span<const std::size_t> indices,
                                const NormalizationStats& stats) {
    Tensor<float> batch(Shape{indices.size(), split.height, split.width, split.channels});
    const std::size_t sz = split.image_size();
    const std::size_t C = split.channels;
    for (std::size_t b = 0; b < indices.size(); ++b) {
        auto img = split.image(indices[b]);
        for (std::size_t p = 0; p < sz; ++p) batch[b * sz + p] = static_cast<float>(img[p]) - stats.means[p % C];
    }
    return batch;
}

/// Gaussian blobs around K random corner-like centres; `separation` is the centre offset
/// per pixel divided by the noise standard deviation.
inline DatasetSplit synth_clusters(std::size_t num_classes, std::size_t per_class, std::size_t height, std::size_t width,
                                   std::size_t channels, double separation, std::uint64_t seed) {
    if (separation <= 0) throw ConfigError("synth_clusters: separation must be positive");
    if (num_classes < 1 || height < 1 || width < 1 || channels < 1) throw ConfigError("synth_clusters: empty shape");
    DatasetSplit split;
    split.height = height;
    split.width = width;
    split.channels = channels;
    split.num_classes = num_classes;
    const std::size_t D = split.image_size();
    const double offset = 60.0;
    const double sigma = offset / separation;
    RngStream centre_rng(seed, stream_id({0xc1ULL}));
    std::vector<std::vector<double>> centres(num_classes, std::vector<double>(D));
    for (auto& c : centres)
        for (auto& v : c) v = 127.5 + (centre_rng.bernoulli(0.5) ? offset : -offset);
    RngStream rng(seed, stream_id({0xc2ULL}));
    for (std::size_t k = 0; k < num_classes; ++k)
        for (std::size_t i = 0; i < per_class; ++i) {
            split.labels.push_back(static_cast<int>(k));
            for (std::size_t d = 0; d < D; ++d) {
                double v = std::clamp(centres[k][d] + rng.normal() * sigma, 0.0, 255.0);
                split.pixels.push_back(static_cast<std::uint8_t>(std::lround(v)));
            }
        }
    return split;
}

/// Dataset root from the environment (BENS_DATA_ROOT), if set.
inline std::optional<std::filesystem::path> data_root_from_env() {
    if (const char* v = std::getenv("BENS_DATA_ROOT"); v && *v) return std::filesystem::path(v);
    return std::nullopt;
}

}  // namespace bens
