#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bens/data.hpp"
#include "bens/model.hpp"

namespace bens {

/// Model read back from disk together with the normalization it was trained with.
struct LoadedModel {
    ModelInstance<float> model;
    std::optional<NormalizationStats> normalization;
};

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    return out;
}

inline std::string format_float(double v) {
    std::ostringstream os;
    os.precision(9);
    os << v;
    return os.str();
}

}  // namespace detail

inline std::string input_str(const InputShape& in) {
    return std::to_string(in.height) + "x" + std::to_string(in.width) + "x" + std::to_string(in.channels);
}

inline InputShape parse_input(const std::string& s) {
    auto parts = detail::split(s, 'x');
    if (parts.size() != 3) throw ConfigError("input shape '" + s + "' is not HxWxC");
    return InputShape{std::stoi(parts[0]), std::stoi(parts[1]), std::stoi(parts[2])};
}

/// Writes "BENSCKPT 1", the key = value manifest, a blank line, then one record per
/// tensor: u32 name length, name bytes, TNSR block. Parameters come first, then the
/// batch-norm running mean/var of every layer.
inline void save_checkpoint(const std::filesystem::path& path, const ModelInstance<float>& m,
                            const std::optional<NormalizationStats>& norm = std::nullopt) {
    std::ostringstream os;
    const auto& s = m.spec;
    os << "BENSCKPT 1\n";
    os << "family = " << to_string(s.family) << "\n";
    os << "depth = " << s.depth << "\n";
    os << "width = " << s.width << "\n";
    os << "num_classes = " << s.num_classes << "\n";
    os << "head = " << to_string(s.head) << "\n";
    os << "input = " << input_str(s.input) << "\n";
    os << "dropout = " << detail::format_float(s.dropout_rate()) << "\n";
    os << "tensors = " << m.params.size() + 2 * m.bn_stats.size() << "\n";
    if (norm) {
        os << "channel_means = ";
        for (std::size_t c = 0; c < norm->means.size(); ++c) os << (c ? "," : "") << detail::format_float(norm->means[c]);
        os << "\n";
    }
    os << "\n";
    auto record = [&](const std::string& name, const Tensor<float>& t) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tnsr(os, t);
    };
    for (const auto& p : m.params) record(p.name, p.value);
    for (std::size_t i = 0; i < m.bn_stats.size(); ++i) {
        record(m.stats_names[i] + ".running_mean", m.bn_stats[i].mean);
        record(m.stats_names[i] + ".running_var", m.bn_stats[i].var);
    }
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write checkpoint " + path.string());
    const auto bytes = os.str();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline LoadedModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "BENSCKPT 1") throw FormatError(path.string() + ": not a BENSCKPT 1 checkpoint");
    std::map<std::string, std::string> kv;
    while (std::getline(in, line) && !line.empty()) {
        auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError(path.string() + ": manifest line '" + line + "' lacks '='");
        kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
    }
    auto get = [&](const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end()) throw FormatError(path.string() + ": manifest misses '" + key + "'");
        return it->second;
    };
    ArchitectureSpec spec;
    spec.family = parse_family(get("family"));
    spec.depth = std::stoi(get("depth"));
    spec.width = std::stoi(get("width"));
    spec.num_classes = std::stoi(get("num_classes"));
    spec.head = parse_head(get("head"));
    spec.input = parse_input(get("input"));
    spec.dropout = std::stod(get("dropout"));

    LoadedModel out{build<float>(spec, RngStream(0, 0)), std::nullopt};
    auto& m = out.model;
    if (kv.count("channel_means")) {
        NormalizationStats n;
        for (const auto& v : detail::split(kv["channel_means"], ',')) n.means.push_back(std::stof(v));
        out.normalization = n;
    }
    std::map<std::string, Tensor<float>*> slots;
    for (auto& p : m.params) slots[p.name] = &p.value;
    for (std::size_t i = 0; i < m.bn_stats.size(); ++i) {
        slots[m.stats_names[i] + ".running_mean"] = &m.bn_stats[i].mean;
        slots[m.stats_names[i] + ".running_var"] = &m.bn_stats[i].var;
    }
    const std::size_t count = std::stoul(get("tensors"));
    if (count != slots.size())
        throw FormatError(path.string() + ": " + std::to_string(count) + " tensors recorded, " + arch_name(spec) +
                          " has " + std::to_string(slots.size()));
    for (std::size_t i = 0; i < count; ++i) {
        const auto len = detail::get_u32(in, "tensor name length");
        std::string name(len, '\0');
        in.read(name.data(), len);
        if (!in) throw FormatError(path.string() + ": truncated tensor name");
        auto it = slots.find(name);
        if (it == slots.end()) throw FormatError(path.string() + ": unexpected tensor '" + name + "'");
        auto t = read_tnsr(in);
        if (t.shape() != it->second->shape())
            throw FormatError(path.string() + ": tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                              shape_str(it->second->shape()));
        *it->second = std::move(t);
    }
    return out;
}

}  // namespace bens
