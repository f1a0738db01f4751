#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bens/augment.hpp"
#include "bens/checkpoint.hpp"
#include "bens/eval.hpp"
#include "bens/train.hpp"

namespace bens {

enum class Design { ensemble, deep, wide, base };

inline std::string to_string(Design d) {
    switch (d) {
        case Design::ensemble: return "ensemble";
        case Design::deep: return "deep";
        case Design::wide: return "wide";
        case Design::base: return "base";
    }
    return "?";
}

inline Design parse_design(std::string_view s) {
    if (s == "ensemble") return Design::ensemble;
    if (s == "deep") return Design::deep;
    if (s == "wide") return Design::wide;
    if (s == "base") return Design::base;
    throw ConfigError("unknown design '" + std::string(s) + "' (ensemble, deep, wide, base)");
}

/// One experiment grid. `members` doubles as the list of budget multipliers: budget M
/// pits M base networks against the deep and wide single networks of the same cost.
struct ExperimentConfig {
    std::string dataset;  // cifar10 | cifar100 | portable | synthetic
    ArchitectureSpec base;
    std::optional<std::filesystem::path> data_root;
    std::optional<std::filesystem::path> train_file, test_file;  // portable
    std::vector<std::size_t> n_per_class{10, 50, 100, 250};
    AugLevel aug = AugLevel::plus;
    std::vector<std::size_t> members{5};
    std::vector<Design> designs{Design::ensemble, Design::deep, Design::wide};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::optional<int> epochs;
    std::optional<std::size_t> batch_size;
    std::optional<double> lr0;
    std::optional<OptimizerKind> optimizer;
    bool independent_member_augmentation = false;
    std::optional<std::size_t> sensitivity_cap = kSensitivityCap;
    std::uint64_t sample_seed = 0;
    std::string oracle = "deep";  // deep | base | <arch name>
    int oracle_epochs = 100;
    std::uint64_t oracle_seed = 1;
    double tsne_perplexity = 30.0;
    int tsne_iterations = 1000;
    std::size_t synthetic_classes = 10;
    std::size_t synthetic_side = 32;
    std::size_t synthetic_train_per_class = 250;
    std::size_t synthetic_test_per_class = 100;
    double synthetic_separation = 1.0;
    std::uint64_t synthetic_seed = 7;
    std::filesystem::path out = "runs";
    int workers = 1;
};

namespace detail {

template <class T>
std::string join(const std::vector<T>& v, const std::string& sep = ",") {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) os << sep;
        if constexpr (std::is_same_v<T, Design>)
            os << to_string(v[i]);
        else
            os << v[i];
    }
    return os.str();
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace detail

/// Canonical key = value text. Parsing it gives back an equal configuration.
inline std::string serialize(const ExperimentConfig& c) {
    std::ostringstream os;
    os << "dataset = " << c.dataset << "\n";
    os << "base = " << arch_name(c.base) << "\n";
    os << "head = " << to_string(c.base.head) << "\n";
    if (c.base.dropout) os << "dropout = " << detail::format_double(*c.base.dropout) << "\n";
    if (c.data_root) os << "data_root = " << c.data_root->string() << "\n";
    if (c.train_file) os << "train_file = " << c.train_file->string() << "\n";
    if (c.test_file) os << "test_file = " << c.test_file->string() << "\n";
    os << "n_per_class = " << detail::join(c.n_per_class) << "\n";
    os << "aug = " << to_string(c.aug) << "\n";
    os << "members = " << detail::join(c.members) << "\n";
    os << "designs = " << detail::join(c.designs) << "\n";
    os << "seeds = " << detail::join(c.seeds) << "\n";
    if (c.epochs) os << "epochs = " << *c.epochs << "\n";
    if (c.batch_size) os << "batch_size = " << *c.batch_size << "\n";
    if (c.lr0) os << "lr0 = " << detail::format_double(*c.lr0) << "\n";
    if (c.optimizer) os << "optimizer = " << to_string(*c.optimizer) << "\n";
    os << "independent_member_augmentation = " << (c.independent_member_augmentation ? "true" : "false") << "\n";
    os << "sensitivity_cap = " << (c.sensitivity_cap ? std::to_string(*c.sensitivity_cap) : "none") << "\n";
    os << "sample_seed = " << c.sample_seed << "\n";
    os << "oracle = " << c.oracle << "\n";
    os << "oracle_epochs = " << c.oracle_epochs << "\n";
    os << "oracle_seed = " << c.oracle_seed << "\n";
    os << "tsne_perplexity = " << detail::format_double(c.tsne_perplexity) << "\n";
    os << "tsne_iterations = " << c.tsne_iterations << "\n";
    if (c.dataset == "synthetic") {
        os << "synthetic_classes = " << c.synthetic_classes << "\n";
        os << "synthetic_side = " << c.synthetic_side << "\n";
        os << "synthetic_train_per_class = " << c.synthetic_train_per_class << "\n";
        os << "synthetic_test_per_class = " << c.synthetic_test_per_class << "\n";
        os << "synthetic_separation = " << detail::format_double(c.synthetic_separation) << "\n";
        os << "synthetic_seed = " << c.synthetic_seed << "\n";
    }
    os << "out = " << c.out.string() << "\n";
    os << "workers = " << c.workers << "\n";
    return os.str();
}

namespace detail {

inline std::uint64_t parse_uint(const std::string& v) {
    std::size_t used = 0;
    unsigned long long x = 0;
    try {
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
        x = std::stoull(v, &used);
    } catch (const std::exception&) {
        throw ConfigError("'" + v + "' is not a non-negative integer");
    }
    if (used != v.size()) throw ConfigError("'" + v + "' is not a non-negative integer");
    return x;
}

inline double parse_real(const std::string& v) {
    std::size_t used = 0;
    double x = 0;
    try {
        x = std::stod(v, &used);
    } catch (const std::exception&) {
        throw ConfigError("'" + v + "' is not a number");
    }
    if (used != v.size() || !std::isfinite(x)) throw ConfigError("'" + v + "' is not a finite number");
    return x;
}

inline bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("'" + v + "' is not a boolean");
}

template <class F>
auto parse_list(const std::string& v, F item) {
    std::vector<decltype(item(std::string{}))> out;
    for (const auto& part : split(v, ',')) {
        if (part.empty()) throw ConfigError("empty list entry in '" + v + "'");
        out.push_back(item(part));
    }
    if (out.empty()) throw ConfigError("empty list");
    return out;
}

}  // namespace detail

/// Line-oriented "key = value" text, '#' starts a comment. Unknown keys, duplicate keys
/// and invalid values are errors naming the line.
inline ExperimentConfig parse_config_text(const std::string& text, const std::string& origin = "config") {
    ExperimentConfig c;
    std::map<std::string, std::pair<std::string, int>> kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
        auto key = detail::trim(line.substr(0, eq));
        auto value = detail::trim(line.substr(eq + 1));
        if (kv.count(key)) throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
        kv[key] = {value, lineno};
    }
    std::vector<std::string> missing;
    for (const char* req : {"dataset", "base"})
        if (!kv.count(req)) missing.push_back(req);
    if (!missing.empty()) throw ConfigError(origin + ": missing required keys: " + detail::join(missing, ", "));

    // head and dropout feed into the base spec, so they are read first
    std::string head = "softmax-xe";
    std::optional<double> dropout;
    for (const auto& [key, entry] : kv) {
        const auto& [v, ln] = entry;
        auto at = [&, ln = ln](const std::string& msg) {
            return ConfigError(origin + ":" + std::to_string(ln) + ": " + key + ": " + msg);
        };
        try {
            if (key == "dataset") {
                if (v != "cifar10" && v != "cifar100" && v != "portable" && v != "synthetic")
                    throw ConfigError("'" + v + "' is not one of cifar10, cifar100, portable, synthetic");
                c.dataset = v;
            } else if (key == "base") {
                c.base = parse_arch(v);
            } else if (key == "head") {
                parse_head(v);
                head = v;
            } else if (key == "dropout") {
                dropout = detail::parse_real(v);
            } else if (key == "data_root") {
                c.data_root = v;
            } else if (key == "train_file") {
                c.train_file = v;
            } else if (key == "test_file") {
                c.test_file = v;
            } else if (key == "n_per_class") {
                c.n_per_class = detail::parse_list(v, [](const std::string& s) { return detail::parse_uint(s); });
            } else if (key == "aug") {
                c.aug = parse_aug_level(v);
            } else if (key == "members") {
                c.members = detail::parse_list(v, [](const std::string& s) { return detail::parse_uint(s); });
            } else if (key == "designs") {
                c.designs = detail::parse_list(v, [](const std::string& s) { return parse_design(s); });
            } else if (key == "seeds") {
                c.seeds = detail::parse_list(v, [](const std::string& s) { return detail::parse_uint(s); });
            } else if (key == "epochs") {
                c.epochs = static_cast<int>(detail::parse_uint(v));
            } else if (key == "batch_size") {
                c.batch_size = detail::parse_uint(v);
            } else if (key == "lr0") {
                c.lr0 = detail::parse_real(v);
            } else if (key == "optimizer") {
                c.optimizer = parse_optimizer(v);
            } else if (key == "independent_member_augmentation") {
                c.independent_member_augmentation = detail::parse_bool(v);
            } else if (key == "sensitivity_cap") {
                if (v == "none")
                    c.sensitivity_cap.reset();
                else
                    c.sensitivity_cap = detail::parse_uint(v);
            } else if (key == "sample_seed") {
                c.sample_seed = detail::parse_uint(v);
            } else if (key == "oracle") {
                c.oracle = v;
            } else if (key == "oracle_epochs") {
                c.oracle_epochs = static_cast<int>(detail::parse_uint(v));
            } else if (key == "oracle_seed") {
                c.oracle_seed = detail::parse_uint(v);
            } else if (key == "tsne_perplexity") {
                c.tsne_perplexity = detail::parse_real(v);
            } else if (key == "tsne_iterations") {
                c.tsne_iterations = static_cast<int>(detail::parse_uint(v));
            } else if (key == "synthetic_classes") {
                c.synthetic_classes = detail::parse_uint(v);
            } else if (key == "synthetic_side") {
                c.synthetic_side = detail::parse_uint(v);
            } else if (key == "synthetic_train_per_class") {
                c.synthetic_train_per_class = detail::parse_uint(v);
            } else if (key == "synthetic_test_per_class") {
                c.synthetic_test_per_class = detail::parse_uint(v);
            } else if (key == "synthetic_separation") {
                c.synthetic_separation = detail::parse_real(v);
            } else if (key == "synthetic_seed") {
                c.synthetic_seed = detail::parse_uint(v);
            } else if (key == "out") {
                c.out = v;
            } else if (key == "workers") {
                c.workers = static_cast<int>(detail::parse_uint(v));
            } else {
                throw ConfigError("unknown key");
            }
        } catch (const ConfigError& e) {
            throw at(e.what());
        }
    }

    auto fail = [&](const std::string& key, const std::string& msg) {
        return ConfigError(origin + ":" + std::to_string(kv.count(key) ? kv[key].second : 0) + ": " + key + ": " + msg);
    };
    c.base.head = parse_head(head);
    c.base.dropout = dropout;
    if (c.dataset == "cifar100") c.base.num_classes = 100;
    if (c.dataset == "synthetic") {
        c.base.num_classes = static_cast<int>(c.synthetic_classes);
        c.base.input = {static_cast<int>(c.synthetic_side), static_cast<int>(c.synthetic_side), 3};
    }
    if (c.dataset == "portable" && (!c.train_file || !c.test_file))
        throw fail("dataset", "portable datasets need train_file and test_file");
    if (auto d = validate(c.base)) throw fail("base", d->message);
    for (auto m : c.members)
        if (m < 1) throw fail("members", "budget multipliers must be at least 1");
    for (auto n : c.n_per_class)
        if (n < 1) throw fail("n_per_class", "N must be at least 1");
    if (c.seeds.empty()) throw fail("seeds", "at least one seed is required");
    if (c.epochs && *c.epochs < 1) throw fail("epochs", "must be positive");
    if (c.batch_size && *c.batch_size < 1) throw fail("batch_size", "must be positive");
    if (c.workers < 1) throw fail("workers", "must be positive");
    if (c.oracle != "deep" && c.oracle != "base") {
        try {
            require_valid(parse_arch(c.oracle, c.base.num_classes));
        } catch (const ConfigError& e) {
            throw fail("oracle", e.what());
        }
    }
    return c;
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path.string());
}

}  // namespace bens
