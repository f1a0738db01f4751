#pragma once

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "bens/augment.hpp"
#include "bens/checkpoint.hpp"
#include "bens/model.hpp"
#include "bens/optim.hpp"

namespace bens {

enum class OptimizerKind { sgd_nesterov, adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd-nesterov"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
    if (s == "sgd-nesterov" || s == "sgd") return OptimizerKind::sgd_nesterov;
    if (s == "adam") return OptimizerKind::adam;
    throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

struct TrainingSchedule {
    int epochs = 100;
    std::size_t batch_size = 32;
    OptimizerKind optimizer = OptimizerKind::sgd_nesterov;
    double lr0 = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    AdamConfig adam{};
    double decay_fraction = 0.75;
    double decay_factor = 0.1;
    bool independent_member_augmentation = false;

    std::size_t batches_per_epoch(std::size_t samples) const { return (samples + batch_size - 1) / batch_size; }
    std::size_t total_iterations(std::size_t samples) const {
        return static_cast<std::size_t>(epochs) * batches_per_epoch(samples);
    }
    std::size_t decay_iteration(std::size_t total) const {
        return static_cast<std::size_t>(std::floor(decay_fraction * static_cast<double>(total)));
    }
    double base_rate() const { return optimizer == OptimizerKind::adam ? adam.step : lr0; }
};

/// Epochs per samples-per-class: {10: 400, 50: 300, 100: 300, 250: 250}.
inline int epochs_for(std::size_t n_per_class, std::optional<int> override_epochs = std::nullopt) {
    if (override_epochs) {
        if (*override_epochs < 1) throw ConfigError("epoch override must be positive");
        return *override_epochs;
    }
    switch (n_per_class) {
        case 10: return 400;
        case 50: return 300;
        case 100: return 300;
        case 250: return 250;
        default: break;
    }
    throw ConfigError("no epoch budget for N=" + std::to_string(n_per_class) + "; set epochs explicitly");
}

/// lr0 before floor(0.75 * total), lr0 * 0.1 from there on.
inline double lr_at(std::size_t iteration, std::size_t total, double lr0, double decay_fraction = 0.75,
                    double decay_factor = 0.1) {
    const auto decay = static_cast<std::size_t>(std::floor(decay_fraction * static_cast<double>(total)));
    return iteration < decay ? lr0 : lr0 * decay_factor;
}

/// 0.01 for resnet of depth >= 26 on cifar10 and resnet-110 on cifar100, else 0.1.
inline double default_lr0(const ArchitectureSpec& spec, std::string_view dataset) {
    if (spec.family == Family::resnet) {
        if (dataset == "cifar10" && spec.depth >= 26) return 0.01;
        if (dataset == "cifar100" && spec.depth >= 110) return 0.01;
    }
    return 0.1;
}

/// Recipe defaults: Adam for VGG, Nesterov SGD otherwise.
inline TrainingSchedule default_schedule(const ArchitectureSpec& spec, std::string_view dataset, std::size_t n_per_class,
                                         std::optional<int> epochs = std::nullopt) {
    TrainingSchedule s;
    s.epochs = epochs_for(n_per_class, epochs);
    s.optimizer = spec.family == Family::vgg ? OptimizerKind::adam : OptimizerKind::sgd_nesterov;
    s.lr0 = default_lr0(spec, dataset);
    return s;
}

/// Stream tags. Every random draw of a run derives from (seed, tag, ...).
namespace streams {
inline constexpr std::uint64_t init = 0x1417;
inline constexpr std::uint64_t dropout = 0xd40f;
inline constexpr std::uint64_t order = 0x0bde;
inline constexpr std::uint64_t augment = 0xa06e;
}  // namespace streams

inline RngStream member_init_stream(std::uint64_t seed, std::size_t member) {
    return RngStream(seed, stream_id({streams::init, member}));
}

/// M homogeneous members averaged through phi.
struct EnsembleModel {
    std::vector<ModelInstance<float>> members;
    std::vector<std::vector<double>> loss_traces;  // per member, mean loss per epoch
    NormalizationStats normalization;
    std::uint64_t seed = 0;

    std::size_t size() const { return members.size(); }
    const ArchitectureSpec& spec() const {
        if (members.empty()) throw ConfigError("empty ensemble");
        return members.front().spec;
    }
    Head head() const { return spec().head; }
    std::string phi_name() const { return head() == Head::softmax_xe ? "softmax" : "cosine-affine"; }
};

struct TrainOptions {
    int workers = 1;
    std::function<void(std::size_t member, int epoch, double mean_loss)> on_epoch;
};

namespace detail {

struct MemberState {
    ModelInstance<float> model;
    std::vector<Tensor<float>> velocity;
    std::vector<AdamState<float>> adam;
    RngStream dropout;
    std::vector<double> trace;
};

inline void optimizer_step(MemberState& st, const TrainingSchedule& s, const Gradients<float>& grads,
                           const std::vector<Var<float>>& vars, double rate) {
    auto& params = st.model.params;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& g = grads.of(vars[i]);
        if (s.optimizer == OptimizerKind::sgd_nesterov)
            sgd_nesterov_step(params[i].value, g, st.velocity[i], rate, s.momentum,
                              params[i].decay ? s.weight_decay : 0.0);
        else
            adam_step(params[i].value, g, st.adam[i], s.adam, rate);
    }
}

/// Full schedule for the listed members. Batches are rebuilt here from the shared order
/// and augmentation streams, so any partition of members yields the same batches.
inline void train_members(std::vector<MemberState*> members, const std::vector<std::size_t>& member_ids,
                          const DatasetSplit& data, const NormalizationStats& norm, const TrainingSchedule& s,
                          const AugmentationPolicy& policy, std::uint64_t seed, const TrainOptions& opt,
                          std::mutex& callback_lock) {
    const std::size_t n = data.size();
    const std::size_t total = s.total_iterations(n);
    const std::size_t K = data.num_classes;
    std::vector<std::size_t> order(n);
    std::vector<int> labels;
    std::size_t iteration = 0;
    for (int epoch = 0; epoch < s.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        RngStream order_rng(seed, stream_id({streams::order, static_cast<std::uint64_t>(epoch)}));
        order_rng.shuffle(std::span<std::size_t>(order));
        std::vector<double> epoch_loss(members.size(), 0.0);
        for (std::size_t b0 = 0, bi = 0; b0 < n; b0 += s.batch_size, ++bi, ++iteration) {
            const auto idx = std::span<const std::size_t>(order).subspan(b0, std::min(s.batch_size, n - b0));
            const double rate = lr_at(iteration, total, s.base_rate(), s.decay_fraction, s.decay_factor);
            const RngStream shared(seed, stream_id({streams::augment, static_cast<std::uint64_t>(epoch), bi}));
            Tensor<float> batch;
            Tensor<float> targets;
            bool built = false;
            for (std::size_t j = 0; j < members.size(); ++j) {
                if (!built || s.independent_member_augmentation) {
                    const RngStream aug = s.independent_member_augmentation ? shared.derive({member_ids[j]}) : shared;
                    batch = make_augmented_batch(data, idx, norm, policy, aug, labels);
                    targets = one_hot<float>(labels, K);
                    built = true;
                }
                MemberState& st = *members[j];
                Tape<float> tape;
                auto vars = bind_parameters(st.model, tape, true);
                auto x = tape.constant(batch);
                auto out = forward<float>(st.model, vars, x, Mode::train, &st.model.bn_stats, &st.dropout);
                auto L = loss(st.model.spec.head, out.output, targets);
                const double lv = L.value().item();
                if (!std::isfinite(lv))
                    throw TrainingError("non-finite loss at iteration " + std::to_string(iteration), epoch,
                                        static_cast<int>(member_ids[j]));
                auto grads = tape.backward(L);
                optimizer_step(st, s, grads, vars, rate);
                epoch_loss[j] += lv * static_cast<double>(idx.size());
            }
        }
        for (std::size_t j = 0; j < members.size(); ++j) {
            const double mean = epoch_loss[j] / static_cast<double>(n);
            members[j]->trace.push_back(mean);
            if (opt.on_epoch) {
                std::lock_guard<std::mutex> lock(callback_lock);
                opt.on_epoch(member_ids[j], epoch, mean);
            }
        }
    }
}

}  // namespace detail

/// Trains M members on one shared batch sequence. Member m initializes from stream
/// (seed, init, m) and draws dropout masks from (seed, dropout, m); the sample order and
/// augmentation come from streams shared by all members. Members may be spread over
/// `workers` threads without changing any result.
inline EnsembleModel train_ensemble(const ArchitectureSpec& spec, std::size_t members, const DatasetSplit& data,
                                    const TrainingSchedule& schedule, const AugmentationPolicy& policy,
                                    std::uint64_t seed, const TrainOptions& opt = {}) {
    if (members < 1) throw ConfigError("ensemble needs at least one member");
    if (data.size() == 0) throw ConfigError("training split is empty");
    if (static_cast<std::size_t>(spec.num_classes) != data.num_classes)
        throw ConfigError(arch_name(spec) + " has " + std::to_string(spec.num_classes) + " classes, data has " +
                          std::to_string(data.num_classes));
    data.check();
    EnsembleModel ens;
    ens.seed = seed;
    ens.normalization = channel_means(data);

    std::vector<detail::MemberState> states;
    states.reserve(members);
    for (std::size_t m = 0; m < members; ++m) {
        detail::MemberState st{build<float>(spec, member_init_stream(seed, m)), {}, {},
                               RngStream(seed, stream_id({streams::dropout, m})), {}};
        for (const auto& p : st.model.params) {
            if (schedule.optimizer == OptimizerKind::sgd_nesterov)
                st.velocity.emplace_back(p.value.shape(), 0.0f);
            else
                st.adam.emplace_back(p.value.shape());
        }
        states.push_back(std::move(st));
    }

    const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(opt.workers, 1)), 1, members);
    std::mutex callback_lock;
    std::vector<std::exception_ptr> errors(workers);
    auto run = [&](std::size_t w) {
        try {
            std::vector<detail::MemberState*> mine;
            std::vector<std::size_t> ids;
            for (std::size_t m = w; m < members; m += workers) {
                mine.push_back(&states[m]);
                ids.push_back(m);
            }
            detail::train_members(mine, ids, data, ens.normalization, schedule, policy, seed, opt, callback_lock);
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };
    if (workers == 1) {
        run(0);
    } else {
        std::vector<std::thread> threads;
        for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(run, w);
        for (auto& t : threads) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    for (auto& st : states) {
        ens.members.push_back(std::move(st.model));
        ens.loss_traces.push_back(std::move(st.trace));
    }
    return ens;
}

struct TrainedMember {
    ModelInstance<float> model;
    std::vector<double> loss_trace;
    NormalizationStats normalization;
};

/// Single network; identical to member 0 of train_ensemble with the same seed.
inline TrainedMember train_member(const ArchitectureSpec& spec, const DatasetSplit& data, const TrainingSchedule& schedule,
                                  const AugmentationPolicy& policy, std::uint64_t seed, const TrainOptions& opt = {}) {
    auto ens = train_ensemble(spec, 1, data, schedule, policy, seed, opt);
    return {std::move(ens.members[0]), std::move(ens.loss_traces[0]), std::move(ens.normalization)};
}

/// Writes member_<m>.ckpt files and ensemble.txt (members, phi, member files) to `dir`.
inline void save_ensemble(const std::filesystem::path& dir, const EnsembleModel& ens) {
    std::filesystem::create_directories(dir);
    std::ostringstream manifest;
    manifest << "BENSENSEMBLE 1\n";
    manifest << "architecture = " << arch_name(ens.spec()) << "\n";
    manifest << "members = " << ens.size() << "\n";
    manifest << "phi = " << ens.phi_name() << "\n";
    manifest << "seed = " << ens.seed << "\n";
    for (std::size_t m = 0; m < ens.size(); ++m) {
        const std::string file = "member_" + std::to_string(m) + ".ckpt";
        save_checkpoint(dir / file, ens.members[m], ens.normalization);
        manifest << "member = " << file << "\n";
    }
    std::ofstream out(dir / "ensemble.txt", std::ios::binary);
    out << manifest.str();
    if (!out) throw FormatError("cannot write " + (dir / "ensemble.txt").string());
}

inline EnsembleModel load_ensemble(const std::filesystem::path& dir) {
    std::ifstream in(dir / "ensemble.txt");
    if (!in) throw FormatError("no ensemble manifest in " + dir.string());
    std::string line;
    if (!std::getline(in, line) || line != "BENSENSEMBLE 1") throw FormatError(dir.string() + ": bad ensemble manifest");
    EnsembleModel ens;
    std::size_t declared = 0;
    while (std::getline(in, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const auto key = detail::trim(line.substr(0, eq));
        const auto value = detail::trim(line.substr(eq + 1));
        if (key == "members") declared = std::stoul(value);
        if (key == "seed") ens.seed = std::stoull(value);
        if (key == "member") {
            auto loaded = load_checkpoint(dir / value);
            if (!ens.members.empty() && !(loaded.model.spec == ens.spec()))
                throw FormatError(dir.string() + ": members disagree on architecture");
            if (loaded.normalization) ens.normalization = *loaded.normalization;
            ens.members.push_back(std::move(loaded.model));
        }
    }
    if (declared != ens.members.size())
        throw FormatError(dir.string() + ": manifest declares " + std::to_string(declared) + " members, found " +
                          std::to_string(ens.members.size()));
    return ens;
}

}  // namespace bens
