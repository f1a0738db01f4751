#pragma once

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "bens/config.hpp"
#include "bens/embed.hpp"
#include "bens/eval.hpp"
#include "bens/planner.hpp"
#include "bens/train.hpp"

namespace bens {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

inline constexpr const char* kResultsHeader =
    "dataset,family,depth,width,members,n_per_class,aug,seed,accuracy,mean_sensitivity,wall_seconds";
inline constexpr const char* kPlanHeader = "budget,design,family,depth,width,members,flops,relative_error";

// single-thread multiply-accumulate rate for runtime estimates (about 5e9 measured on small nets)
inline constexpr double kAssumedMacsPerSecond = 4e9;

/// One (design, N, seed) cell of the grid.
struct Job {
    Design design = Design::ensemble;
    std::size_t budget = 1;
    ArchitectureSpec spec;
    std::size_t members = 1;
    std::size_t n_per_class = 0;  // 0: full training set (oracle)
    std::uint64_t seed = 1;

    std::string key() const {
        std::string k = to_string(design) + "_" + arch_name(spec) + "_m" + std::to_string(members);
        k += n_per_class ? "_n" + std::to_string(n_per_class) : std::string("_full");
        return k + "_s" + std::to_string(seed);
    }
};

struct PlanRow {
    std::size_t budget;
    Design design;
    ArchitectureSpec spec;
    std::size_t members;
    FlopCount flops;
    double relative_error;
};

struct DataBundle {
    DatasetSplit train, test;
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex16(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw FormatError("cannot open " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes only when the content changes, so re-running leaves existing bytes alone.
inline bool write_if_changed(const fs::path& p, const std::string& text) {
    if (fs::exists(p) && read_text(p) == text) return false;
    if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        out << text;
        if (!out) throw FormatError("cannot write " + tmp.string());
    }
    fs::rename(tmp, p);
    return true;
}

inline std::string fmt(double v, int precision = 10) {
    std::ostringstream os;
    os.precision(precision);
    os << v;
    return os.str();
}

inline Json schedule_json(const TrainingSchedule& s) {
    Json j;
    j["epochs"] = s.epochs;
    j["batch_size"] = s.batch_size;
    j["optimizer"] = to_string(s.optimizer);
    if (s.optimizer == OptimizerKind::adam) {
        j["step"] = s.adam.step;
        j["beta1"] = s.adam.beta1;
        j["beta2"] = s.adam.beta2;
        j["epsilon"] = s.adam.epsilon;
    } else {
        j["lr0"] = s.lr0;
        j["momentum"] = s.momentum;
        j["weight_decay"] = s.weight_decay;
    }
    j["decay_fraction"] = s.decay_fraction;
    j["decay_factor"] = s.decay_factor;
    j["independent_member_augmentation"] = s.independent_member_augmentation;
    return j;
}

}  // namespace detail

/// Training splits of the configured dataset. The test split is never subsampled.
inline DataBundle load_dataset(const ExperimentConfig& c) {
    DataBundle d;
    if (c.dataset == "cifar10" || c.dataset == "cifar100") {
        auto root = c.data_root ? c.data_root : data_root_from_env();
        if (!root)
            throw PrerequisiteError("dataset root unknown: set data_root in the config or the BENS_DATA_ROOT "
                                    "environment variable to the directory holding the " +
                                    c.dataset + " binary files");
        const auto v = c.dataset == "cifar10" ? CifarVariant::cifar10 : CifarVariant::cifar100;
        try {
            d.train = load_cifar_dir(*root, v, true);
            d.test = load_cifar_dir(*root, v, false);
        } catch (const FormatError& e) {
            throw PrerequisiteError(std::string("dataset files missing or unreadable: ") + e.what());
        }
    } else if (c.dataset == "portable") {
        d.train = load_portable(*c.train_file);
        d.test = load_portable(*c.test_file);
    } else {
        const auto K = c.synthetic_classes, S = c.synthetic_side;
        auto all = synth_clusters(K, c.synthetic_train_per_class + c.synthetic_test_per_class, S, S, 3,
                                  c.synthetic_separation, c.synthetic_seed);
        std::vector<std::size_t> tr, te;
        const std::size_t per = c.synthetic_train_per_class + c.synthetic_test_per_class;
        for (std::size_t i = 0; i < all.size(); ++i) (i % per < c.synthetic_train_per_class ? tr : te).push_back(i);
        d.train = all.select(tr);
        d.test = all.select(te);
    }
    if (d.train.num_classes != d.test.num_classes || d.train.image_size() != d.test.image_size())
        throw FormatError("train and test splits disagree on shape or class count");
    return d;
}

/// Base spec adjusted to the dataset's image shape and class count.
inline ArchitectureSpec bind_spec(ArchitectureSpec s, const DatasetSplit& d) {
    s.input = {static_cast<int>(d.height), static_cast<int>(d.width), static_cast<int>(d.channels)};
    s.num_classes = static_cast<int>(d.num_classes);
    return s;
}

/// Grid expansion: N x budget x design x seed, duplicates (the base design repeats for
/// every budget) removed.
inline std::vector<Job> expand_jobs(const ExperimentConfig& c, const ArchitectureSpec& base) {
    std::vector<Job> jobs;
    std::set<std::string> seen;
    for (auto n : c.n_per_class)
        for (auto M : c.members) {
            std::optional<BudgetPlan> p;
            if (M >= 2) p = plan(base, static_cast<int>(M));
            for (auto d : c.designs) {
                Job j;
                j.design = d;
                j.budget = M;
                j.n_per_class = n;
                switch (d) {
                    case Design::ensemble: j.spec = base, j.members = M; break;
                    case Design::deep: j.spec = p ? p->deep : base; break;
                    case Design::wide: j.spec = p ? p->wide : base; break;
                    case Design::base: j.spec = base; break;
                }
                if (M < 2 && d != Design::base) continue;  // budget 1 has only the base design
                for (auto s : c.seeds) {
                    j.seed = s;
                    if (seen.insert(j.key()).second) jobs.push_back(j);
                }
            }
            if (M < 2) {
                for (auto s : c.seeds) {
                    Job j{Design::base, M, base, 1, n, s};
                    if (seen.insert(j.key()).second) jobs.push_back(j);
                }
            }
        }
    return jobs;
}

inline std::vector<PlanRow> plan_rows(const ExperimentConfig& c, const ArchitectureSpec& base) {
    std::vector<PlanRow> rows;
    for (auto M : c.members) {
        const auto budget = FlopCount{flops(base).macs * M};
        if (M < 2) {
            rows.push_back({M, Design::base, base, 1, flops(base), 0.0});
            continue;
        }
        auto p = plan(base, static_cast<int>(M));
        for (auto d : c.designs) {
            switch (d) {
                case Design::ensemble: rows.push_back({M, d, base, M, p.ensemble_flops, 0.0}); break;
                case Design::deep:
                    rows.push_back({M, d, p.deep, 1, p.deep_flops, BudgetPlan::relative_error(p.deep_flops, budget)});
                    break;
                case Design::wide:
                    rows.push_back({M, d, p.wide, 1, p.wide_flops, BudgetPlan::relative_error(p.wide_flops, budget)});
                    break;
                case Design::base:
                    rows.push_back({M, d, base, 1, flops(base), BudgetPlan::relative_error(flops(base), budget)});
                    break;
            }
        }
    }
    return rows;
}

inline std::string plan_csv(const std::vector<PlanRow>& rows) {
    std::ostringstream os;
    os << kPlanHeader << "\n";
    for (const auto& r : rows)
        os << r.budget << "," << to_string(r.design) << "," << to_string(r.spec.family) << "," << r.spec.depth << ","
           << r.spec.width << "," << r.members << "," << r.flops.flops() << "," << detail::fmt(r.relative_error, 6)
           << "\n";
    return os.str();
}

struct CommandOptions {
    bool force = false;
    std::ostream* log = &std::cerr;
};

/// Run directory runs/<fingerprint>/ with manifest.json, checkpoints/<job>/, reports/,
/// plots/, results.csv and summary.json. Every command skips work whose artifact already
/// exists unless forced.
class Experiment {
   public:
    explicit Experiment(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
        base_ = cfg_.base;
        if (cfg_.dataset == "portable") base_ = bind_spec(base_, load_portable(*cfg_.train_file));
        jobs_ = expand_jobs(cfg_, base_);
        std::istringstream in(serialize(cfg_));
        for (std::string line; std::getline(in, line);)
            if (line.rfind("out =", 0) != 0 && line.rfind("workers =", 0) != 0) canonical_ += line + "\n";
        fingerprint_ = detail::hex16(detail::fnv1a(canonical_));
    }

    const ExperimentConfig& config() const { return cfg_; }
    const ArchitectureSpec& base() const { return base_; }
    const std::string& fingerprint() const { return fingerprint_; }
    const std::vector<Job>& jobs() const { return jobs_; }
    fs::path root() const { return cfg_.out / fingerprint_; }
    fs::path checkpoint_dir(const Job& j) const { return root() / "checkpoints" / j.key(); }
    fs::path results_path() const { return root() / "results.csv"; }
    fs::path summary_path() const { return root() / "summary.json"; }
    fs::path manifest_path() const { return root() / "manifest.json"; }
    fs::path reports_dir() const { return root() / "reports"; }
    fs::path plots_dir() const { return root() / "plots"; }

    TrainingSchedule schedule_for(const Job& j) const {
        TrainingSchedule s;
        if (j.n_per_class == 0) {
            s = default_schedule(j.spec, cfg_.dataset, 10, cfg_.oracle_epochs);
        } else {
            s = default_schedule(j.spec, cfg_.dataset, j.n_per_class, cfg_.epochs);
        }
        if (cfg_.batch_size) s.batch_size = *cfg_.batch_size;
        if (cfg_.optimizer) s.optimizer = *cfg_.optimizer;
        if (cfg_.lr0) {
            s.lr0 = *cfg_.lr0;
            s.adam.step = *cfg_.lr0;
        }
        s.independent_member_augmentation = cfg_.independent_member_augmentation;
        return s;
    }

    AugmentationPolicy policy() const {
        AugmentationPolicy p;
        p.level = cfg_.aug;
        return p;
    }

    /// Single network trained on the full training split; fixes the tSNE feature space.
    Job oracle_job() const {
        Job j;
        j.design = Design::base;
        j.n_per_class = 0;
        j.seed = cfg_.oracle_seed;
        if (cfg_.oracle == "base") {
            j.spec = base_;
        } else if (cfg_.oracle == "deep") {
            std::size_t M = 1;
            for (auto m : cfg_.members) M = std::max(M, m);
            j.spec = M >= 2 ? plan(base_, static_cast<int>(M)).deep : base_;
        } else {
            j.spec = parse_arch(cfg_.oracle, base_.num_classes);
            j.spec.input = base_.input;
            j.spec.head = base_.head;
        }
        return j;
    }
    fs::path oracle_dir() const {
        auto j = oracle_job();
        return root() / "checkpoints" / ("oracle_" + arch_name(j.spec) + "_full_s" + std::to_string(j.seed));
    }

    std::string manifest_text() const {
        Json m;
        m["format"] = "bens-run 1";
        m["fingerprint"] = fingerprint_;
        m["config"] = canonical_;
        m["dataset"] = cfg_.dataset;
        m["augmentation"] = to_string(cfg_.aug);
        m["results_columns"] = kResultsHeader;
        m["sensitivity"] = {{"input_space", "mean-subtracted pixels"},
                            {"cap", cfg_.sensitivity_cap ? Json(*cfg_.sensitivity_cap) : Json("none")},
                            {"sample_seed", cfg_.sample_seed}};
        Json jobs = Json::array();
        for (const auto& j : jobs_) jobs.push_back(job_json(j));
        m["jobs"] = jobs;
        auto oj = job_json(oracle_job());
        oj["role"] = "oracle (" + cfg_.oracle + "), full training split";
        m["oracle"] = oj;
        m["tsne"] = {{"perplexity", cfg_.tsne_perplexity}, {"iterations", cfg_.tsne_iterations}};
        return m.dump(2) + "\n";
    }

    void write_manifest() const {
        std::lock_guard<std::mutex> lock(manifest_lock_);
        detail::write_if_changed(manifest_path(), manifest_text());
    }

    std::vector<PlanRow> run_plan(std::ostream& out) const {
        auto rows = plan_rows(cfg_, base_);
        for (auto M : cfg_.members) {
            if (M >= 2)
                print_plan(out, plan(base_, static_cast<int>(M)));
            else
                out << "budget " << std::fixed << std::setprecision(2) << flops(base_).mflops() << " MFLOPs (base "
                    << arch_name(base_) << " only)\n";
            out << "\n";
        }
        write_manifest();
        detail::write_if_changed(root() / "plan.csv", plan_csv(rows));
        return rows;
    }

    bool trained(const Job& j) const { return fs::exists(checkpoint_dir(j) / "train.json"); }

    /// Trains every pending job; returns how many were trained.
    std::size_t run_train(const CommandOptions& o = {}) {
        write_manifest();
        std::vector<const Job*> todo;
        for (const auto& j : jobs_)
            if (o.force || !trained(j)) todo.push_back(&j);
        for (const auto& j : jobs_)
            if (!o.force && trained(j)) log(o, "[train] " + j.key() + " already complete, skipped");
        if (todo.empty()) return 0;
        const auto& d = data();
        // spare workers go to the members of each job
        const int member_workers = std::max(1, cfg_.workers / static_cast<int>(todo.size()));
        parallel_for(todo.size(),
                     [&](std::size_t i) { train_job(*todo[i], d, checkpoint_dir(*todo[i]), o, member_workers); });
        return todo.size();
    }

    bool run_train_oracle(const CommandOptions& o = {}) {
        write_manifest();
        const auto dir = oracle_dir();
        if (!o.force && fs::exists(dir / "train.json")) {
            log(o, "[train] oracle " + dir.filename().string() + " already complete, skipped");
            return false;
        }
        train_job(oracle_job(), data(), dir, o, 1);
        return true;
    }

    /// Accuracy of every trained job; writes results.csv and summary.json.
    std::vector<RunResult> run_eval(const CommandOptions& o = {}) {
        write_manifest();
        require_trained();
        std::vector<const Job*> todo;
        for (const auto& j : jobs_)
            if (o.force || !fs::exists(accuracy_path(j))) todo.push_back(&j);
        if (!todo.empty()) {
            const auto& d = data();
            parallel_for(todo.size(), [&](std::size_t i) {
                const Job& j = *todo[i];
                auto ens = load_ensemble(checkpoint_dir(j));
                const double acc = accuracy(ensemble_predict_fn(ens), d.test, ens.normalization);
                Json r{{"job", j.key()}, {"accuracy", acc}, {"test_samples", d.test.size()}};
                detail::write_if_changed(accuracy_path(j), r.dump(2) + "\n");
                log(o, "[eval] " + j.key() + " accuracy " + detail::fmt(acc, 6));
            });
        }
        return write_results();
    }

    /// Per-sample ||J||_F over the capped test split for every trained job.
    std::size_t run_sensitivity(const CommandOptions& o = {}) {
        write_manifest();
        require_trained();
        std::vector<const Job*> todo;
        for (const auto& j : jobs_)
            if (o.force || !fs::exists(sensitivity_path(j))) todo.push_back(&j);
        if (!todo.empty()) {
            const auto& d = data();
            parallel_for(todo.size(), [&](std::size_t i) {
                const Job& j = *todo[i];
                auto ens = load_ensemble(checkpoint_dir(j));
                auto rep = mean_sensitivity(ensemble_sensitivity_fn(ens), d.test, ens.normalization, cfg_.sensitivity_cap,
                                            cfg_.sample_seed);
                fs::create_directories(reports_dir());
                rep.write_csv(sensitivity_path(j).string() + ".tmp");
                fs::rename(sensitivity_path(j).string() + ".tmp", sensitivity_path(j));
                rep.write_tnsr_file(reports_dir() / (j.key() + "_sensitivity.tnsr"));
                log(o, "[sensitivity] " + j.key() + " mean " + detail::fmt(rep.mean, 6) + " over " +
                           std::to_string(rep.values.size()) + " samples");
            });
        }
        if (std::all_of(jobs_.begin(), jobs_.end(), [&](const Job& j) { return fs::exists(accuracy_path(j)); }))
            write_results();
        return todo.size();
    }

    /// Oracle tSNE of the test split: one class-coloured plot plus one sensitivity plot
    /// per job that has a sensitivity report, all on the same coordinates.
    std::size_t run_embed(const CommandOptions& o = {}) {
        write_manifest();
        const auto odir = oracle_dir();
        if (!fs::exists(odir / "train.json"))
            throw PrerequisiteError("oracle checkpoint " + odir.string() + " is missing; run `bens train --oracle` first");
        const auto points_csv = reports_dir() / "embedding_points.csv";
        Embedding e;
        if (!o.force && fs::exists(points_csv)) {
            e = read_points_csv(points_csv);
        } else {
            const auto& d = data();
            auto oracle = load_ensemble(odir);
            EmbedConfig ec;
            ec.cap = cfg_.sensitivity_cap;
            ec.sample_seed = cfg_.sample_seed;
            ec.tsne.perplexity = cfg_.tsne_perplexity;
            ec.tsne.iterations = cfg_.tsne_iterations;
            ec.tsne.seed = cfg_.oracle_seed;
            log(o, "[embed] tSNE of " + std::to_string(std::min(d.test.size(), cfg_.sensitivity_cap.value_or(d.test.size()))) +
                       " oracle feature rows");
            e = oracle_embed(oracle.members.at(0), oracle.normalization, d.test, ec);
            write_points_csv(points_csv, e.sample_ids, e.points);
            Json meta{{"oracle", odir.filename().string()},
                      {"perplexity", e.perplexity},
                      {"iterations", cfg_.tsne_iterations},
                      {"final_kl", e.kl.empty() ? 0.0 : e.kl.back()}};
            detail::write_if_changed(reports_dir() / "embedding_meta.json", meta.dump(2) + "\n");
        }
        std::size_t plots = 0;
        ScatterOptions so;
        so.num_classes = base_.num_classes;
        so.title = "oracle tSNE by class";
        write_svg(plots_dir() / "embedding_classes.svg", e.points, ColorMode::categorical, so);
        ++plots;
        for (const auto& j : jobs_) {
            if (!fs::exists(sensitivity_path(j))) continue;
            auto rep = SensitivityReport::read_csv(sensitivity_path(j));
            auto pts = color_by_sensitivity(e, rep);
            write_points_csv(reports_dir() / (j.key() + "_embedding.csv"), e.sample_ids, pts);
            ScatterOptions sc;
            sc.title = j.key() + " sensitivity";
            write_svg(plots_dir() / (j.key() + "_sensitivity.svg"), pts, ColorMode::continuous, sc);
            ++plots;
        }
        log(o, "[embed] wrote " + std::to_string(plots) + " plots to " + plots_dir().string());
        return plots;
    }

    /// Rough single-thread training time for every job of the grid.
    double estimated_train_seconds(std::size_t train_per_class_full) const {
        double macs = 0;
        for (const auto& j : jobs_) {
            const auto s = schedule_for(j);
            const double samples = static_cast<double>(j.n_per_class ? j.n_per_class : train_per_class_full) *
                                   base_.num_classes;
            macs += 3.0 * static_cast<double>(flops(j.spec).macs) * static_cast<double>(j.members) * samples * s.epochs;
        }
        return macs / kAssumedMacsPerSecond;
    }

    std::string results_text() const {
        std::ostringstream os;
        os << kResultsHeader << "\n";
        for (const auto& j : jobs_) {
            if (!fs::exists(accuracy_path(j))) continue;
            const auto acc = Json::parse(detail::read_text(accuracy_path(j)))["accuracy"].get<double>();
            const auto train = Json::parse(detail::read_text(checkpoint_dir(j) / "train.json"));
            std::string sens;
            if (fs::exists(sensitivity_path(j))) sens = detail::fmt(SensitivityReport::read_csv(sensitivity_path(j)).mean);
            os << cfg_.dataset << "," << to_string(j.spec.family) << "," << j.spec.depth << "," << j.spec.width << ","
               << j.members << "," << j.n_per_class << "," << to_string(cfg_.aug) << "," << j.seed << ","
               << detail::fmt(acc) << "," << sens << "," << detail::fmt(train["wall_seconds"].get<double>(), 6) << "\n";
        }
        return os.str();
    }

   private:
    Json job_json(const Job& j) const {
        Json e;
        e["key"] = j.key();
        e["design"] = to_string(j.design);
        e["budget"] = j.budget;
        e["architecture"] = arch_name(j.spec);
        e["family"] = to_string(j.spec.family);
        e["depth"] = j.spec.depth;
        e["width"] = j.spec.width;
        e["head"] = to_string(j.spec.head);
        e["dropout"] = j.spec.dropout_rate();
        e["input"] = input_str(j.spec.input);
        e["num_classes"] = j.spec.num_classes;
        e["members"] = j.members;
        e["n_per_class"] = j.n_per_class;
        e["seed"] = j.seed;
        e["macs"] = flops(j.spec).macs * j.members;
        e["schedule"] = detail::schedule_json(schedule_for(j));
        return e;
    }

    fs::path accuracy_path(const Job& j) const { return reports_dir() / (j.key() + "_accuracy.json"); }
    fs::path sensitivity_path(const Job& j) const { return reports_dir() / (j.key() + "_sensitivity.csv"); }

    void require_trained() const {
        for (const auto& j : jobs_)
            if (!trained(j))
                throw PrerequisiteError("checkpoint " + (checkpoint_dir(j) / "train.json").string() +
                                        " is missing; run `bens train` first");
    }

    void log(const CommandOptions& o, const std::string& line) const {
        if (!o.log) return;
        std::lock_guard<std::mutex> lock(log_lock_);
        *o.log << line << std::endl;
    }

    const DataBundle& data() {
        std::call_once(data_once_, [&] { data_ = load_dataset(cfg_); });
        return data_;
    }

    void train_job(const Job& j, const DataBundle& d, const fs::path& dir, const CommandOptions& o, int member_workers) {
        const auto start = std::chrono::steady_clock::now();
        const DatasetSplit train = j.n_per_class ? subsample_balanced(d.train, j.n_per_class, j.seed) : d.train;
        const auto spec = bind_spec(j.spec, train);
        log(o, "[train] " + j.key() + ": " + std::to_string(j.members) + " x " + arch_name(spec) + " on " +
                   std::to_string(train.size()) + " samples");
        TrainOptions to;
        to.workers = member_workers;
        auto ens = train_ensemble(spec, j.members, train, schedule_for(j), policy(), j.seed, to);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        fs::remove_all(dir);
        save_ensemble(dir, ens);
        Json t;
        t["job"] = j.key();
        t["wall_seconds"] = secs;
        t["train_samples"] = train.size();
        Json traces = Json::array();
        for (const auto& tr : ens.loss_traces) traces.push_back(tr);
        t["loss_traces"] = traces;
        detail::write_if_changed(dir / "train.json", t.dump(2) + "\n");
        log(o, "[train] " + j.key() + " done in " + detail::fmt(secs, 4) + " s, final loss " +
                   detail::fmt(ens.loss_traces[0].back(), 5));
    }

    template <class F>
    void parallel_for(std::size_t count, F&& body) {
        const std::size_t workers = std::min<std::size_t>(std::max(cfg_.workers, 1), count);
        std::vector<std::exception_ptr> errors(count);
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (std::size_t i; (i = next++) < count;) {
                try {
                    body(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        };
        if (workers <= 1) {
            worker();
        } else {
            std::vector<std::thread> pool;
            for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
            for (auto& t : pool) t.join();
        }
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    std::vector<RunResult> write_results() {
        detail::write_if_changed(results_path(), results_text());
        // groups of seeds: (design, architecture, members, N)
        std::map<std::string, std::vector<const Job*>> groups;
        std::vector<std::string> order;
        for (const auto& j : jobs_) {
            const std::string g = to_string(j.design) + "_" + arch_name(j.spec) + "_m" + std::to_string(j.members) + "_n" +
                                  std::to_string(j.n_per_class);
            if (!groups.count(g)) order.push_back(g);
            groups[g].push_back(&j);
        }
        Json summary;
        summary["fingerprint"] = fingerprint_;
        Json arr = Json::array();
        std::vector<RunResult> out;
        for (const auto& g : order) {
            std::vector<double> acc, sens;
            Json seeds = Json::array();
            for (const Job* j : groups[g]) {
                acc.push_back(Json::parse(detail::read_text(accuracy_path(*j)))["accuracy"].get<double>());
                seeds.push_back(j->seed);
                if (fs::exists(sensitivity_path(*j))) sens.push_back(SensitivityReport::read_csv(sensitivity_path(*j)).mean);
            }
            auto r = aggregate_runs(acc, fingerprint_ + "/" + g);
            const Job& first = *groups[g].front();
            Json e;
            e["group"] = g;
            e["design"] = to_string(first.design);
            e["architecture"] = arch_name(first.spec);
            e["members"] = first.members;
            e["n_per_class"] = first.n_per_class;
            e["seeds"] = seeds;
            e["accuracy"] = acc;
            e["accuracy_mean"] = r.mean;
            e["accuracy_std"] = r.std;
            if (sens.size() == acc.size()) {
                auto s = aggregate_runs(sens);
                e["sensitivity"] = sens;
                e["sensitivity_mean"] = s.mean;
                e["sensitivity_std"] = s.std;
            }
            arr.push_back(e);
            out.push_back(std::move(r));
        }
        summary["groups"] = arr;
        detail::write_if_changed(summary_path(), summary.dump(2) + "\n");
        return out;
    }

    static void write_svg(const fs::path& p, const std::vector<EmbeddingPoint>& pts, ColorMode mode,
                          const ScatterOptions& opt) {
        detail::write_if_changed(p, scatter_svg_string(pts, mode, opt));
    }

    ExperimentConfig cfg_;
    ArchitectureSpec base_;
    std::vector<Job> jobs_;
    std::string canonical_;  // config text minus out and workers
    std::string fingerprint_;
    std::once_flag data_once_;
    DataBundle data_;
    mutable std::mutex manifest_lock_, log_lock_;
};

enum class Suite { design_space, sensitivity_map };
enum class Scale { desk, paper };

inline Suite parse_suite(std::string_view s) {
    if (s == "design-space") return Suite::design_space;
    if (s == "sensitivity-map") return Suite::sensitivity_map;
    throw ConfigError("unknown suite '" + std::string(s) + "' (design-space, sensitivity-map)");
}

inline Scale parse_scale(std::string_view s) {
    if (s == "desk") return Scale::desk;
    if (s == "paper") return Scale::paper;
    throw ConfigError("unknown scale '" + std::string(s) + "' (desk, paper)");
}

/// Budget multiplier whose deep competitor is the resnet of depth `d` at the base width.
inline std::size_t budget_for_depth(const ArchitectureSpec& base, int d) {
    return static_cast<std::size_t>(
        std::lround(static_cast<double>(flops(base.with_depth(d)).macs) / static_cast<double>(flops(base).macs)));
}

/// Suite grid applied on top of a config (which supplies the dataset location).
/// desk: N {10, 50}, M {5}, seeds {1, 2, 3}, 100 epochs, augmentation +.
/// paper (full protocol): N {10, 50, 100, 250}, budgets of the resnet-26/50/110 deep competitors, seeds 1..5, epoch table.
inline ExperimentConfig suite_config(ExperimentConfig c, Suite suite, Scale scale) {
    c.designs = {Design::ensemble, Design::deep, Design::wide};
    c.aug = AugLevel::plus;
    if (scale == Scale::desk) {
        c.n_per_class = {10, 50};
        c.members = {5};
        c.seeds = {1, 2, 3};
        c.epochs = 100;
    } else {
        c.n_per_class = {10, 50, 100, 250};
        c.members = {budget_for_depth(c.base, 26), budget_for_depth(c.base, 50), budget_for_depth(c.base, 110)};
        c.seeds = {1, 2, 3, 4, 5};
        c.epochs.reset();
    }
    if (suite == Suite::sensitivity_map) c.oracle = "deep";
    return c;
}

inline std::string suite_manifest(const Experiment& e, Suite suite, Scale scale) {
    Json m;
    m["suite"] = suite == Suite::design_space ? "design-space" : "sensitivity-map";
    m["scale"] = scale == Scale::desk ? "desk" : "paper";
    m["fingerprint"] = e.fingerprint();
    const auto& c = e.config();
    m["n_per_class"] = c.n_per_class;
    m["budgets"] = c.members;
    m["seeds"] = c.seeds;
    m["epochs"] = c.epochs ? Json(*c.epochs) : Json("epoch table");
    m["augmentation"] = to_string(c.aug);
    m["config"] = serialize(c);
    m["jobs"] = e.jobs().size();
    return m.dump(2) + "\n";
}

/// Plan, train, eval and sensitivity for the suite grid; the sensitivity-map suite adds
/// the oracle and the shared-coordinate plots.
inline void run_suite(Experiment& e, Suite suite, Scale scale, const CommandOptions& o, std::ostream& out) {
    detail::write_if_changed(e.root() / (std::string("suite_") + (suite == Suite::design_space ? "design-space" : "sensitivity-map") +
                                         ".json"),
                             suite_manifest(e, suite, scale));
    if (scale == Scale::paper)
        out << "warning: full-protocol scale trains " << e.jobs().size() << " jobs; estimated single-thread time "
            << std::fixed << std::setprecision(1) << e.estimated_train_seconds(5000) / 3600.0 << " hours\n";
    e.run_plan(out);
    e.run_train(o);
    auto results = e.run_eval(o);
    e.run_sensitivity(o);
    if (suite == Suite::sensitivity_map) {
        e.run_train_oracle(o);
        e.run_embed(o);
    }
    out << "results: " << e.results_path().string() << "\n";
    for (const auto& r : results)
        out << std::left << std::setw(48) << r.fingerprint.substr(r.fingerprint.find('/') + 1) << " accuracy "
            << std::fixed << std::setprecision(4) << r.mean << " +- " << r.std << "\n";
}

}  // namespace bens
