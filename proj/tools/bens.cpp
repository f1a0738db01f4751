// Command-line front end for the ensemble-vs-single-network experiments.
#include <CLI11.hpp>

#include <iostream>

#include "bens/experiment.hpp"

using namespace bens;

namespace {

ExperimentConfig load(const std::string& path, const std::optional<int>& workers, const std::optional<std::string>& out) {
    auto c = path.empty() ? parse_config_text("dataset = cifar10\nbase = resnet-8-16\n", "<default>") : parse_config(path);
    if (workers) {
        if (*workers < 1) throw ConfigError("--workers must be at least 1");
        c.workers = *workers;
    }
    if (out) c.out = *out;
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"budget-matched ensembles vs deep and wide networks"};
    app.require_subcommand(1);
    app.fallthrough();  // shared flags may follow the subcommand
    std::string config_path;
    bool force = false, quiet = false;
    std::optional<int> workers;
    std::optional<std::string> out;
    app.add_option("--config", config_path, "experiment config (key = value)");
    app.add_flag("--force", force, "redo work whose artifacts already exist");
    app.add_option("--workers", workers, "parallel jobs");
    app.add_option("--out", out, "output root (run directories go below it)");
    app.add_flag("-q,--quiet", quiet, "no progress log");

    auto* plan_cmd = app.add_subcommand("plan", "budget-matched deep and wide competitors");
    bool oracle = false;
    auto* train_cmd = app.add_subcommand("train", "train every pending job");
    train_cmd->add_flag("--oracle", oracle, "train the full-data oracle instead");
    auto* eval_cmd = app.add_subcommand("eval", "test accuracy, results.csv and summary.json");
    auto* sens_cmd = app.add_subcommand("sensitivity", "per-sample Jacobian norms on the test split");
    auto* embed_cmd = app.add_subcommand("embed", "oracle tSNE plots coloured by class and sensitivity");
    std::string suite = "design-space", scale = "desk";
    auto* repro = app.add_subcommand("reproduce", "run a named suite end to end");
    repro->add_option("--suite", suite, "design-space | sensitivity-map")->check(CLI::IsMember({"design-space", "sensitivity-map"}));
    repro->add_option("--scale", scale, "desk | paper")->check(CLI::IsMember({"desk", "paper"}));

    CLI11_PARSE(app, argc, argv);

    try {
        if (!repro->parsed() && config_path.empty()) throw ConfigError("--config is required");
        auto cfg = load(config_path, workers, out);
        if (repro->parsed()) cfg = suite_config(cfg, parse_suite(suite), parse_scale(scale));
        Experiment e(cfg);
        CommandOptions o{force, quiet ? nullptr : &std::cerr};
        std::cout << "run directory " << e.root().string() << "\n";
        if (plan_cmd->parsed()) {
            auto rows = e.run_plan(std::cout);
            std::cout << rows.size() << " rows written to " << (e.root() / "plan.csv").string() << "\n";
        } else if (train_cmd->parsed()) {
            if (oracle)
                e.run_train_oracle(o);
            else
                std::cout << e.run_train(o) << " jobs trained\n";
        } else if (eval_cmd->parsed()) {
            for (const auto& r : e.run_eval(o))
                std::cout << r.fingerprint.substr(r.fingerprint.find('/') + 1) << "  " << std::fixed
                          << std::setprecision(4) << r.mean << " +- " << r.std << " (" << r.values.size() << " seeds)\n";
        } else if (sens_cmd->parsed()) {
            std::cout << e.run_sensitivity(o) << " reports written\n";
        } else if (embed_cmd->parsed()) {
            std::cout << e.run_embed(o) << " plots in " << e.plots_dir().string() << "\n";
        } else if (repro->parsed()) {
            run_suite(e, parse_suite(suite), parse_scale(scale), o, std::cout);
        }
    } catch (const PrerequisiteError& err) {
        std::cerr << "missing prerequisite: " << err.what() << "\n";
        return 3;
    } catch (const ConfigError& err) {
        std::cerr << "config error: " << err.what() << "\n";
        return 2;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }
    return 0;
}
