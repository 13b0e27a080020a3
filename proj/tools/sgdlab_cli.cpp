// Experiment runner: config-driven numerical experiments with reproducible
// seeds, summary JSON, and CSV trajectories.
//
// Exit codes: 0 pass, 2 config/capability error, 3 numerical failure,
// 4 check failure.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "sgdlab/experiment.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_override;
    std::int64_t seed_override = -1;
};

void add_common(CLI::App* sub, CommonArgs& args) {
    sub->add_option("--config", args.config_path, "experiment config (JSON)")->required();
    sub->add_option("--seed", args.seed_override, "override the master seed");
    sub->add_option("--out", args.out_override, "override the output directory");
}

int run(const std::string& subcommand, const CommonArgs& args) {
    sgdlab::ExperimentConfig cfg;
    try {
        cfg = sgdlab::load_config(args.config_path);
        // overrides become part of the effective (hashed) config
        if (args.seed_override >= 0) {
            cfg.raw["seed"] = static_cast<std::uint64_t>(args.seed_override);
            cfg.seed = static_cast<std::uint64_t>(args.seed_override);
        }
        if (!args.out_override.empty()) {
            cfg.raw["out_dir"] = args.out_override;
            cfg.out_dir = args.out_override;
        }
        const bool kind_matches =
            cfg.kind == subcommand || (subcommand == "train" && cfg.kind == "contraction");
        if (!kind_matches)
            throw sgdlab::ConfigError("config is a '" + cfg.kind + "' experiment; run `sgdlab " +
                                      cfg.kind + "`");
    } catch (const sgdlab::Error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }

    sgdlab::RunRecord rec;
    try {
        rec = sgdlab::run_experiment(cfg);
        sgdlab::persist(cfg, rec);
    } catch (const sgdlab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const sgdlab::MissingProjector& e) {
        std::cerr << "capability error: " << e.what() << "\n";
        return 2;
    } catch (const sgdlab::RankDeficient& e) {
        std::cerr << "capability error: " << e.what() << "\n";
        return 2;
    } catch (const sgdlab::NoSolutionInRegion& e) {
        std::cerr << "capability error: " << e.what() << "\n";
        return 2;
    } catch (const sgdlab::NoValidProbe& e) {
        std::cerr << "capability error: " << e.what() << "\n";
        return 2;
    } catch (const sgdlab::Error& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 3;
    }

    std::cout << "run " << rec.config_hash << " -> " << rec.run_dir << "\n";
    bool numerical_failure = false;
    for (const auto& c : rec.checks) {
        std::printf("[%s] %s (value %.6g, threshold %.6g)\n", c.pass ? "PASS" : "FAIL",
                    c.name.c_str(), c.value, c.threshold);
        if (!c.pass && c.name == "no_divergence") numerical_failure = true;
    }
    if (numerical_failure) return 3;
    return rec.all_pass() ? 0 : 4;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sgdlab: regularity estimation and large-stepsize SGD experiments"};
    app.require_subcommand(1);

    const char* names[] = {"verify", "train", "width-scan", "boost", "stoptime", "rates"};
    const char* blurbs[] = {
        "estimate regularity constants with witnesses",
        "run SGD (optionally a GD comparator) with monitors and rate fits",
        "sweep the width: Hessian norm, NTK eigenvalue, PL estimate",
        "planted-mix rejection-sampling booster",
        "Monte Carlo checks of the stopping-time bounds",
        "closed-form rate table comparisons",
    };
    CommonArgs args[6];
    for (int i = 0; i < 6; ++i) add_common(app.add_subcommand(names[i], blurbs[i]), args[i]);

    CLI11_PARSE(app, argc, argv);
    for (int i = 0; i < 6; ++i)
        if (app.get_subcommand(names[i])->parsed()) return run(names[i], args[i]);
    return 2;
}
