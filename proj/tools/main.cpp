#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "pwrmpc/experiment.hpp"

namespace {

struct CommonOpts {
    std::string config;
    std::uint64_t seed_base = 0;
    int workers = 1;
    bool debug_trace = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("-c,--config", opts.config, "experiment config (JSON)")->required();
    cmd->add_option("--seed-base", opts.seed_base, "first seed of the study (default 0)");
    cmd->add_option("--workers", opts.workers, "worker threads for independent runs (default 1)")
        ->check(CLI::PositiveNumber);
    cmd->add_flag("--debug-trace", opts.debug_trace, "dump per-step solver stats to solve_trace.csv");
}

pwrmpc::ExperimentConfig load(const CommonOpts& opts) {
    pwrmpc::ExperimentConfig cfg = pwrmpc::load_config(opts.config);
    cfg.seed_base = opts.seed_base;
    cfg.workers = opts.workers;
    cfg.debug_trace = opts.debug_trace;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"stochastic hybrid MPC experiment runner"};
    app.require_subcommand(1);

    CommonOpts fit_opts, run_opts, ablate_opts;
    CLI::App* fit = app.add_subcommand("fit-gps", "fit per-mode residual GPs and save the bank");
    add_common(fit, fit_opts);
    CLI::App* run = app.add_subcommand("run", "execute the configured tracking or protocol study");
    add_common(run, run_opts);
    CLI::App* ablate = app.add_subcommand(
        "ablate-alpha-min", "sweep the evidence-trust floor over a protocol study");
    add_common(ablate, ablate_opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (fit->parsed()) pwrmpc::cmd_fit_gps(load(fit_opts));
        if (run->parsed()) pwrmpc::cmd_run(load(run_opts));
        if (ablate->parsed()) pwrmpc::cmd_ablate_alpha_min(load(ablate_opts));
    } catch (const pwrmpc::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
