#include "kronlvm/errors.hpp"
#include "kronlvm/experiment.hpp"
#include "verify_suite.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

using namespace kronlvm;

namespace {

enum ExitCode { ok = 0, validation = 1, numerical = 2, io = 3 };

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    int jobs = 1;
};

void add_common(CLI::App* cmd, Common& c, bool with_jobs) {
    cmd->add_option("--config", c.config, "experiment configuration (YAML)");
    cmd->add_option("--seed", c.seed, "run this single seed instead of the configured list");
    cmd->add_option("--out", c.out, "output directory (overrides experiment.output_dir)");
    if (with_jobs) cmd->add_option("--jobs", c.jobs, "worker threads for test cases")->check(CLI::PositiveNumber);
}

ExperimentConfig resolve(const Common& c) {
    const EnvMap env = environment_overrides();
    ExperimentConfig cfg = c.config.empty() ? parse_config("", env) : load_config(c.config, env);
    if (c.seed) cfg.seeds = {*c.seed};
    if (!c.out.empty()) cfg.output_dir = c.out;
    cfg.validate();
    return cfg;
}

int run_verify(const std::vector<std::string>& only, long mc_samples) {
    bool all_passed = true;
    for (const auto& s : verify::all_suites()) {
        if (!only.empty() && std::find(only.begin(), only.end(), s.name) == only.end()) continue;
        const verify::SuiteResult r = s.name == "psi-mc" ? verify::psi_mc_suite(mc_samples) : s.run();
        std::printf("%s %-13s worst %.3e (< %.1e)  %.1fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.worst,
                    r.threshold, r.seconds, r.detail.c_str());
        all_passed = all_passed && r.passed;
    }
    return all_passed ? ok : numerical;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Structured GP-LVM surrogates for stochastic elliptic PDEs"};
    app.require_subcommand(1);

    Common gen_opts, train_opts, pred_opts, table_opts, run_opts;
    bool unit_conductivity = false, resume = false;
    std::string direction;
    std::vector<std::string> result_files, suites;
    long mc_samples = 1000000;

    auto* gen = app.add_subcommand("generate", "sample the prior and solve the PDE for every realization");
    add_common(gen, gen_opts, false);
    gen->add_flag("--unit-conductivity", unit_conductivity, "use a = 1 everywhere (all-zero solutions)");

    auto* train = app.add_subcommand("train", "train the configured surrogate for every seed and n_xi");
    add_common(train, train_opts, false);
    train->add_flag("--resume", resume, "continue optimizing from the saved checkpoints");

    auto* predict = app.add_subcommand("predict", "forward and/or inverse predictions on the test realizations");
    add_common(predict, pred_opts, true);
    predict->add_option("--direction", direction, "forward or inverse (default: configured directions)")
        ->check(CLI::IsMember({"forward", "inverse"}));

    auto* table = app.add_subcommand("table", "aggregate per-case results into a mean (std) CSV table");
    add_common(table, table_opts, false);
    table->add_option("results", result_files, "results files; without them the configured run is tabulated");

    auto* run = app.add_subcommand("run", "generate, train, predict and table in one go");
    add_common(run, run_opts, true);

    auto* verify_cmd = app.add_subcommand("verify", "dense-oracle, gradient, Monte-Carlo and FEM suites");
    verify_cmd->add_option("--suite", suites, "run only these suites")
        ->check(CLI::IsMember({"kron-oracle", "bound-oracle", "gradients", "psi-mc", "fem"}));
    verify_cmd->add_option("--mc-samples", mc_samples, "Monte-Carlo samples per psi-statistic check")
        ->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : validation;
    }

    try {
        if (*verify_cmd) return run_verify(suites, mc_samples);

        if (*table && !result_files.empty()) {
            std::vector<CaseRecord> records;
            for (const auto& f : result_files) {
                auto rs = read_results(f);
                records.insert(records.end(), rs.begin(), rs.end());
            }
            const std::string csv = render_table(aggregate(std::move(records)));
            if (!table_opts.out.empty()) write_file_atomic(fs::path(table_opts.out) / "table.csv", csv);
            std::cout << csv;
            return ok;
        }

        const Common& opts = *gen ? gen_opts : *train ? train_opts : *predict ? pred_opts : *table ? table_opts : run_opts;
        ExperimentConfig cfg = resolve(opts);
        if (unit_conductivity) cfg.unit_conductivity = true;
        if (!direction.empty()) cfg.directions = {parse_direction(direction)};
        cfg.validate();
        const fs::path out = cfg.output_dir;

        if (*gen || *run) stage_generate(cfg, out, std::cout);
        if (*train || *run) stage_train(cfg, out, std::cout, resume);
        if (*predict || *run) stage_predict(cfg, out, opts.jobs, std::cout);
        if (*table || *run) stage_table(cfg, out, std::cout);
        write_manifest(cfg, out);
        return ok;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return validation;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return numerical;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return io;
    } catch (const std::exception& e) {
        std::cerr << "unexpected failure: " << e.what() << "\n";
        return numerical;
    }
}
