// ptbn: train, evaluate and diagnose models under prediction-time batch norm.
//
// Exit codes: 0 success, 1 config error, 2 missing artifact, 3 numerical failure.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "ptbn/error.hpp"
#include "ptbn/harness.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 1, kMissing = 2, kNumerical = 3 };

struct Flags {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
    bool force = false;
};

void add_common(CLI::App* cmd, Flags& f, bool config_required) {
    auto* opt = cmd->add_option("--config", f.config, "Experiment config (JSON)");
    if (config_required) opt->required();
    cmd->add_option("--out", f.out, "Output directory (overrides output_dir)");
    cmd->add_option("--seed", f.seed, "Run a single seed instead of the config's seed list");
    cmd->add_option("--workers", f.workers, "Worker threads for independent grid cells");
    cmd->add_flag("--force", f.force, "Recompute even if results for this config exist");
}

ptbn::ExperimentConfig load(const Flags& f) {
    auto cfg = ptbn::load_config(f.config);
    ptbn::Overrides o;
    if (!f.out.empty()) o.output_dir = f.out;
    o.seed = f.seed;
    o.workers = f.workers;
    ptbn::apply_overrides(cfg, o);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
    // Large tensors are allocated and freed on every forward pass; keep them on the heap.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    CLI::App app{"Prediction-time batch normalization experiments"};
    app.set_version_flag("--version", std::string(ptbn::code_version()));
    app.require_subcommand(1);
    Flags f;
    auto* train = app.add_subcommand("train", "Train every checkpoint the config's methods need");
    auto* eval = app.add_subcommand("eval", "Evaluate methods over the shift and batch-size grid");
    auto* diagnose = app.add_subcommand("diagnose", "Activation discrepancy, histograms, eigenspectra");
    auto* sweep = app.add_subcommand("sweep-eps", "Prediction-time epsilon sweep on the clean test set");
    auto* report = app.add_subcommand("report", "Summary tables from stored evaluation records");
    for (auto* c : {train, eval, diagnose, sweep}) add_common(c, f, true);
    add_common(report, f, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    ptbn::CommandOptions opts;
    opts.force = f.force;
    opts.log = [](const std::string& line) { std::cerr << line << '\n'; };
    try {
        if (train->parsed()) {
            const auto s = ptbn::cmd_train(load(f), opts);
            std::cout << "trained " << s.trained << " checkpoint(s), reused " << s.reused << "\n";
        } else if (eval->parsed()) {
            const auto cfg = load(f);
            const auto r = ptbn::cmd_eval(cfg, opts);
            if (!r.skipped) std::cout << r.records.size() << " records in " << (cfg.output_dir / "results").string() << "\n";
        } else if (diagnose->parsed()) {
            const auto cfg = load(f);
            const auto r = ptbn::cmd_diagnose(cfg, opts);
            if (!r.skipped) std::cout << r.discrepancy.size() << " discrepancy rows in " << (cfg.output_dir / "diagnostics").string() << "\n";
        } else if (sweep->parsed()) {
            const auto cfg = load(f);
            const auto r = ptbn::cmd_sweep_eps(cfg, opts);
            if (!r.skipped) std::cout << r.rows.size() << " rows in " << (cfg.output_dir / "results").string() << "\n";
        } else if (report->parsed()) {
            std::filesystem::path store;
            if (!f.out.empty()) {
                store = f.out;
            } else if (!f.config.empty()) {
                store = ptbn::load_config(f.config).output_dir;
            } else {
                std::cerr << "report: give --out or --config\n";
                return kConfig;
            }
            const auto r = ptbn::cmd_report(store, opts);
            std::cout << r.by_severity.rows.size() << " summary rows in " << (store / "report").string() << "\n";
        }
    } catch (const ptbn::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const ptbn::MissingArtifactError& e) {
        std::cerr << "missing artifact: " << e.what() << "\n";
        return kMissing;
    } catch (const ptbn::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kConfig;
    }
    return kOk;
}
