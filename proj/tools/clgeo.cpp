#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "clgeo/analysis.hpp"
#include "clgeo/error.hpp"
#include "clgeo/harness.hpp"

namespace fs = std::filesystem;
using namespace clgeo;

namespace {

void emit(const CsvTable& t, const std::string& out) {
    if (out.empty() || out == "-")
        std::cout << t.str();
    else
        t.write(out);
}

int exit_for(const Error& e) { return e.kind() == ErrorKind::config ? exit_config : exit_runtime; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"clgeo: continual-learning loss-geometry lab"};
    app.require_subcommand(1);

    std::string config, out, dir, ckpt;
    std::vector<std::string> dirs;
    std::vector<int> ranks;
    std::vector<double> radii;
    int eig_index = 1, n_random = 32;
    std::uint64_t seed = 0;
    ScoreOptions sopts;

    auto* run = app.add_subcommand("run", "Run a continual-learning experiment from a JSON config");
    run->add_option("config", config, "experiment config")->required()->check(CLI::ExistingFile);
    std::string out_override;
    run->add_option("--out", out_override, "override output_dir");

    auto* quad = app.add_subcommand("quadsim", "Quadratic-regime theorem validation");
    quad->add_option("config", config, "quadsim config (defaults when omitted)");
    quad->add_option("--out", out_override, "override output_dir");

    auto* perturb = app.add_subcommand("perturb", "Perturbation curve at a checkpoint");
    perturb->add_option("checkpoint", ckpt, "theta_<t>.ckpt inside a run directory")->required()->check(CLI::ExistingFile);
    perturb->add_option("--radii", radii, "radii (default: 25 log-spaced in [1e-3, 1e4])");
    perturb->add_option("--eig-index", eig_index, "1-based Hessian eigenvector index")->check(CLI::PositiveNumber);
    perturb->add_option("--draws", n_random, "random directions for the denominator")->check(CLI::Range(2, 100000));
    perturb->add_option("--seed", seed, "seed for random directions");
    perturb->add_option("-o,--out", out, "output CSV (stdout by default)");

    auto* approx = app.add_subcommand("approx", "Taylor and recursive forgetting-estimate error tables");
    approx->add_option("run_dir", dir, "run or quadsim directory")->required()->check(CLI::ExistingDirectory);
    approx->add_option("--ranks", ranks, "truncated-Hessian ranks");
    approx->add_option("-o,--out", out, "output CSV (default <run_dir>/approx.csv)");

    auto* score = app.add_subcommand("score", "Constraint-violation, block-diagonality, similarity and rank tables");
    score->add_option("run_dir", dir, "run or quadsim directory")->required()->check(CLI::ExistingDirectory);
    score->add_flag("--vnc", sopts.vnc, "null-forgetting violation per task");
    score->add_flag("--blockdiag", sopts.blockdiag, "layer block-diagonality of each task Hessian");
    score->add_flag("--similarity", sopts.similarity, "outer-product vs exact Hessian similarity");
    score->add_flag("--ranks", sopts.ranks, "rank evolution of the average Hessian");
    score->add_option("--rank-fracs", sopts.rank_fracs, "effective-rank thresholds");
    score->add_option("-o,--out", out, "output CSV (default <run_dir>/scores.csv)");

    auto* gen = app.add_subcommand("gen", "Write the task sequence of a config as CSV");
    gen->add_option("config", config, "experiment config")->required()->check(CLI::ExistingFile);
    gen->add_option("-o,--out", out, "output CSV")->required();

    auto* cmp = app.add_subcommand("compare", "Final-metric comparison table across run directories");
    cmp->add_option("run_dirs", dirs, "run directories")->required();
    cmp->add_option("-o,--out", out, "output CSV (stdout by default)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : exit_config;
    }

    try {
        if (*run) {
            ExperimentConfig cfg = load_config(config);
            if (!out_override.empty()) cfg.output_dir = out_override;
            const RunSummary s = run_experiment(cfg);
            std::cout << "wrote " << s.dir << " (" << s.seeds.size() << " seeds)\n";
            int T = 0;
            for (const auto& a : s.aggregate) T = std::max(T, a.task_t);
            for (const char* m : {"avg_forgetting", "avg_acc_forgetting", "avg_accuracy"})
                if (const auto* a = find_aggregate(s.aggregate, m, 0, T))
                    std::cout << "  " << m << "(T=" << T << ") = " << a->mean << " +- " << a->std << "\n";
        } else if (*quad) {
            QuadRunConfig cfg = config.empty() ? QuadRunConfig{} : load_quad_config(config);
            if (!out_override.empty()) cfg.output_dir = out_override;
            const QuadsimOutcome o = run_quadsim(cfg);
            for (const auto& c : o.checks)
                std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.value << " (tol " << c.tolerance
                          << ")\n";
            if (!o.all_passed) {
                std::cout << "theorem checks failed\n";
                return exit_acceptance;
            }
            std::cout << "all theorem checks passed\n";
        } else if (*perturb) {
            PerturbOptions po;
            po.radii = radii;
            po.eig_index = eig_index;
            po.n_random = n_random;
            po.seed = seed;
            emit(perturb_checkpoint(ckpt, po), out);
        } else if (*approx) {
            const CsvTable t = approx_tables(dir, ranks);
            emit(t, out.empty() ? (fs::path(dir) / "approx.csv").string() : out);
            std::cout << "approx rows: " << t.rows().size() << "\n";
        } else if (*score) {
            if (!(sopts.vnc || sopts.blockdiag || sopts.similarity || sopts.ranks)) sopts.vnc = true;
            const CsvTable t = score_tables(dir, sopts);
            emit(t, out.empty() ? (fs::path(dir) / "scores.csv").string() : out);
            std::cout << "score rows: " << t.rows().size() << "\n";
        } else if (*gen) {
            export_sequence_csv(out, build_tasks(load_config(config)));
        } else if (*cmp) {
            emit(compare_runs(dirs), out);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_runtime;
    }
    return exit_ok;
}
