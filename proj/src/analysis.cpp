#include "clgeo/analysis.hpp"

#include <cmath>
#include <filesystem>

#include "clgeo/checkpoint.hpp"
#include "clgeo/error.hpp"
#include "clgeo/harness.hpp"
#include "clgeo/landscape.hpp"
#include "json_fields.hpp"

namespace clgeo {

using nlohmann::json;
namespace fs = std::filesystem;
using detail::FieldReader;
using detail::read_positive;

namespace {

const char* policy_name(QuadPolicy p) {
    switch (p) {
        case QuadPolicy::unconstrained: return "unconstrained";
        case QuadPolicy::null_forgetting: return "null_forgetting";
        case QuadPolicy::nmf_correction: return "nmf_correction";
    }
    return "?";
}

}  // namespace

json QuadRunConfig::to_json() const {
    return {{"dim", suite.dim},
            {"num_tasks", suite.num_tasks},
            {"rank", suite.rank},
            {"seed", suite.seed},
            {"tau", suite.tau},
            {"solver", suite.solver == QuadSolver::closed_form ? "closed_form" : "gradient_steps"},
            {"policy", policy_name(policy)},
            {"z_rule", z_rule == ZRule::project_step ? "project_step" : "constrained_optimum"},
            {"output_dir", output_dir}};
}

QuadRunConfig parse_quad_config(const json& j) {
    QuadRunConfig c;
    std::vector<std::string> errors;
    {
        FieldReader r(j, "quadsim", errors);
        read_positive(r, "dim", c.suite.dim);
        if (c.suite.dim > quadsim_max_dim) r.fail("dim", "must be at most " + std::to_string(quadsim_max_dim));
        read_positive(r, "num_tasks", c.suite.num_tasks);
        read_positive(r, "rank", c.suite.rank);
        r.read("seed", c.suite.seed);
        read_positive(r, "tau", c.suite.tau);
        std::string solver = "closed_form", policy = policy_name(c.policy), z = "project_step";
        r.read("solver", solver);
        if (solver == "closed_form")
            c.suite.solver = QuadSolver::closed_form;
        else if (solver == "gradient_steps")
            c.suite.solver = QuadSolver::gradient_steps;
        else
            r.fail("solver", "must be closed_form or gradient_steps");
        r.read("policy", policy);
        if (policy == "unconstrained")
            c.policy = QuadPolicy::unconstrained;
        else if (policy == "null_forgetting")
            c.policy = QuadPolicy::null_forgetting;
        else if (policy == "nmf_correction")
            c.policy = QuadPolicy::nmf_correction;
        else
            r.fail("policy", "must be unconstrained, null_forgetting or nmf_correction");
        r.read("z_rule", z);
        if (z == "project_step")
            c.z_rule = ZRule::project_step;
        else if (z == "constrained_optimum")
            c.z_rule = ZRule::constrained_optimum;
        else
            r.fail("z_rule", "must be project_step or constrained_optimum");
        r.read("output_dir", c.output_dir);
    }
    if (c.suite.rank > c.suite.dim) errors.push_back("quadsim.rank: must not exceed dim");
    if (c.suite.tau < 2 || c.suite.tau >= c.suite.num_tasks)
        errors.push_back("quadsim.tau: must satisfy 2 <= tau < num_tasks");
    if (!errors.empty()) {
        std::string msg = "invalid quadsim config:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw Error(ErrorKind::config, msg);
    }
    return c;
}

QuadRunConfig load_quad_config(const std::string& path) {
    try {
        return parse_quad_config(json::parse(read_file(path)));
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::config, path + ": " + e.what());
    }
}

namespace {

QuadRun quad_policy_run(const QuadRunConfig& cfg) {
    const auto tasks = random_low_rank_tasks(cfg.suite.dim, cfg.suite.num_tasks, cfg.suite.rank, cfg.suite.seed);
    QuadRunOptions o;
    o.seed = cfg.suite.seed + 1;
    o.tau = cfg.suite.tau;
    o.z_rule = cfg.z_rule;
    o.solver = cfg.suite.solver;
    return run_sequence(tasks, cfg.policy, o);
}

}  // namespace

QuadsimOutcome run_quadsim(const QuadRunConfig& cfg, bool write_outputs) {
    QuadsimOutcome out;
    out.checks = quadsim_theorem_suite(cfg.suite);
    out.all_passed = std::all_of(out.checks.begin(), out.checks.end(), [](const auto& c) { return c.passed; });
    if (!write_outputs) return out;
    const fs::path dir(cfg.output_dir);
    fs::create_directories(dir);
    write_file_atomic((dir / "quadsim.json").string(), cfg.to_json().dump(2) + "\n");
    CsvTable checks({"check", "value", "tolerance", "passed"});
    for (const auto& c : out.checks)
        checks.add_row({c.name, format_double(c.value), format_double(c.tolerance), c.passed ? "1" : "0"});
    checks.write((dir / "checks.csv").string());
    const QuadRun run = quad_policy_run(cfg);
    write_file_atomic((dir / "ledger.csv").string(), run.ledger.to_csv());
    for (std::size_t t = 0; t < run.checkpoints.thetas.size(); ++t) {
        CsvTable th({"index", "value"});
        const auto& v = run.checkpoints.thetas[t];
        for (Index i = 0; i < v.size(); ++i) th.add_row({std::to_string(i), format_double(v(i))});
        th.write((dir / ("theta_" + std::to_string(t) + ".csv")).string());
    }
    return out;
}

QuadRun load_quad_run(const std::string& dir) {
    QuadRunConfig cfg = load_quad_config((fs::path(dir) / "quadsim.json").string());
    return quad_policy_run(cfg);
}

namespace {

bool is_quad_dir(const std::string& dir) { return fs::exists(fs::path(dir) / "quadsim.json"); }

struct SeedCurvature {
    std::uint64_t seed;
    CheckpointSet cs;
    ForgettingLedger ledger;
};

std::vector<SeedCurvature> load_curvature(const std::string& dir, bool need_eigen) {
    std::vector<SeedCurvature> out;
    if (is_quad_dir(dir)) {
        QuadRun run = load_quad_run(dir);
        if (need_eigen) run.checkpoints.ensure_eigen();
        out.push_back({0, std::move(run.checkpoints), std::move(run.ledger)});
        return out;
    }
    const LoadedRun lr = load_run(dir);
    const TaskSequence seq = build_tasks(lr.config);
    const MlpSpec spec = lr.config.mlp_spec(seq.input_dim, seq.num_classes);
    for (const auto& [seed, thetas] : lr.thetas) {
        CheckpointSet cs = compute_curvature(lr.config, seq, thetas, true);
        if (need_eigen) cs.ensure_eigen();
        out.push_back({seed, std::move(cs), evaluate_ledger(spec, seq, thetas)});
    }
    return out;
}

}  // namespace

CsvTable approx_tables(const std::string& dir, const std::vector<int>& ranks) {
    CsvTable tab({"seed", "pairs", "source", "task_o", "task_t", "estimate", "measured", "abs_error"});
    for (const auto& sc : load_curvature(dir, !ranks.empty())) {
        std::vector<std::pair<std::string, HessianSource>> sources{{"exact", HessianSource::exact()}};
        for (int r : ranks) sources.emplace_back("rank" + std::to_string(r), HessianSource::low_rank(r));
        for (const auto& [name, src] : sources) {
            for (auto [pname, ps] : {std::pair{"all_prior", PairSet::all_prior}, std::pair{"previous", PairSet::previous}})
                for (const auto& e : taylor_errors(sc.cs, sc.ledger, src, ps))
                    tab.add_row({std::to_string(sc.seed), pname, name, std::to_string(e.o), std::to_string(e.t),
                                 format_double(e.estimate), format_double(e.measured), format_double(e.abs_error)});
            for (int t = 2; t <= sc.ledger.num_tasks(); ++t) {
                const double est = recursive_avg_forgetting(sc.cs, t, src);
                const double meas = sc.ledger.avg_forgetting(t);
                tab.add_row({std::to_string(sc.seed), "recursive", name, "0", std::to_string(t), format_double(est),
                             format_double(meas), format_double(std::abs(est - meas))});
            }
        }
    }
    return tab;
}

CsvTable score_tables(const std::string& dir, const ScoreOptions& opts) {
    CsvTable tab({"seed", "score", "task_o", "task_t", "value"});
    const bool quad = is_quad_dir(dir);
    std::optional<LoadedRun> lr;
    std::optional<TaskSequence> seq;
    if (!quad && (opts.blockdiag || opts.similarity)) {
        lr = load_run(dir);
        seq = build_tasks(lr->config);
    }
    for (const auto& sc : load_curvature(dir, opts.vnc)) {
        const auto s = std::to_string(sc.seed);
        const int T = sc.ledger.num_tasks();
        if (opts.vnc)
            for (int t = 2; t <= T; ++t) tab.add_row({s, "vnc", "0", std::to_string(t), format_double(vnc(sc.cs, t))});
        if (opts.ranks)
            for (const auto& r : rank_evolution(sc.cs, opts.rank_fracs)) {
                tab.add_row({s, "rank", "0", std::to_string(r.t), std::to_string(r.rank)});
                tab.add_row({s, "eff_rank_" + format_double(r.lambda_frac), "0", std::to_string(r.t),
                             std::to_string(r.effective_rank)});
            }
        if (!quad && (opts.blockdiag || opts.similarity)) {
            const MlpSpec spec = lr->config.mlp_spec(seq->input_dim, seq->num_classes);
            const auto blocks = layer_blocks(ParamLayout(spec));
            for (int o = 1; o <= T; ++o) {
                const Eigen::MatrixXd& h = *sc.cs.task(o).hessian;
                if (opts.blockdiag)
                    tab.add_row({s, "block_diagonality", std::to_string(o), std::to_string(o),
                                 format_double(block_diagonality(h, blocks))});
                if (opts.similarity) {
                    const auto& td = seq->tasks[static_cast<std::size_t>(o - 1)];
                    const Dataset& base = lr->config.diagnostics.hessian_split == "test" ? td.test : td.train;
                    const Dataset data = base.subset(sample_subset(base.size(), lr->config.diagnostics.hessian_samples,
                                                                   lr->config.dataset.data_seed + static_cast<std::uint64_t>(o)));
                    const Eigen::MatrixXd outer = outer_product_hessian(spec, sc.cs.theta(o), data);
                    tab.add_row({s, "similarity_outer_exact", std::to_string(o), std::to_string(o),
                                 format_double(spectral_similarity(outer, h))});
                }
            }
        }
    }
    return tab;
}

CsvTable perturb_checkpoint(const std::string& checkpoint_path, const PerturbOptions& opts) {
    const fs::path ck(checkpoint_path);
    const fs::path run_dir = ck.parent_path().parent_path();
    const ExperimentConfig cfg = load_config((run_dir / "config.json").string());
    const TaskSequence seq = build_tasks(cfg);
    const MlpSpec spec = cfg.mlp_spec(seq.input_dim, seq.num_classes);
    const Checkpoint c = load_checkpoint(checkpoint_path, spec);
    const int task = static_cast<int>(c.task_index);
    if (task < 1 || task > seq.size())
        throw Error(ErrorKind::invalid_argument, "checkpoint task index " + std::to_string(task) + " has no task data");
    const auto& td = seq.tasks[static_cast<std::size_t>(task - 1)];
    const Dataset& base = cfg.diagnostics.hessian_split == "test" ? td.test : td.train;
    const Dataset data = base.subset(
        sample_subset(base.size(), cfg.diagnostics.hessian_samples, cfg.dataset.data_seed + static_cast<std::uint64_t>(task)));
    PowerIterationOptions po;
    po.seed = opts.seed;
    const auto curve = perturbation_score(spec, c.params, data, opts.eig_index,
                                          opts.radii.empty() ? default_radii() : opts.radii, opts.n_random, opts.seed, po);
    CsvTable tab({"task_id", "r", "s_r", "denom_stderr", "reliable"});
    for (const auto& p : curve)
        tab.add_row({std::to_string(task), format_double(p.radius), format_double(p.score),
                     format_double(p.denom_stderr), p.reliable ? "1" : "0"});
    return tab;
}

CsvTable compare_runs(const std::vector<std::string>& dirs) {
    CsvTable tab({"run", "algorithm", "metric", "mean", "std"});
    for (const auto& d : dirs) {
        const ExperimentConfig cfg = load_config((fs::path(d) / "config.json").string());
        std::vector<MetricRow> rows;
        for (auto seed : cfg.seeds) {
            const fs::path m = fs::path(d) / ("seed_" + std::to_string(seed)) / "metrics.csv";
            auto r = parse_metrics_csv(read_file(m.string()));
            rows.insert(rows.end(), r.begin(), r.end());
        }
        const auto agg = aggregate(rows);
        int T = 0;
        for (const auto& a : agg) T = std::max(T, a.task_t);
        for (const char* metric : {"avg_forgetting", "avg_acc_forgetting", "avg_accuracy", "bwt", "vnc"}) {
            if (const AggregateRow* a = find_aggregate(agg, metric, 0, T))
                tab.add_row({cfg.name, cfg.algorithm.name, metric, format_double(a->mean), format_double(a->std)});
        }
    }
    return tab;
}

}  // namespace clgeo
