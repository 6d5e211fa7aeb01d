#pragma once

// Post-hoc analysis over run directories, used by the CLI subcommands.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clgeo/csv.hpp"
#include "clgeo/quadsim.hpp"

namespace clgeo {

struct QuadRunConfig {
    QuadSuiteConfig suite;
    QuadPolicy policy = QuadPolicy::null_forgetting;
    ZRule z_rule = ZRule::project_step;
    std::string output_dir = "runs/quadsim";

    nlohmann::json to_json() const;
};

QuadRunConfig parse_quad_config(const nlohmann::json& j);
QuadRunConfig load_quad_config(const std::string& path);

struct QuadsimOutcome {
    std::vector<TheoremCheck> checks;
    bool all_passed = false;
};

// Runs the theorem suite plus the configured policy run and writes
// quadsim.json, checks.csv, ledger.csv and theta_<t>.csv into output_dir.
QuadsimOutcome run_quadsim(const QuadRunConfig& cfg, bool write_outputs = true);

// Rebuilds the quadratic run of a quadsim directory.
QuadRun load_quad_run(const std::string& dir);

// Taylor / recursive estimate error tables of a run directory (neural or
// quadsim). Columns: seed,pairs,source,task_o,task_t,estimate,measured,abs_error.
CsvTable approx_tables(const std::string& dir, const std::vector<int>& ranks);

struct ScoreOptions {
    bool vnc = false;
    bool blockdiag = false;
    bool similarity = false;
    bool ranks = false;
    std::vector<double> rank_fracs{1e-1, 1e-2, 1e-3};
};

// Columns: seed,score,task_o,task_t,value.
CsvTable score_tables(const std::string& dir, const ScoreOptions& opts);

struct PerturbOptions {
    std::vector<double> radii;  // empty: default grid
    int eig_index = 1;
    int n_random = 32;
    std::uint64_t seed = 0;
};

// Curve for the task a checkpoint belongs to, using the run's config.json
// found next to the checkpoint's seed directory.
CsvTable perturb_checkpoint(const std::string& checkpoint_path, const PerturbOptions& opts);

// Side-by-side final metrics of several run directories (mean and std over
// seeds): run,algorithm,metric,mean,std.
CsvTable compare_runs(const std::vector<std::string>& dirs);

}  // namespace clgeo
