#pragma once

// Config-driven continual-learning runs. A run directory holds:
//   config.json            canonical config
//   manifest.json          config hash, version, seeds, file provenance
//   aggregate.csv          metric,task_o,task_t,n,mean,std
//   seed_<s>/metrics.csv   config_hash,metric,task_o,task_t,seed,value
//   seed_<s>/ledger.csv    table,task_t,task_o,value
//   seed_<s>/theta_<t>.ckpt
//   FAILED                 present only when a seed aborted

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clgeo/cl_algos.hpp"
#include "clgeo/forgetting.hpp"
#include "clgeo/landscape.hpp"
#include "clgeo/mlp.hpp"
#include "clgeo/tasks.hpp"

namespace clgeo {

inline constexpr const char* clgeo_version = "0.1.0";

enum ExitCode : int { exit_ok = 0, exit_config = 2, exit_runtime = 3, exit_acceptance = 4 };

struct DatasetConfig {
    std::string kind = "rotated";  // rotated | toy | split
    DigitSource source = DigitSource::synthetic();
    std::vector<double> angles{-45.0, -22.5, 0.0, 22.5, 45.0};
    int downscale = 2;
    Index n_train = 2000;
    Index n_test = 500;
    int n_per_class = 100;       // toy
    int classes_per_task = 2;    // split
    std::uint64_t data_seed = 0;
};

struct ModelConfig {
    std::vector<int> hidden{8, 8, 8};
    Activation activation = Activation::relu;
    bool use_bias = false;
    LossKind loss = LossKind::cross_entropy;
};

struct AlgorithmConfig {
    std::string name = "sgd";  // sgd | sgd_dagger | ogd | ogd_gtl | gpm | mask
    double epsilon = 0.01;
    std::optional<int> k;      // fixed-k SGD-dagger instead of epsilon
    Index sample_cap = 200;    // OGD / GPM stored samples per task
    Index hessian_samples = 1000;  // SGD-dagger Hessian subset
    Index memory_cap = -1;
    double mask_fraction = 0.2;
};

struct PhaseTrain {
    double lr = 0.01;
    int epochs = 5;
};

struct TrainSchedule {
    PhaseTrain first;  // task 1
    PhaseTrain rest;   // tasks 2..T
    int batch_size = 10;
    std::vector<int> decay_epochs;
    double decay_factor = 0.1;

    TrainConfig for_task(int t, std::uint64_t seed) const;
};

struct DiagnosticsConfig {
    bool hessians = false;          // dense H_o at each task solution
    std::string hessian_split = "test";  // test | train
    Index hessian_samples = 1000;
    bool taylor = false;
    std::vector<int> low_rank;      // ranks for truncated-Hessian estimates
    bool vnc = false;
    bool landscape = false;         // block-diagonality and outer/exact similarity
    std::vector<double> rank_fracs; // rank evolution thresholds
    bool spectra = false;
    bool perturb = false;
    int perturb_eig_index = 1;
    int perturb_draws = default_perturb_draws;
    bool dump_memory = false;
    bool record_trace = false;      // check per-step constraints during training
};

struct ExperimentConfig {
    std::string name = "experiment";
    DatasetConfig dataset;
    ModelConfig model;
    AlgorithmConfig algorithm;
    TrainSchedule train;
    DiagnosticsConfig diagnostics;
    std::vector<std::uint64_t> seeds{11, 13, 21, 33, 55};
    std::string output_dir = "runs/experiment";

    nlohmann::json to_json() const;
    std::string canonical() const;  // compact JSON, output_dir omitted
    std::uint64_t hash() const;
    MlpSpec mlp_spec(int input_dim, int num_classes) const;
};

// Collects every field-level problem before failing with ErrorKind::config.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);

TaskSequence build_tasks(const ExperimentConfig& cfg);

struct MetricRow {
    std::string metric;
    int task_o = 0;  // 0 when the metric has no task index
    int task_t = 0;
    std::uint64_t seed = 0;
    double value = 0.0;
};

struct SeedResult {
    std::uint64_t seed = 0;
    std::vector<ParamVector> thetas;  // theta_0 .. theta_T
    ForgettingLedger ledger{1};
    CheckpointSet checkpoints;        // filled when diagnostics need curvature
    std::vector<MetricRow> metrics;
    double max_constraint_violation = 0.0;  // over recorded traces
};

// Trains one seed end to end and computes the configured diagnostics.
SeedResult run_seed(const ExperimentConfig& cfg, const TaskSequence& seq, std::uint64_t seed);

struct AggregateRow {
    std::string metric;
    int task_o = 0;
    int task_t = 0;
    std::size_t n = 0;
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation, 0 for n = 1
};

std::vector<AggregateRow> aggregate(const std::vector<MetricRow>& rows);
const AggregateRow* find_aggregate(const std::vector<AggregateRow>& rows, const std::string& metric, int task_o,
                                   int task_t);

std::string metrics_csv(std::uint64_t config_hash, const std::vector<MetricRow>& rows);
std::vector<MetricRow> parse_metrics_csv(const std::string& text);
std::string aggregate_csv(const std::vector<AggregateRow>& rows);

struct RunSummary {
    std::string dir;
    std::vector<SeedResult> seeds;
    std::vector<AggregateRow> aggregate;
};

// Writes the run directory; partial output plus a FAILED marker survive a
// failing seed, and the error is rethrown.
RunSummary run_experiment(const ExperimentConfig& cfg, bool write_outputs = true);

// Loads config.json and every seed's checkpoints from a run directory.
struct LoadedRun {
    ExperimentConfig config;
    std::vector<std::pair<std::uint64_t, std::vector<ParamVector>>> thetas;
};
LoadedRun load_run(const std::string& dir);

// Curvature at each task solution on the configured split.
CheckpointSet compute_curvature(const ExperimentConfig& cfg, const TaskSequence& seq,
                                const std::vector<ParamVector>& thetas, bool dense_hessian);
ForgettingLedger evaluate_ledger(const MlpSpec& spec, const TaskSequence& seq, const std::vector<ParamVector>& thetas);

}  // namespace clgeo
