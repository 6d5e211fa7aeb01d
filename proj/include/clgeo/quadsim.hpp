#pragma once

// Exact quadratic tasks L_o(theta) = 1/2 (theta - c_o)^T H_o (theta - c_o).

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clgeo/forgetting.hpp"
#include "clgeo/mlp.hpp"

namespace clgeo {

struct QuadTask {
    ParamVector optimum;
    Eigen::MatrixXd hessian;

    Index dim() const { return optimum.size(); }
    void validate() const;
};

inline constexpr double null_space_rel_tol = 1e-10;
inline constexpr Index quadsim_max_dim = 500;

double quad_loss(const QuadTask& task, const ParamVector& theta);
ParamVector quad_grad(const QuadTask& task, const ParamVector& theta);

// Orthonormal basis of the eigenvectors of S with lambda < 1e-10 lambda_max.
Eigen::MatrixXd null_space_basis(const Eigen::MatrixXd& s);
ParamVector pseudoinverse_apply(const Eigen::MatrixXd& s, const ParamVector& x);

Eigen::MatrixXd hessian_sum(const std::vector<QuadTask>& tasks, std::size_t count);

struct ConstrainedUpdate {
    ParamVector delta;
    bool capacity_exhausted = false;
};

// Projects the proposal onto null(sum of the given task Hessians).
ConstrainedUpdate constrained_update(const ParamVector& proposed, const std::vector<QuadTask>& tasks_so_far);

// T tasks with random PSD Hessians of the given rank and random optima. With
// T * rank <= P the Hessian ranges are independent with probability one.
std::vector<QuadTask> random_low_rank_tasks(Index dim, int num_tasks, int rank, std::uint64_t seed);

enum class QuadPolicy { unconstrained, null_forgetting, nmf_correction };
enum class QuadStep { unconstrained, null_forgetting, correction };
enum class QuadSolver { closed_form, gradient_steps };
// Free vector of the corrective update: null-space projection of the new
// task's unconstrained step, or the constrained optimum of the new task.
enum class ZRule { project_step, constrained_optimum };

struct QuadRunOptions {
    std::uint64_t seed = 0;  // draws theta_0
    int tau = 3;             // task receiving the injected violation (nmf)
    ZRule z_rule = ZRule::project_step;
    QuadSolver solver = QuadSolver::closed_form;
    int max_gradient_steps = 200000;
    double gradient_tol = 1e-13;
};

struct QuadRun {
    CheckpointSet checkpoints;
    ForgettingLedger ledger{1};
    std::vector<Index> null_dims;           // dim null(sum_{o<=t} H_o), t = 1..T
    std::vector<bool> capacity_exhausted;   // per task
};

std::vector<QuadStep> policy_schedule(QuadPolicy policy, int num_tasks, int tau);

QuadRun run_schedule(const std::vector<QuadTask>& tasks, const std::vector<QuadStep>& schedule,
                     const QuadRunOptions& opts = {});
QuadRun run_sequence(const std::vector<QuadTask>& tasks, QuadPolicy policy, const QuadRunOptions& opts = {});

struct TheoremCheck {
    std::string name;
    double value = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

struct QuadSuiteConfig {
    Index dim = 50;
    int num_tasks = 5;
    int rank = 6;
    std::uint64_t seed = 0;
    int tau = 3;
    QuadSolver solver = QuadSolver::closed_form;
};

inline constexpr double theorem_tol = 1e-10;

std::vector<TheoremCheck> quadsim_theorem_suite(const QuadSuiteConfig& cfg);

}  // namespace clgeo
