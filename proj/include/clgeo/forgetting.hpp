#pragma once

// Forgetting bookkeeping. Task indices are 1-based throughout: loss(t, o) is
// the loss of task o evaluated at the parameters reached after task t.

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clgeo/hessian.hpp"
#include "clgeo/mlp.hpp"

namespace clgeo {

class ForgettingLedger {
public:
    explicit ForgettingLedger(int num_tasks);

    int num_tasks() const { return num_tasks_; }

    void set_loss(int t, int o, double v);
    void set_acc(int t, int o, double v);
    double loss(int t, int o) const;
    double acc(int t, int o) const;
    double optimum_loss(int o) const { return loss(o, o); }

    // E_o(t) = L_o(theta_t) - L_o*.
    double forgetting(int o, int t) const;
    // (1/t) sum_{o=1..t} E_o(t).
    double avg_forgetting(int t) const;
    // a_{o,o} - a_{t,o}.
    double accuracy_forgetting(int o, int t) const;
    double avg_accuracy_forgetting(int t) const;
    // (1/(T-1)) sum_{o<T} (a_{o,o} - a_{T,o}).
    double bwt() const;
    // mean_{o<=t} a_{t,o}.
    double average_accuracy(int t) const;

    // Long format: table,task_t,task_o,value.
    std::string to_csv() const;
    static ForgettingLedger from_csv(const std::string& text);

    const Eigen::MatrixXd& loss_table() const { return loss_; }
    const Eigen::MatrixXd& acc_table() const { return acc_; }

private:
    void check(int t, int o) const;
    int num_tasks_;
    Eigen::MatrixXd loss_;  // NaN where undefined
    Eigen::MatrixXd acc_;
};

struct TaskCurvature {
    ParamVector gradient;                // grad L_o at theta_o
    std::optional<Eigen::MatrixXd> hessian;
    std::optional<EigenPairs> eigen;     // full or truncated spectrum
};

struct CheckpointSet {
    std::vector<ParamVector> thetas;        // theta_0 .. theta_T
    std::vector<TaskCurvature> curvature;   // entry o-1 belongs to task o

    int num_tasks() const { return static_cast<int>(thetas.size()) - 1; }
    const ParamVector& theta(int t) const;
    ParamVector delta(int t) const;  // theta_t - theta_{t-1}
    const TaskCurvature& task(int o) const;
    // Fills missing eigen summaries from stored dense Hessians.
    void ensure_eigen();
};

struct HessianSource {
    enum class Kind { exact, low_rank } kind = Kind::exact;
    int rank = 0;

    static HessianSource exact() { return {}; }
    static HessianSource low_rank(int r) { return {Kind::low_rank, r}; }
};

// H_o x under the chosen source.
Eigen::VectorXd apply_task_hessian(const TaskCurvature& c, const HessianSource& src, const Eigen::VectorXd& x);

struct TaylorTerms {
    double first_order = 0.0;
    double second_order = 0.0;
    double total = 0.0;
};

TaylorTerms taylor_forgetting(const CheckpointSet& cs, const HessianSource& src, int o, int t);

// Quadratic recursion for the average forgetting, seeded with E(1) = 0.
double recursive_avg_forgetting(const CheckpointSet& cs, int t, const HessianSource& src = HessianSource::exact());

// Delta_t^T (1/t sum_{o<t} H_o^+) Delta_t with H_o^+ the PSD part of H_o.
double vnc(const CheckpointSet& cs, int t);

struct Theorem1Result {
    double predicted = 0.0;
    double measured = 0.0;
    double gap = 0.0;
    double prior_forgetting = 0.0;  // max_o |E_o(t-1)|
    bool assumption_violated = false;
};

inline constexpr double default_prior_forgetting_tol = 1e-3;

Theorem1Result theorem1_check(const CheckpointSet& cs, const ForgettingLedger& ledger, int t,
                              double prior_tol = default_prior_forgetting_tol);

enum class PairSet {
    all_prior,  // every o in [1, t-1], t in [2, T]
    previous,   // o = t-1 only
};

struct TaylorError {
    int o = 0;
    int t = 0;
    double estimate = 0.0;
    double measured = 0.0;
    double abs_error = 0.0;
};

std::vector<TaylorError> taylor_errors(const CheckpointSet& cs, const ForgettingLedger& ledger,
                                       const HessianSource& src, PairSet pairs);

}  // namespace clgeo
