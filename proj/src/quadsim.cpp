#include "clgeo/quadsim.hpp"

#include <cmath>
#include <random>

#include "clgeo/error.hpp"

namespace clgeo {

void QuadTask::validate() const {
    if (hessian.rows() != dim() || hessian.cols() != dim())
        throw Error(ErrorKind::dimension, "quad task: Hessian shape does not match the optimum");
    if (dim() > quadsim_max_dim)
        throw Error(ErrorKind::capacity, "quad task: dimension " + std::to_string(dim()) + " exceeds " +
                                             std::to_string(quadsim_max_dim));
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(hessian, Eigen::EigenvaluesOnly).eigenvalues();
    const double lmax = ev.cwiseAbs().maxCoeff();
    if (ev.minCoeff() < -1e-12 * lmax)
        throw Error(ErrorKind::numerical, "quad task: Hessian is not PSD (lambda_min " + std::to_string(ev.minCoeff()) + ")");
}

double quad_loss(const QuadTask& task, const ParamVector& theta) {
    const ParamVector d = theta - task.optimum;
    return 0.5 * d.dot(task.hessian * d);
}

ParamVector quad_grad(const QuadTask& task, const ParamVector& theta) { return task.hessian * (theta - task.optimum); }

namespace {

struct Split {
    Eigen::MatrixXd range;
    Eigen::VectorXd range_values;
    Eigen::MatrixXd null;
};

Split split_spectrum(const Eigen::MatrixXd& s) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
    if (es.info() != Eigen::Success) throw Error(ErrorKind::numerical, "quadsim: eigensolver failed");
    const Eigen::VectorXd& ev = es.eigenvalues();
    const double lmax = ev.size() ? ev.cwiseAbs().maxCoeff() : 0.0;
    const double thr = null_space_rel_tol * lmax;
    std::vector<Index> keep, drop;
    for (Index i = 0; i < ev.size(); ++i) (lmax > 0.0 && std::abs(ev(i)) >= thr ? keep : drop).push_back(i);
    Split sp;
    sp.range.resize(s.rows(), static_cast<Index>(keep.size()));
    sp.range_values.resize(static_cast<Index>(keep.size()));
    sp.null.resize(s.rows(), static_cast<Index>(drop.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
        sp.range.col(static_cast<Index>(k)) = es.eigenvectors().col(keep[k]);
        sp.range_values(static_cast<Index>(k)) = ev(keep[k]);
    }
    for (std::size_t k = 0; k < drop.size(); ++k) sp.null.col(static_cast<Index>(k)) = es.eigenvectors().col(drop[k]);
    return sp;
}

}  // namespace

Eigen::MatrixXd null_space_basis(const Eigen::MatrixXd& s) { return split_spectrum(s).null; }

ParamVector pseudoinverse_apply(const Eigen::MatrixXd& s, const ParamVector& x) {
    if (s.rows() != s.cols() || s.rows() != x.size())
        throw Error(ErrorKind::dimension, "pseudoinverse_apply: shape mismatch");
    const Split sp = split_spectrum(s);
    return sp.range * ((sp.range.transpose() * x).cwiseQuotient(sp.range_values));
}

Eigen::MatrixXd hessian_sum(const std::vector<QuadTask>& tasks, std::size_t count) {
    if (tasks.empty()) throw Error(ErrorKind::invalid_argument, "hessian_sum: no tasks");
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(tasks.front().dim(), tasks.front().dim());
    for (std::size_t i = 0; i < count && i < tasks.size(); ++i) s += tasks[i].hessian;
    return s;
}

ConstrainedUpdate constrained_update(const ParamVector& proposed, const std::vector<QuadTask>& tasks_so_far) {
    ConstrainedUpdate out;
    if (tasks_so_far.empty()) {
        out.delta = proposed;
        return out;
    }
    const Eigen::MatrixXd n = null_space_basis(hessian_sum(tasks_so_far, tasks_so_far.size()));
    if (n.cols() == 0) {
        out.delta = ParamVector::Zero(proposed.size());
        out.capacity_exhausted = true;
        return out;
    }
    out.delta = n * (n.transpose() * proposed);
    return out;
}

std::vector<QuadTask> random_low_rank_tasks(Index dim, int num_tasks, int rank, std::uint64_t seed) {
    if (dim < 1 || num_tasks < 1 || rank < 1 || rank > dim)
        throw Error(ErrorKind::invalid_argument, "random_low_rank_tasks: need 1 <= rank <= P and T >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    std::vector<QuadTask> tasks;
    for (int t = 0; t < num_tasks; ++t) {
        Eigen::MatrixXd a(dim, rank);
        for (Index j = 0; j < rank; ++j)
            for (Index i = 0; i < dim; ++i) a(i, j) = normal(rng) / std::sqrt(static_cast<double>(dim));
        QuadTask task;
        task.hessian = a * a.transpose();
        task.hessian = 0.5 * (task.hessian + task.hessian.transpose()).eval();
        task.optimum.resize(dim);
        for (Index i = 0; i < dim; ++i) task.optimum(i) = normal(rng);
        tasks.push_back(std::move(task));
    }
    return tasks;
}

std::vector<QuadStep> policy_schedule(QuadPolicy policy, int num_tasks, int tau) {
    std::vector<QuadStep> s(static_cast<std::size_t>(num_tasks), QuadStep::null_forgetting);
    if (policy == QuadPolicy::unconstrained) std::fill(s.begin(), s.end(), QuadStep::unconstrained);
    if (policy == QuadPolicy::nmf_correction) {
        if (tau < 2 || tau >= num_tasks)
            throw Error(ErrorKind::config, "nmf_correction needs 2 <= tau < T (got tau " + std::to_string(tau) + ")");
        s[static_cast<std::size_t>(tau - 1)] = QuadStep::unconstrained;
        s[static_cast<std::size_t>(tau)] = QuadStep::correction;
    }
    return s;
}

namespace {

// Minimiser of the task loss over theta + span(basis), closed form.
ParamVector subspace_minimiser_step(const QuadTask& task, const ParamVector& theta, const Eigen::MatrixXd& basis) {
    if (basis.cols() == 0) return ParamVector::Zero(theta.size());
    const Eigen::MatrixXd reduced = basis.transpose() * task.hessian * basis;
    const ParamVector rhs = -(basis.transpose() * quad_grad(task, theta));
    return basis * pseudoinverse_apply(0.5 * (reduced + reduced.transpose()), rhs);
}

// Projected gradient descent over the same subspace.
ParamVector subspace_gradient_steps(const QuadTask& task, const ParamVector& theta, const Eigen::MatrixXd& basis,
                                    const QuadRunOptions& opts) {
    if (basis.cols() == 0) return ParamVector::Zero(theta.size());
    const double lmax = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(task.hessian, Eigen::EigenvaluesOnly)
                            .eigenvalues()
                            .maxCoeff();
    if (!(lmax > 0.0)) return ParamVector::Zero(theta.size());
    const double lr = 1.0 / lmax;
    ParamVector th = theta;
    for (int s = 0; s < opts.max_gradient_steps; ++s) {
        const ParamVector g = basis * (basis.transpose() * quad_grad(task, th));
        if (g.norm() < opts.gradient_tol) break;
        th -= lr * g;
    }
    return th - theta;
}

ParamVector task_step(const QuadTask& task, const ParamVector& theta, const Eigen::MatrixXd& basis,
                      const QuadRunOptions& opts) {
    return opts.solver == QuadSolver::closed_form ? subspace_minimiser_step(task, theta, basis)
                                                  : subspace_gradient_steps(task, theta, basis, opts);
}

}  // namespace

QuadRun run_schedule(const std::vector<QuadTask>& tasks, const std::vector<QuadStep>& schedule,
                     const QuadRunOptions& opts) {
    if (tasks.empty() || schedule.size() != tasks.size())
        throw Error(ErrorKind::invalid_argument, "quadsim: schedule length must equal the task count");
    for (const auto& t : tasks) {
        t.validate();
        if (t.dim() != tasks.front().dim()) throw Error(ErrorKind::dimension, "quadsim: tasks differ in dimension");
    }
    const Index p = tasks.front().dim();
    const int T = static_cast<int>(tasks.size());
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(p, p);

    QuadRun run;
    run.ledger = ForgettingLedger(T);
    std::mt19937_64 rng(opts.seed);
    std::normal_distribution<double> normal;
    ParamVector theta(p);
    for (Index i = 0; i < p; ++i) theta(i) = normal(rng);
    run.checkpoints.thetas.push_back(theta);

    for (int t = 1; t <= T; ++t) {
        const QuadTask& task = tasks[static_cast<std::size_t>(t - 1)];
        const Eigen::MatrixXd prior = hessian_sum(tasks, static_cast<std::size_t>(t - 1));
        bool exhausted = false;
        ParamVector delta;
        switch (schedule[static_cast<std::size_t>(t - 1)]) {
            case QuadStep::unconstrained:
                delta = task_step(task, theta, eye, opts);
                break;
            case QuadStep::null_forgetting: {
                const Eigen::MatrixXd n = t == 1 ? eye : null_space_basis(prior);
                exhausted = n.cols() == 0;
                delta = task_step(task, theta, n, opts);
                break;
            }
            case QuadStep::correction: {
                if (t < 3) throw Error(ErrorKind::config, "quadsim: correction needs two earlier tasks");
                const ParamVector prev_delta = run.checkpoints.delta(t - 1);
                const Eigen::MatrixXd b = hessian_sum(tasks, static_cast<std::size_t>(t - 2));
                const ParamVector back = -pseudoinverse_apply(prior, b * prev_delta);
                const Eigen::MatrixXd n = null_space_basis(prior);
                exhausted = n.cols() == 0;
                ParamVector z;
                if (opts.z_rule == ZRule::project_step) {
                    const ParamVector u = task_step(task, theta, eye, opts);
                    z = n * (n.transpose() * u);
                } else {
                    z = task_step(task, theta + back, n, opts);
                }
                delta = z + back;
                break;
            }
        }
        theta += delta;
        run.checkpoints.thetas.push_back(theta);
        TaskCurvature c;
        c.gradient = quad_grad(task, theta);
        c.hessian = task.hessian;
        run.checkpoints.curvature.push_back(std::move(c));
        run.capacity_exhausted.push_back(exhausted);
        run.null_dims.push_back(null_space_basis(hessian_sum(tasks, static_cast<std::size_t>(t))).cols());
        for (int o = 1; o <= t; ++o) run.ledger.set_loss(t, o, quad_loss(tasks[static_cast<std::size_t>(o - 1)], theta));
    }
    return run;
}

QuadRun run_sequence(const std::vector<QuadTask>& tasks, QuadPolicy policy, const QuadRunOptions& opts) {
    return run_schedule(tasks, policy_schedule(policy, static_cast<int>(tasks.size()), opts.tau), opts);
}

std::vector<TheoremCheck> quadsim_theorem_suite(const QuadSuiteConfig& cfg) {
    const auto tasks = random_low_rank_tasks(cfg.dim, cfg.num_tasks, cfg.rank, cfg.seed);
    const int T = cfg.num_tasks;
    QuadRunOptions opts;
    opts.seed = cfg.seed + 1;
    opts.tau = cfg.tau;
    opts.solver = cfg.solver;
    std::vector<TheoremCheck> out;
    auto add = [&](std::string name, double value, double tol, bool ok) {
        out.push_back({std::move(name), value, tol, ok});
    };

    // Null-forgetting keeps every task's loss at its optimum.
    {
        const QuadRun run = run_sequence(tasks, QuadPolicy::null_forgetting, opts);
        double worst = 0.0;
        for (int t = 2; t <= T; ++t)
            for (int o = 1; o < t; ++o) worst = std::max(worst, std::abs(run.ledger.forgetting(o, t)));
        add("null-forgetting max |E_o(t)|", worst, theorem_tol, worst < theorem_tol);
        double worst_avg = 0.0;
        for (int t = 2; t <= T; ++t) worst_avg = std::max(worst_avg, std::abs(run.ledger.avg_forgetting(t)));
        add("null-forgetting max |E(t)|", worst_avg, theorem_tol, worst_avg < theorem_tol);
        bool monotone = true;
        for (std::size_t i = 1; i < run.null_dims.size(); ++i) monotone = monotone && run.null_dims[i] <= run.null_dims[i - 1];
        add("null-space dimension non-increasing", monotone ? 0.0 : 1.0, 0.0, monotone);
    }

    // Constrained history, then one unconstrained step: the quadratic formula
    // is exact.
    for (int t = 2; t <= T; ++t) {
        std::vector<QuadStep> sched(static_cast<std::size_t>(T), QuadStep::null_forgetting);
        sched[static_cast<std::size_t>(t - 1)] = QuadStep::unconstrained;
        QuadRun run = run_schedule(tasks, sched, opts);
        const Theorem1Result r = theorem1_check(run.checkpoints, run.ledger, t);
        add("average-forgetting formula gap, t=" + std::to_string(t), r.gap, theorem_tol,
            r.gap < theorem_tol && r.measured > theorem_tol && !r.assumption_violated);
        const double rec = std::abs(recursive_avg_forgetting(run.checkpoints, t) - run.ledger.avg_forgetting(t));
        add("recursive estimate gap, t=" + std::to_string(t), rec, theorem_tol, rec < theorem_tol);
    }

    // Injected violation at tau, corrective update at tau + 1.
    {
        const QuadRun run = run_sequence(tasks, QuadPolicy::nmf_correction, opts);
        const double e_tau = run.ledger.avg_forgetting(cfg.tau);
        add("violation injected, E(tau)", e_tau, theorem_tol, e_tau > theorem_tol);
        const double e_next = std::abs(run.ledger.avg_forgetting(cfg.tau + 1));
        add("correction restores E(tau+1)", e_next, theorem_tol, e_next < theorem_tol);
    }

    // After the correction the formula applies again.
    if (cfg.tau + 2 <= T) {
        QuadRunOptions o2 = opts;
        o2.z_rule = ZRule::constrained_optimum;
        auto sched = policy_schedule(QuadPolicy::nmf_correction, T, cfg.tau);
        sched[static_cast<std::size_t>(cfg.tau + 1)] = QuadStep::unconstrained;
        const QuadRun run = run_schedule(tasks, sched, o2);
        const Theorem1Result r = theorem1_check(run.checkpoints, run.ledger, cfg.tau + 2);
        add("formula after correction, t=tau+2", r.gap, theorem_tol,
            r.gap < theorem_tol && !r.assumption_violated);
    }
    return out;
}

}  // namespace clgeo
