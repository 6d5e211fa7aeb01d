#include "clgeo/forgetting.hpp"

#include <cmath>
#include <limits>

#include "clgeo/csv.hpp"
#include "clgeo/error.hpp"

namespace clgeo {

namespace {

constexpr double nan_value = std::numeric_limits<double>::quiet_NaN();

std::string pair_name(int t, int o) { return "(" + std::to_string(t) + ", " + std::to_string(o) + ")"; }

}  // namespace

ForgettingLedger::ForgettingLedger(int num_tasks) : num_tasks_(num_tasks) {
    if (num_tasks < 1) throw Error(ErrorKind::invalid_argument, "ledger needs at least one task");
    loss_ = Eigen::MatrixXd::Constant(num_tasks, num_tasks, nan_value);
    acc_ = loss_;
}

void ForgettingLedger::check(int t, int o) const {
    if (o < 1 || t < o || t > num_tasks_)
        throw Error(ErrorKind::invalid_argument, "ledger entry " + pair_name(t, o) + " outside 1 <= o <= t <= " +
                                                     std::to_string(num_tasks_));
}

void ForgettingLedger::set_loss(int t, int o, double v) {
    check(t, o);
    if (!std::isfinite(v)) throw Error(ErrorKind::numerical, "ledger loss " + pair_name(t, o) + " is not finite");
    loss_(t - 1, o - 1) = v;
}

void ForgettingLedger::set_acc(int t, int o, double v) {
    check(t, o);
    if (!std::isfinite(v)) throw Error(ErrorKind::numerical, "ledger accuracy " + pair_name(t, o) + " is not finite");
    acc_(t - 1, o - 1) = v;
}

double ForgettingLedger::loss(int t, int o) const {
    check(t, o);
    const double v = loss_(t - 1, o - 1);
    if (std::isnan(v)) throw Error(ErrorKind::invalid_argument, "ledger loss " + pair_name(t, o) + " missing");
    return v;
}

double ForgettingLedger::acc(int t, int o) const {
    check(t, o);
    const double v = acc_(t - 1, o - 1);
    if (std::isnan(v)) throw Error(ErrorKind::invalid_argument, "ledger accuracy " + pair_name(t, o) + " missing");
    return v;
}

double ForgettingLedger::forgetting(int o, int t) const { return loss(t, o) - loss(o, o); }

double ForgettingLedger::avg_forgetting(int t) const {
    double s = 0.0;
    for (int o = 1; o <= t; ++o) s += forgetting(o, t);
    return s / t;
}

double ForgettingLedger::accuracy_forgetting(int o, int t) const { return acc(o, o) - acc(t, o); }

double ForgettingLedger::avg_accuracy_forgetting(int t) const {
    double s = 0.0;
    for (int o = 1; o <= t; ++o) s += accuracy_forgetting(o, t);
    return s / t;
}

double ForgettingLedger::bwt() const {
    if (num_tasks_ < 2) throw Error(ErrorKind::invalid_argument, "bwt needs at least two tasks");
    double s = 0.0;
    for (int o = 1; o < num_tasks_; ++o) s += accuracy_forgetting(o, num_tasks_);
    return s / (num_tasks_ - 1);
}

double ForgettingLedger::average_accuracy(int t) const {
    double s = 0.0;
    for (int o = 1; o <= t; ++o) s += acc(t, o);
    return s / t;
}

std::string ForgettingLedger::to_csv() const {
    CsvTable tab({"table", "task_t", "task_o", "value"});
    for (int t = 1; t <= num_tasks_; ++t)
        for (int o = 1; o <= t; ++o) {
            if (!std::isnan(loss_(t - 1, o - 1)))
                tab.add_row({"loss", std::to_string(t), std::to_string(o), format_double(loss_(t - 1, o - 1))});
            if (!std::isnan(acc_(t - 1, o - 1)))
                tab.add_row({"acc", std::to_string(t), std::to_string(o), format_double(acc_(t - 1, o - 1))});
        }
    return tab.str();
}

ForgettingLedger ForgettingLedger::from_csv(const std::string& text) {
    const CsvTable tab = CsvTable::parse(text);
    const auto ci = tab.column("table"), ct = tab.column("task_t"), co = tab.column("task_o"),
               cv = tab.column("value");
    int T = 0;
    for (const auto& r : tab.rows()) T = std::max(T, std::stoi(r[ct]));
    ForgettingLedger led(T);
    for (const auto& r : tab.rows()) {
        const int t = std::stoi(r[ct]), o = std::stoi(r[co]);
        const double v = parse_double(r[cv]);
        if (r[ci] == "loss")
            led.set_loss(t, o, v);
        else if (r[ci] == "acc")
            led.set_acc(t, o, v);
        else
            throw Error(ErrorKind::io, "ledger csv: unknown table '" + r[ci] + "'");
    }
    return led;
}

const ParamVector& CheckpointSet::theta(int t) const {
    if (t < 0 || t > num_tasks())
        throw Error(ErrorKind::invalid_argument, "no checkpoint theta_" + std::to_string(t));
    return thetas[static_cast<std::size_t>(t)];
}

ParamVector CheckpointSet::delta(int t) const {
    if (t < 1) throw Error(ErrorKind::invalid_argument, "delta needs t >= 1");
    const ParamVector& a = theta(t);
    const ParamVector& b = theta(t - 1);
    if (a.size() != b.size()) throw Error(ErrorKind::dimension, "checkpoints have different layouts");
    return a - b;
}

const TaskCurvature& CheckpointSet::task(int o) const {
    if (o < 1 || o > static_cast<int>(curvature.size()))
        throw Error(ErrorKind::invalid_argument, "no curvature summary for task " + std::to_string(o));
    return curvature[static_cast<std::size_t>(o - 1)];
}

void CheckpointSet::ensure_eigen() {
    for (auto& c : curvature)
        if (!c.eigen && c.hessian) c.eigen = dense_eigs(*c.hessian);
}

Eigen::VectorXd apply_task_hessian(const TaskCurvature& c, const HessianSource& src, const Eigen::VectorXd& x) {
    if (src.kind == HessianSource::Kind::exact) {
        if (c.hessian) return *c.hessian * x;
        if (c.eigen && c.eigen->count() == x.size()) return c.eigen->vectors * (c.eigen->values.cwiseProduct(c.eigen->vectors.transpose() * x));
        throw Error(ErrorKind::invalid_argument, "exact Hessian requested but not stored");
    }
    if (!c.eigen) throw Error(ErrorKind::invalid_argument, "low-rank Hessian requested but no eigenpairs stored");
    if (src.rank > c.eigen->count())
        throw Error(ErrorKind::invalid_argument, "rank " + std::to_string(src.rank) + " exceeds the " +
                                                     std::to_string(c.eigen->count()) + " stored eigenpairs");
    const auto v = c.eigen->vectors.leftCols(src.rank);
    return v * (c.eigen->values.head(src.rank).cwiseProduct(v.transpose() * x));
}

TaylorTerms taylor_forgetting(const CheckpointSet& cs, const HessianSource& src, int o, int t) {
    if (o < 1 || t < o) throw Error(ErrorKind::invalid_argument, "taylor_forgetting needs 1 <= o <= t");
    const TaskCurvature& c = cs.task(o);
    const ParamVector d = cs.theta(t) - cs.theta(o);
    TaylorTerms r;
    if (c.gradient.size() != d.size()) throw Error(ErrorKind::invalid_argument, "task gradient missing");
    r.first_order = d.dot(c.gradient);
    r.second_order = 0.5 * d.dot(apply_task_hessian(c, src, d));
    r.total = r.first_order + r.second_order;
    return r;
}

double recursive_avg_forgetting(const CheckpointSet& cs, int t, const HessianSource& src) {
    if (t < 2) throw Error(ErrorKind::invalid_argument, "recursive forgetting needs t >= 2");
    double e = 0.0;
    for (int s = 2; s <= t; ++s) {
        const ParamVector d = cs.delta(s);
        double quad = 0.0, lin = 0.0;
        for (int o = 1; o < s; ++o) {
            quad += d.dot(apply_task_hessian(cs.task(o), src, d));
            // v collects H_o (theta_{s-1} - theta_o); the o = s-1 term is zero.
            if (o < s - 1) lin += d.dot(apply_task_hessian(cs.task(o), src, cs.theta(s - 1) - cs.theta(o)));
        }
        e = ((s - 1) * e + 0.5 * quad + lin) / s;
    }
    return e;
}

namespace {

double psd_quadratic(const TaskCurvature& c, const ParamVector& d) {
    if (c.eigen) {
        const Eigen::VectorXd proj = c.eigen->vectors.transpose() * d;
        return (c.eigen->values.cwiseMax(0.0).array() * proj.array().square()).sum();
    }
    if (c.hessian) {
        const EigenPairs e = dense_eigs(*c.hessian);
        const Eigen::VectorXd proj = e.vectors.transpose() * d;
        return (e.values.cwiseMax(0.0).array() * proj.array().square()).sum();
    }
    throw Error(ErrorKind::invalid_argument, "task Hessian missing");
}

}  // namespace

double vnc(const CheckpointSet& cs, int t) {
    if (t < 2) throw Error(ErrorKind::invalid_argument, "vnc needs t >= 2");
    const ParamVector d = cs.delta(t);
    double s = 0.0;
    for (int o = 1; o < t; ++o) s += psd_quadratic(cs.task(o), d);
    return s / t;
}

Theorem1Result theorem1_check(const CheckpointSet& cs, const ForgettingLedger& ledger, int t, double prior_tol) {
    Theorem1Result r;
    r.predicted = 0.5 * vnc(cs, t);
    r.measured = ledger.avg_forgetting(t);
    r.gap = std::abs(r.predicted - r.measured);
    for (int o = 1; o < t - 1; ++o) r.prior_forgetting = std::max(r.prior_forgetting, std::abs(ledger.forgetting(o, t - 1)));
    r.assumption_violated = r.prior_forgetting > prior_tol;
    return r;
}

std::vector<TaylorError> taylor_errors(const CheckpointSet& cs, const ForgettingLedger& ledger,
                                       const HessianSource& src, PairSet pairs) {
    std::vector<TaylorError> out;
    for (int t = 2; t <= ledger.num_tasks(); ++t) {
        const int first = pairs == PairSet::previous ? t - 1 : 1;
        for (int o = first; o < t; ++o) {
            TaylorError e;
            e.o = o;
            e.t = t;
            e.estimate = taylor_forgetting(cs, src, o, t).total;
            e.measured = ledger.forgetting(o, t);
            e.abs_error = std::abs(e.estimate - e.measured);
            out.push_back(e);
        }
    }
    return out;
}

}  // namespace clgeo
