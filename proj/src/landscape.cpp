#include "clgeo/landscape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "clgeo/csv.hpp"
#include "clgeo/error.hpp"

namespace clgeo {

std::vector<double> log_radii(double lo, double hi, int count) {
    if (!(lo > 0.0 && hi > lo) || count < 2)
        throw Error(ErrorKind::invalid_argument, "log_radii: need 0 < lo < hi and count >= 2");
    std::vector<double> r(static_cast<std::size_t>(count));
    const double a = std::log10(lo), b = std::log10(hi);
    for (int i = 0; i < count; ++i) r[static_cast<std::size_t>(i)] = std::pow(10.0, a + (b - a) * i / (count - 1));
    return r;
}

std::vector<double> default_radii() { return log_radii(1e-3, 1e4, 25); }

std::vector<PerturbPoint> perturbation_curve(const LossFn& loss, const ParamVector& params,
                                             const Eigen::VectorXd& direction, const std::vector<double>& radii,
                                             int n_random, std::uint64_t seed) {
    if (n_random < 2) throw Error(ErrorKind::invalid_argument, "perturbation: n_random must be >= 2");
    if (direction.size() != params.size())
        throw Error(ErrorKind::dimension, "perturbation: direction length does not match parameters");
    const double vn = direction.norm();
    if (!(vn > 0.0)) throw Error(ErrorKind::invalid_argument, "perturbation: zero direction");
    const Eigen::VectorXd v = direction / vn;

    const Index p = params.size();
    Eigen::MatrixXd mu(p, n_random);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    for (int j = 0; j < n_random; ++j) {
        for (Index i = 0; i < p; ++i) mu(i, j) = normal(rng);
        mu.col(j).normalize();
    }

    const double base = loss(params);
    std::vector<PerturbPoint> curve;
    curve.reserve(radii.size());
    for (double r : radii) {
        PerturbPoint pt;
        pt.radius = r;
        pt.numerator = std::abs(loss(params + r * v) - base);
        Eigen::VectorXd d(n_random);
        for (int j = 0; j < n_random; ++j) d(j) = std::abs(loss(params + r * mu.col(j)) - base);
        pt.denominator = d.mean();
        const double var = (d.array() - pt.denominator).square().sum() / (n_random - 1);
        pt.denom_stderr = std::sqrt(var / n_random);
        pt.reliable = pt.denominator >= perturb_denominator_floor;
        if (pt.reliable) {
            pt.score = pt.numerator / pt.denominator;
            pt.score_stderr = pt.score * pt.denom_stderr / pt.denominator;
        } else {
            pt.score = std::numeric_limits<double>::quiet_NaN();
            pt.score_stderr = std::numeric_limits<double>::quiet_NaN();
        }
        curve.push_back(pt);
    }
    return curve;
}

std::vector<PerturbPoint> perturbation_score(const MlpSpec& spec, const ParamVector& params, const Dataset& data,
                                             int eig_index, const std::vector<double>& radii, int n_random,
                                             std::uint64_t seed, const PowerIterationOptions& power) {
    if (eig_index < 1) throw Error(ErrorKind::invalid_argument, "perturbation: eig_index is 1-based");
    HessianOperator op(spec, params, data);
    const EigenPairs eig =
        top_k_eigs([&op](const Eigen::VectorXd& x) { return op.apply(x); }, op.dim(), eig_index, power);
    const Eigen::VectorXd v = eig.vectors.col(eig_index - 1);
    return perturbation_curve([&](const ParamVector& th) { return mean_loss(spec, th, data); }, params, v, radii,
                              n_random, seed);
}

std::optional<double> convergence_radius(const std::vector<PerturbPoint>& curve, double tol, int sustain) {
    int run = 0;
    for (std::size_t i = 0; i < curve.size(); ++i) {
        const auto& p = curve[i];
        if (p.reliable && std::abs(p.score - 1.0) < tol) {
            if (++run == sustain) return curve[i + 1 - static_cast<std::size_t>(sustain)].radius;
        } else {
            run = 0;
        }
    }
    return std::nullopt;
}

void write_perturbation_csv(const std::string& path, int task_id, const std::vector<PerturbPoint>& curve) {
    CsvTable t({"task_id", "r", "s_r", "denom_stderr", "reliable"});
    for (const auto& p : curve)
        t.add_row({std::to_string(task_id), format_double(p.radius), format_double(p.score),
                   format_double(p.denom_stderr), p.reliable ? "1" : "0"});
    t.write(path);
}

std::vector<int> layer_blocks(const ParamLayout& layout, bool exclude_bias) {
    std::vector<int> b(static_cast<std::size_t>(layout.size()), -1);
    for (const auto& s : layout.layers()) {
        for (Index i = 0; i < s.weight_count(); ++i) b[static_cast<std::size_t>(s.weight_offset + i)] = s.layer;
        if (s.bias_offset >= 0 && !exclude_bias)
            for (Index i = 0; i < s.cols; ++i) b[static_cast<std::size_t>(s.bias_offset + i)] = s.layer;
    }
    return b;
}

double block_diagonality(const Eigen::MatrixXd& m, const std::vector<int>& blocks) {
    if (m.rows() != m.cols() || static_cast<std::size_t>(m.rows()) != blocks.size())
        throw Error(ErrorKind::dimension, "block_diagonality: matrix and block partition sizes differ");
    double in_sum = 0.0, off_sum = 0.0;
    double in_n = 0.0, off_n = 0.0;
    for (Index j = 0; j < m.cols(); ++j) {
        const int bj = blocks[static_cast<std::size_t>(j)];
        if (bj < 0) continue;
        for (Index i = 0; i < m.rows(); ++i) {
            const int bi = blocks[static_cast<std::size_t>(i)];
            if (bi < 0) continue;
            if (bi == bj) {
                in_sum += std::abs(m(i, j));
                in_n += 1.0;
            } else {
                off_sum += std::abs(m(i, j));
                off_n += 1.0;
            }
        }
    }
    if (in_n == 0.0 || in_sum == 0.0)
        throw Error(ErrorKind::numerical, "block_diagonality: in-block mean is zero, score undefined");
    if (off_n == 0.0) return 1.0;
    return 1.0 - (off_sum / off_n) / (in_sum / in_n);
}

double spectral_similarity(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw Error(ErrorKind::dimension, "spectral_similarity: shapes differ");
    // All three sums share one reduction order and sqrt(x * x) == x in IEEE
    // arithmetic, so S(A, A) is exactly 1.
    const double ab = (a.array() * b.array()).sum();
    const double aa = (a.array() * a.array()).sum();
    const double bb = (b.array() * b.array()).sum();
    if (aa == 0.0 || bb == 0.0) throw Error(ErrorKind::numerical, "spectral_similarity: zero-norm input");
    const double prod = aa * bb;
    const double denom = std::isfinite(prod) && prod > 0.0 ? std::sqrt(prod) : std::sqrt(aa) * std::sqrt(bb);
    return std::clamp(ab / denom, -1.0, 1.0);
}

std::vector<RankRow> rank_evolution(const CheckpointSet& cs, const std::vector<double>& lambda_fracs) {
    std::vector<RankRow> rows;
    Eigen::MatrixXd sum;
    for (int t = 2; t <= static_cast<int>(cs.curvature.size()) + 1; ++t) {
        const TaskCurvature& c = cs.task(t - 1);
        if (!c.hessian) throw Error(ErrorKind::invalid_argument, "rank_evolution needs dense task Hessians");
        if (sum.size() == 0)
            sum = *c.hessian;
        else
            sum += *c.hessian;
        const Eigen::MatrixXd avg = sum / static_cast<double>(t - 1);
        const Eigen::VectorXd ev = dense_eigenvalues(avg);
        const Index rank = numerical_rank(ev, avg.rows());
        for (double f : lambda_fracs) rows.push_back({t, rank, f, effective_rank(ev, f)});
    }
    return rows;
}

void write_rank_csv(const std::string& path, const std::vector<RankRow>& rows) {
    CsvTable t({"t", "rank", "lambda_frac", "eff_rank"});
    for (const auto& r : rows)
        t.add_row({std::to_string(r.t), std::to_string(r.rank), format_double(r.lambda_frac),
                   std::to_string(r.effective_rank)});
    t.write(path);
}

}  // namespace clgeo
