#include "clgeo/hessian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "clgeo/csv.hpp"
#include "clgeo/error.hpp"

namespace clgeo {

HessianOperator::HessianOperator(const MlpSpec& spec, const ParamVector& params, const Dataset& data)
    : spec_(spec), layout_(spec), params_(params) {
    data.validate(spec.output_dim());
    layout_.check(params);
    tape_ = detail::run_forward(spec_, layout_, params_, data.inputs);
    const auto& logits = tape_.pre.back();
    const Index n = data.size();
    inv_n_ = 1.0 / static_cast<double>(n);
    for (Index i = 0; i < n; ++i) {
        loss_ += sample_loss(spec.loss, logits.row(i).transpose(), data.labels[static_cast<std::size_t>(i)]);
    }
    loss_ *= inv_n_;
    if (spec.loss == LossKind::cross_entropy) {
        probs_.resize(logits.rows(), logits.cols());
        for (Index i = 0; i < n; ++i) probs_.row(i) = softmax(logits.row(i).transpose()).transpose();
    }
    const Eigen::MatrixXd d_out = detail::output_gradients(spec.loss, logits, data.labels) * inv_n_;
    grad_ = detail::backward(spec_, layout_, params_, tape_, d_out, &d_pre_);
    for (std::size_t l = 0; l + 1 < tape_.pre.size(); ++l) {
        act_deriv_.push_back(detail::activation_derivative(spec.activation, tape_.pre[l]));
    }
}

ParamVector HessianOperator::apply(const ParamVector& v) const {
    layout_.check(v);
    const int L = spec_.num_layers();
    std::vector<Eigen::MatrixXd> r_in(static_cast<std::size_t>(L));
    Eigen::MatrixXd rz;
    for (int l = 0; l < L; ++l) {
        const auto ul = static_cast<std::size_t>(l);
        rz.noalias() = tape_.inputs[ul] * layout_.weights(v, l);
        if (l > 0) rz.noalias() += r_in[ul] * layout_.weights(params_, l);
        if (spec_.use_bias) rz.rowwise() += layout_.bias(v, l).transpose();
        if (l + 1 < L) r_in[ul + 1] = rz.cwiseProduct(act_deriv_[ul]);
    }

    Eigen::MatrixXd rdz;
    if (spec_.loss == LossKind::cross_entropy) {
        const Eigen::MatrixXd pr = probs_.cwiseProduct(rz);
        const Eigen::VectorXd s = pr.rowwise().sum();
        rdz = (pr.array() - probs_.array().colwise() * s.array()).matrix() * inv_n_;
    } else {
        rdz = rz * inv_n_;
    }

    ParamVector out = ParamVector::Zero(layout_.size());
    for (int l = L - 1; l >= 0; --l) {
        const auto ul = static_cast<std::size_t>(l);
        auto ow = layout_.weights(out, l);
        ow.noalias() = tape_.inputs[ul].transpose() * rdz;
        if (l > 0) ow.noalias() += r_in[ul].transpose() * d_pre_[ul];
        if (spec_.use_bias) layout_.bias(out, l) = rdz.colwise().sum().transpose();
        if (l > 0) {
            Eigen::MatrixXd rda = rdz * layout_.weights(params_, l).transpose();
            rda.noalias() += d_pre_[ul] * layout_.weights(v, l).transpose();
            rdz = rda.cwiseProduct(act_deriv_[ul - 1]);
        }
    }
    return out;
}

ParamVector hvp(const MlpSpec& spec, const ParamVector& params, const Dataset& data, const ParamVector& v) {
    if (!v.allFinite()) throw Error(ErrorKind::numerical, "hvp: direction has non-finite entries");
    return HessianOperator(spec, params, data).apply(v);
}

namespace {

void check_cap(Index p, Index cap) {
    if (p > cap) {
        throw Error(ErrorKind::capacity, "dense Hessian requested for P = " + std::to_string(p) +
                                             " parameters, above the cap of " + std::to_string(cap));
    }
}

}  // namespace

Eigen::MatrixXd exact_hessian(const MlpSpec& spec, const ParamVector& params, const Dataset& data, Index cap) {
    const ParamLayout layout(spec);
    check_cap(layout.size(), cap);
    const HessianOperator op(spec, params, data);
    const Index p = layout.size();
    Eigen::MatrixXd h(p, p);
    ParamVector e = ParamVector::Zero(p);
    for (Index j = 0; j < p; ++j) {
        e(j) = 1.0;
        h.col(j) = op.apply(e);
        e(j) = 0.0;
    }
    Eigen::MatrixXd sym = 0.5 * (h + h.transpose());
    if (!sym.allFinite()) throw Error(ErrorKind::numerical, "exact_hessian: non-finite entries");
    return sym;
}

Eigen::MatrixXd outer_product_hessian(const MlpSpec& spec, const ParamVector& params, const Dataset& data,
                                      Index cap) {
    const ParamLayout layout(spec);
    check_cap(layout.size(), cap);
    data.validate(spec.output_dim());
    const Index n = data.size();
    const int c = spec.output_dim();
    const Eigen::MatrixXd logits = logits_batch(spec, params, data.inputs);

    // d^2 l / df^2 = M M^T with M = diag(sqrt p) - p sqrt(p)^T for cross entropy.
    Eigen::MatrixXd probs(n, c);
    if (spec.loss == LossKind::cross_entropy) {
        for (Index i = 0; i < n; ++i) probs.row(i) = softmax(logits.row(i).transpose()).transpose();
    }
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(layout.size(), layout.size());
    const double inv_n = 1.0 / static_cast<double>(n);
    for (int k = 0; k < c; ++k) {
        Eigen::MatrixXd dirs = Eigen::MatrixXd::Zero(n, c);
        if (spec.loss == LossKind::cross_entropy) {
            for (Index i = 0; i < n; ++i) {
                const double s = std::sqrt(probs(i, k));
                dirs.row(i) = -s * probs.row(i);
                dirs(i, k) += s;
            }
        } else {
            dirs.col(k).setOnes();
        }
        const Eigen::MatrixXd g = per_sample_output_grads(spec, params, data.inputs, dirs);
        h.selfadjointView<Eigen::Lower>().rankUpdate(g, inv_n);
    }
    h.triangularView<Eigen::StrictlyUpper>() = h.transpose();
    return h;
}

Eigen::MatrixXd functional_hessian(const MlpSpec& spec, const ParamVector& params, const Dataset& data,
                                   Index cap) {
    return exact_hessian(spec, params, data, cap) - outer_product_hessian(spec, params, data, cap);
}

EigenPairs EigenPairs::leading(Index k) const {
    k = std::min(k, count());
    EigenPairs out;
    out.values = values.head(k);
    out.vectors = vectors.leftCols(k);
    out.converged.assign(converged.begin(), converged.begin() + k);
    return out;
}

namespace {

std::vector<Index> order_by_magnitude(const Eigen::VectorXd& values) {
    std::vector<Index> idx(static_cast<std::size_t>(values.size()));
    std::iota(idx.begin(), idx.end(), Index{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](Index a, Index b) { return std::abs(values(a)) > std::abs(values(b)); });
    return idx;
}

}  // namespace

EigenPairs dense_eigs(const Eigen::MatrixXd& sym) {
    if (sym.rows() != sym.cols()) throw Error(ErrorKind::dimension, "dense_eigs: matrix is not square");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    if (es.info() != Eigen::Success) throw Error(ErrorKind::numerical, "dense_eigs: eigensolver failed");
    const auto order = order_by_magnitude(es.eigenvalues());
    EigenPairs out;
    out.values.resize(sym.rows());
    out.vectors.resize(sym.rows(), sym.rows());
    for (std::size_t i = 0; i < order.size(); ++i) {
        out.values(static_cast<Index>(i)) = es.eigenvalues()(order[i]);
        out.vectors.col(static_cast<Index>(i)) = es.eigenvectors().col(order[i]);
    }
    out.converged.assign(order.size(), true);
    return out;
}

Eigen::VectorXd dense_eigenvalues(const Eigen::MatrixXd& sym) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) throw Error(ErrorKind::numerical, "dense_eigenvalues: eigensolver failed");
    const auto order = order_by_magnitude(es.eigenvalues());
    Eigen::VectorXd out(sym.rows());
    for (std::size_t i = 0; i < order.size(); ++i) out(static_cast<Index>(i)) = es.eigenvalues()(order[i]);
    return out;
}

EigenPairs top_k_eigs(const HvpOracle& oracle, Index dim, int k, const PowerIterationOptions& opts) {
    if (k < 0 || k > dim) throw Error(ErrorKind::invalid_argument, "top_k_eigs: need 0 <= k <= P");
    if (!(opts.tol > 0.0)) throw Error(ErrorKind::invalid_argument, "top_k_eigs: tol must be positive");
    EigenPairs out;
    out.values = Eigen::VectorXd::Zero(k);
    out.vectors = Eigen::MatrixXd::Zero(dim, k);
    out.converged.assign(static_cast<std::size_t>(k), false);

    for (int i = 0; i < k; ++i) {
        const auto prev = out.vectors.leftCols(i);
        const auto prev_vals = out.values.head(i);
        auto deflate = [&](const Eigen::VectorXd& v) {
            Eigen::VectorXd w = oracle(v);
            if (i > 0) w.noalias() -= prev * prev_vals.cwiseProduct(prev.transpose() * v);
            return w;
        };

        std::mt19937_64 rng(opts.seed + static_cast<std::uint64_t>(i));
        std::normal_distribution<double> normal;
        Eigen::VectorXd v(dim);
        for (Index j = 0; j < dim; ++j) v(j) = normal(rng);
        for (int pass = 0; pass < 2 && i > 0; ++pass) v.noalias() -= prev * (prev.transpose() * v);
        v.normalize();

        double rho_old = std::numeric_limits<double>::quiet_NaN();
        double rho = 0.0;
        bool converged = false;
        for (int it = 0; it < opts.max_iter; ++it) {
            Eigen::VectorXd w = deflate(v);
            rho = v.dot(w);
            if (i > 0) w.noalias() -= prev * (prev.transpose() * w);
            const double nrm = w.norm();
            if (nrm == 0.0) {
                rho = 0.0;
                converged = true;
                break;
            }
            v = w / nrm;
            if (std::isfinite(rho_old) &&
                std::abs(rho - rho_old) <= opts.tol * std::max(std::abs(rho), std::numeric_limits<double>::min())) {
                converged = true;
                break;
            }
            rho_old = rho;
        }
        if (i > 0) {
            v.noalias() -= prev * (prev.transpose() * v);
            v.normalize();
        }
        out.vectors.col(i) = v;
        out.values(i) = v.dot(oracle(v));
        out.converged[static_cast<std::size_t>(i)] = converged;
    }

    // Deflation already yields descending magnitudes; keep the contract explicit.
    const auto order = order_by_magnitude(out.values);
    EigenPairs sorted;
    sorted.values.resize(k);
    sorted.vectors.resize(dim, k);
    for (std::size_t i = 0; i < order.size(); ++i) {
        sorted.values(static_cast<Index>(i)) = out.values(order[i]);
        sorted.vectors.col(static_cast<Index>(i)) = out.vectors.col(order[i]);
        sorted.converged.push_back(out.converged[static_cast<std::size_t>(order[i])]);
    }
    return sorted;
}

Index energy_cutoff_k(std::span<const double> values, double epsilon) {
    if (values.empty() || epsilon >= 1.0) return 0;
    if (epsilon < 0.0) throw Error(ErrorKind::invalid_argument, "energy_cutoff_k: epsilon must be in [0, 1]");
    double total = 0.0;
    for (double v : values) total += v * v;
    if (total == 0.0) return 0;
    if (epsilon == 0.0) {
        return static_cast<Index>(std::count_if(values.begin(), values.end(), [](double v) { return v != 0.0; }));
    }
    const double target = (1.0 - epsilon) * total;
    double cum = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        cum += values[i] * values[i];
        if (cum >= target) return static_cast<Index>(i + 1);
    }
    return static_cast<Index>(values.size());
}

Index energy_cutoff_k(const Eigen::VectorXd& values, double epsilon) {
    return energy_cutoff_k(std::span<const double>(values.data(), static_cast<std::size_t>(values.size())), epsilon);
}

Index effective_rank(const Eigen::VectorXd& values, double lambda_frac) {
    if (!(lambda_frac > 0.0 && lambda_frac <= 1.0)) {
        throw Error(ErrorKind::invalid_argument, "effective_rank: lambda_frac must be in (0, 1]");
    }
    if (values.size() == 0) return 0;
    const double ref = values.cwiseAbs().maxCoeff();
    if (ref == 0.0) return 0;
    return (values.array().abs() >= lambda_frac * ref).count();
}

Index numerical_rank(const Eigen::VectorXd& values, Index dim) {
    if (values.size() == 0) return 0;
    const double ref = values.cwiseAbs().maxCoeff();
    if (ref == 0.0) return 0;
    const double tol = static_cast<double>(dim) * std::numeric_limits<double>::epsilon() * ref;
    return (values.array().abs() > tol).count();
}

void write_spectrum_csv(const std::string& path, const std::vector<std::pair<int, Eigen::VectorXd>>& spectra) {
    CsvTable table({"task_id", "index", "eigenvalue"});
    for (const auto& [task, values] : spectra) {
        for (Index i = 0; i < values.size(); ++i) {
            table.add_row({std::to_string(task), std::to_string(i + 1), format_double(values(i))});
        }
    }
    table.write(path);
}

}  // namespace clgeo
