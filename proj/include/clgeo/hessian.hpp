#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clgeo/mlp.hpp"

namespace clgeo {

// Exact Hessian-vector products by forward-over-reverse differentiation
// (R-operator). The forward and backward tapes at theta are built once, so
// repeated products only pay for the directional passes.
class HessianOperator {
public:
    HessianOperator(const MlpSpec& spec, const ParamVector& params, const Dataset& data);

    Index dim() const { return layout_.size(); }
    ParamVector apply(const ParamVector& v) const;
    const ParamVector& gradient() const { return grad_; }
    double loss() const { return loss_; }

private:
    MlpSpec spec_;
    ParamLayout layout_;
    ParamVector params_;
    detail::Tape tape_;
    Eigen::MatrixXd probs_;
    std::vector<Eigen::MatrixXd> d_pre_;
    std::vector<Eigen::MatrixXd> act_deriv_;
    ParamVector grad_;
    double loss_ = 0.0;
    double inv_n_ = 1.0;
};

ParamVector hvp(const MlpSpec& spec, const ParamVector& params, const Dataset& data, const ParamVector& v);

inline constexpr Index default_hessian_cap = 5000;

// Column j is hvp(e_j); the result is symmetrised.
Eigen::MatrixXd exact_hessian(const MlpSpec& spec, const ParamVector& params, const Dataset& data,
                              Index cap = default_hessian_cap);
// (1/n) sum_i J_i (d^2 l_i / df^2) J_i^T, assembled as G G^T / n.
Eigen::MatrixXd outer_product_hessian(const MlpSpec& spec, const ParamVector& params, const Dataset& data,
                                      Index cap = default_hessian_cap);
Eigen::MatrixXd functional_hessian(const MlpSpec& spec, const ParamVector& params, const Dataset& data,
                                   Index cap = default_hessian_cap);

struct EigenPairs {
    Eigen::VectorXd values;   // sorted by descending magnitude
    Eigen::MatrixXd vectors;  // P x k, orthonormal columns
    std::vector<bool> converged;

    Index count() const { return values.size(); }
    EigenPairs leading(Index k) const;
};

// Full symmetric eigendecomposition, sorted by |lambda| descending.
EigenPairs dense_eigs(const Eigen::MatrixXd& sym);
// Eigenvalues only, sorted by |lambda| descending.
Eigen::VectorXd dense_eigenvalues(const Eigen::MatrixXd& sym);

using HvpOracle = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

struct PowerIterationOptions {
    double tol = 1e-6;      // relative change of the Rayleigh quotient
    int max_iter = 1000;
    std::uint64_t seed = 0;  // pair i starts from a vector drawn with seed + i
};

// Deflated power iteration: pair i iterates v <- (H - sum_{j<i} l_j v_j v_j^T) v.
// Pairs that hit max_iter are returned with converged = false.
EigenPairs top_k_eigs(const HvpOracle& oracle, Index dim, int k, const PowerIterationOptions& opts = {});

// Smallest k whose leading squared eigenvalues carry (1 - epsilon) of the
// total spectral energy.
Index energy_cutoff_k(std::span<const double> values, double epsilon);
Index energy_cutoff_k(const Eigen::VectorXd& values, double epsilon);

// Count of |lambda_i| >= lambda_frac * |lambda_1|.
Index effective_rank(const Eigen::VectorXd& values, double lambda_frac);
// Count of |lambda_i| > dim * eps * |lambda_1|.
Index numerical_rank(const Eigen::VectorXd& values, Index dim);

// Spectrum dump: task_id,index,eigenvalue
void write_spectrum_csv(const std::string& path, const std::vector<std::pair<int, Eigen::VectorXd>>& spectra);

}  // namespace clgeo
