#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clgeo/forgetting.hpp"
#include "clgeo/hessian.hpp"
#include "clgeo/mlp.hpp"

namespace clgeo {

using LossFn = std::function<double(const ParamVector&)>;

struct PerturbPoint {
    double radius = 0.0;
    double score = 0.0;         // s(r)
    double numerator = 0.0;     // |L(theta + r v) - L(theta)|
    double denominator = 0.0;   // mean over random unit directions
    double denom_stderr = 0.0;
    double score_stderr = 0.0;  // first-order propagation of denom_stderr
    bool reliable = true;       // false when the denominator is below 1e-15
};

inline constexpr double perturb_denominator_floor = 1e-15;
inline constexpr int default_perturb_draws = 32;

// 25 log-spaced radii in [1e-3, 1e4].
std::vector<double> default_radii();
std::vector<double> log_radii(double lo, double hi, int count);

// The same n_random unit directions (standard normal, normalised) are reused
// at every radius; draw j is the j-th draw of one generator seeded with seed.
std::vector<PerturbPoint> perturbation_curve(const LossFn& loss, const ParamVector& params,
                                             const Eigen::VectorXd& direction, const std::vector<double>& radii,
                                             int n_random, std::uint64_t seed);

// Curve along the eig_index-th (1-based) Hessian eigenvector of the task loss.
std::vector<PerturbPoint> perturbation_score(const MlpSpec& spec, const ParamVector& params, const Dataset& data,
                                             int eig_index, const std::vector<double>& radii, int n_random,
                                             std::uint64_t seed, const PowerIterationOptions& power = {});

// First radius from which |s(r) - 1| < tol holds for `sustain` consecutive
// grid points.
std::optional<double> convergence_radius(const std::vector<PerturbPoint>& curve, double tol = 0.1,
                                         int sustain = 3);

void write_perturbation_csv(const std::string& path, int task_id, const std::vector<PerturbPoint>& curve);

// Block id per coordinate: the owning layer, or -1 for excluded (bias)
// coordinates.
std::vector<int> layer_blocks(const ParamLayout& layout, bool exclude_bias = true);

// 1 - mean |off-block entries| / mean |in-block entries|, over coordinates
// with a non-negative block id.
double block_diagonality(const Eigen::MatrixXd& m, const std::vector<int>& blocks);

// <A, B>_F / (|A|_F |B|_F).
double spectral_similarity(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

struct RankRow {
    int t = 0;
    Index rank = 0;
    double lambda_frac = 0.0;
    Index effective_rank = 0;
};

// Spectrum of (1/(t-1)) sum_{o<t} H_o for t = 2..T.
std::vector<RankRow> rank_evolution(const CheckpointSet& cs, const std::vector<double>& lambda_fracs);

void write_rank_csv(const std::string& path, const std::vector<RankRow>& rows);

}  // namespace clgeo
