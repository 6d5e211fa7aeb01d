#pragma once

// Continual-learning update rules: plain SGD with an optional gradient hook,
// and the memories that turn it into SGD-dagger (Hessian eigenvectors), OGD
// (output gradients), GPM (per-layer activation subspaces) and strict mask
// freezing.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "clgeo/hessian.hpp"
#include "clgeo/mlp.hpp"

namespace clgeo {

inline constexpr double memory_drop_tol = 1e-8;

struct ProjectionMemory {
    Eigen::MatrixXd basis;  // P x m, orthonormal columns
    Index cap = -1;         // -1: bounded only by P
    bool truncated = false;

    static ProjectionMemory empty(Index dim, Index cap = -1);
    Index dim() const { return basis.rows(); }
    Index size() const { return basis.cols(); }
};

// g - M (M^T g).
Eigen::VectorXd project_out(const Eigen::VectorXd& g, const ProjectionMemory& mem);

// Gram-Schmidt the candidate columns against mem (two passes), dropping
// columns whose residual norm falls under drop_tol relative to their original
// norm. Under a cap the accepted candidates with the largest priority are kept.
ProjectionMemory extend_memory(const ProjectionMemory& mem, const Eigen::MatrixXd& candidates,
                               std::span<const double> priority = {}, double drop_tol = memory_drop_tol);

struct GpmMemory {
    std::vector<Eigen::MatrixXd> bases;  // layer l: (input dim of l) x m_l
    std::vector<bool> saturated;

    static GpmMemory empty(const MlpSpec& spec);
    Index total_size() const;
};

// Per-layer G_l <- (I - B_l B_l^T) G_l on (input x output) gradient blocks.
std::vector<Eigen::MatrixXd> gpm_project(const std::vector<Eigen::MatrixXd>& grad_by_layer, const GpmMemory& mem);
// Same projection applied to a flat parameter-space gradient.
ParamVector gpm_project_flat(const ParamLayout& layout, const ParamVector& g, const GpmMemory& mem);

struct TaskMask {
    Eigen::VectorXd mask;                        // 1 = trainable, 0 = frozen
    std::vector<std::vector<Index>> index_sets;  // I_1 .. I_t
};

TaskMask mask_freeze_allocate(Index dim, int task, double fraction_per_task, std::uint64_t seed);
ParamVector mask_apply(const ParamVector& g, const TaskMask& mask);

struct TrainConfig {
    double learning_rate = 0.01;
    int epochs = 1;
    int batch_size = 10;
    std::uint64_t seed = 0;
    std::vector<int> decay_epochs;  // lr *= decay_factor after each listed epoch
    double decay_factor = 0.1;

    void validate() const;
    double lr_at_epoch(int epoch) const;
};

// Transforms a batch gradient in place before the update is applied.
using UpdateHook = std::function<void(ParamVector&)>;

struct StepTrace {
    std::vector<ParamVector> updates;  // applied deltas, in order
    std::vector<double> batch_losses;
};

struct TrainResult {
    ParamVector params;
    StepTrace trace;
    Index steps = 0;
};

inline constexpr double divergence_loss = 1e6;

TrainResult train_sgd(const MlpSpec& spec, const ParamVector& params, const Dataset& data, const TrainConfig& cfg,
                      const UpdateHook& hook = {}, bool record_trace = false);

struct EnergyFraction {
    double epsilon = 0.01;
};
struct FixedK {
    int k = 10;
};
using EigenBudget = std::variant<EnergyFraction, FixedK>;

struct SgdDaggerOptions {
    Index hessian_cap = default_hessian_cap;
    PowerIterationOptions power{};
};

// Appends the selected eigenvectors of an already computed spectrum.
ProjectionMemory sgd_dagger_extend(const ProjectionMemory& mem, const EigenPairs& eig, const EigenBudget& budget);

// Energy-fraction mode needs the full spectrum and uses the dense Hessian;
// fixed-k mode runs deflated power iteration on Hessian-vector products.
ProjectionMemory sgd_dagger_after_task(const MlpSpec& spec, const ParamVector& params_t, const Dataset& data_t,
                                       const ProjectionMemory& mem, const EigenBudget& budget,
                                       const SgdDaggerOptions& opts = {});

enum class OgdVariant { all, gtl };

// Seeded subset of at most sample_cap samples without replacement.
std::vector<Index> sample_subset(Index n, Index cap, std::uint64_t seed);

// Stored vectors are d f^c / d theta at the task solution. epsilon = 0 keeps
// every independent direction; epsilon > 0 keeps the leading left singular
// vectors (after projecting out mem) that carry (1 - epsilon) of the energy.
ProjectionMemory ogd_after_task(const MlpSpec& spec, const ParamVector& params_t, const Dataset& data_t,
                                const ProjectionMemory& mem, OgdVariant variant, Index sample_cap,
                                std::uint64_t seed, double epsilon = 0.0);

// Raw (unorthonormalised) output-gradient vectors OGD would store.
Eigen::MatrixXd ogd_gradient_vectors(const MlpSpec& spec, const ParamVector& params, const Dataset& data,
                                     OgdVariant variant);

GpmMemory gpm_after_task(const MlpSpec& spec, const ParamVector& params_t, const Dataset& data_t,
                         const GpmMemory& mem, double epsilon, Index sample_cap, std::uint64_t seed);

void write_memory_csv(const std::string& path, const Eigen::MatrixXd& basis);

}  // namespace clgeo
