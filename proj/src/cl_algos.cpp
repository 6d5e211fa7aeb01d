#include "clgeo/cl_algos.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "clgeo/csv.hpp"
#include "clgeo/error.hpp"

namespace clgeo {

ProjectionMemory ProjectionMemory::empty(Index dim, Index cap) {
    ProjectionMemory m;
    m.basis.resize(dim, 0);
    m.cap = cap;
    return m;
}

Eigen::VectorXd project_out(const Eigen::VectorXd& g, const ProjectionMemory& mem) {
    if (mem.size() == 0) return g;
    if (g.size() != mem.dim())
        throw Error(ErrorKind::dimension, "project_out: vector has length " + std::to_string(g.size()) +
                                              ", memory dimension is " + std::to_string(mem.dim()));
    return g - mem.basis * (mem.basis.transpose() * g);
}

ProjectionMemory extend_memory(const ProjectionMemory& mem, const Eigen::MatrixXd& candidates,
                               std::span<const double> priority, double drop_tol) {
    if (candidates.rows() != mem.dim())
        throw Error(ErrorKind::dimension, "extend_memory: candidates have " + std::to_string(candidates.rows()) +
                                              " rows, memory dimension is " + std::to_string(mem.dim()));
    if (!priority.empty() && static_cast<Index>(priority.size()) != candidates.cols())
        throw Error(ErrorKind::dimension, "extend_memory: priority length does not match candidate count");

    std::vector<Index> order(static_cast<std::size_t>(candidates.cols()));
    std::iota(order.begin(), order.end(), Index{0});
    if (!priority.empty()) {
        std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
            return std::abs(priority[static_cast<std::size_t>(a)]) > std::abs(priority[static_cast<std::size_t>(b)]);
        });
    }

    // Normalise, then block-project against the existing basis twice.
    Eigen::MatrixXd c(candidates.rows(), candidates.cols());
    std::vector<bool> usable(order.size(), true);
    for (std::size_t j = 0; j < order.size(); ++j) {
        const double n = candidates.col(order[j]).norm();
        usable[j] = n > 0.0 && std::isfinite(n);
        c.col(static_cast<Index>(j)) = usable[j] ? Eigen::VectorXd(candidates.col(order[j]) / n)
                                                 : Eigen::VectorXd::Zero(candidates.rows());
    }
    if (mem.size() > 0) {
        for (int pass = 0; pass < 2; ++pass) c -= mem.basis * (mem.basis.transpose() * c);
    }

    std::vector<Eigen::VectorXd> accepted;
    for (Index j = 0; j < c.cols(); ++j) {
        if (!usable[static_cast<std::size_t>(j)]) continue;
        Eigen::VectorXd v = c.col(j);
        for (int pass = 0; pass < 2; ++pass)
            for (const auto& a : accepted) v -= a.dot(v) * a;
        const double r = v.norm();
        if (r < drop_tol) continue;
        accepted.push_back(v / r);
    }

    ProjectionMemory out = mem;
    Index room = static_cast<Index>(accepted.size());
    const Index limit = mem.cap >= 0 ? std::min(mem.cap, mem.dim()) : mem.dim();
    if (mem.size() + room > limit) {
        room = std::max<Index>(0, limit - mem.size());
        out.truncated = true;
    }
    out.basis.conservativeResize(Eigen::NoChange, mem.size() + room);
    for (Index j = 0; j < room; ++j) out.basis.col(mem.size() + j) = accepted[static_cast<std::size_t>(j)];
    return out;
}

GpmMemory GpmMemory::empty(const MlpSpec& spec) {
    GpmMemory m;
    for (int l = 0; l < spec.num_layers(); ++l) {
        m.bases.emplace_back(spec.layer_widths[static_cast<std::size_t>(l)], 0);
        m.saturated.push_back(false);
    }
    return m;
}

Index GpmMemory::total_size() const {
    Index s = 0;
    for (const auto& b : bases) s += b.cols();
    return s;
}

std::vector<Eigen::MatrixXd> gpm_project(const std::vector<Eigen::MatrixXd>& grad_by_layer, const GpmMemory& mem) {
    if (grad_by_layer.size() != mem.bases.size())
        throw Error(ErrorKind::dimension, "gpm_project: " + std::to_string(grad_by_layer.size()) +
                                              " gradient blocks for " + std::to_string(mem.bases.size()) + " layers");
    std::vector<Eigen::MatrixXd> out;
    out.reserve(grad_by_layer.size());
    for (std::size_t l = 0; l < grad_by_layer.size(); ++l) {
        const auto& b = mem.bases[l];
        const auto& g = grad_by_layer[l];
        if (g.rows() != b.rows())
            throw Error(ErrorKind::dimension, "gpm_project: layer " + std::to_string(l) + " block has " +
                                                  std::to_string(g.rows()) + " rows, basis has " +
                                                  std::to_string(b.rows()));
        out.push_back(b.cols() == 0 ? g : Eigen::MatrixXd(g - b * (b.transpose() * g)));
    }
    return out;
}

ParamVector gpm_project_flat(const ParamLayout& layout, const ParamVector& g, const GpmMemory& mem) {
    layout.check(g);
    if (layout.layers().size() != mem.bases.size())
        throw Error(ErrorKind::dimension, "gpm_project_flat: memory has wrong layer count");
    ParamVector out = g;
    for (const auto& s : layout.layers()) {
        const auto& b = mem.bases[static_cast<std::size_t>(s.layer)];
        if (b.cols() == 0) continue;
        auto w = layout.weights(out, s.layer);
        w -= b * (b.transpose() * w);
    }
    return out;
}

TaskMask mask_freeze_allocate(Index dim, int task, double fraction_per_task, std::uint64_t seed) {
    if (dim <= 0 || task < 1)
        throw Error(ErrorKind::invalid_argument, "mask_freeze_allocate: need dim > 0 and task >= 1");
    if (!(fraction_per_task > 0.0 && fraction_per_task <= 1.0))
        throw Error(ErrorKind::invalid_argument, "mask_freeze_allocate: fraction must lie in (0, 1]");
    const auto chunk = static_cast<Index>(std::floor(fraction_per_task * static_cast<double>(dim)));
    if (chunk == 0) throw Error(ErrorKind::invalid_argument, "mask_freeze_allocate: fraction gives empty sets");
    if (chunk * task > dim)
        throw Error(ErrorKind::capacity, "mask_freeze_allocate: task " + std::to_string(task) + " needs " +
                                             std::to_string(chunk) + " coordinates, remaining capacity is " +
                                             std::to_string(std::max<Index>(0, dim - chunk * (task - 1))));

    std::vector<Index> perm(static_cast<std::size_t>(dim));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);

    TaskMask m;
    m.mask = Eigen::VectorXd::Ones(dim);
    for (int t = 0; t < task; ++t) {
        std::vector<Index> set(perm.begin() + t * chunk, perm.begin() + (t + 1) * chunk);
        std::sort(set.begin(), set.end());
        if (t + 1 < task)
            for (Index i : set) m.mask[i] = 0.0;
        m.index_sets.push_back(std::move(set));
    }
    return m;
}

ParamVector mask_apply(const ParamVector& g, const TaskMask& mask) {
    if (g.size() != mask.mask.size())
        throw Error(ErrorKind::dimension, "mask_apply: gradient and mask lengths differ");
    return g.cwiseProduct(mask.mask);
}

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw Error(ErrorKind::config, "train: learning_rate must be finite and >= 0");
    if (epochs < 1) throw Error(ErrorKind::config, "train: epochs must be positive");
    if (batch_size < 1) throw Error(ErrorKind::config, "train: batch_size must be positive");
    if (!(decay_factor > 0.0)) throw Error(ErrorKind::config, "train: decay factor must be positive");
    for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
        if (decay_epochs[i] < 1) throw Error(ErrorKind::config, "train: decay epochs must be positive");
        if (i > 0 && decay_epochs[i] <= decay_epochs[i - 1])
            throw Error(ErrorKind::config, "train: decay epochs must be strictly increasing");
    }
}

double TrainConfig::lr_at_epoch(int epoch) const {
    double lr = learning_rate;
    for (int e : decay_epochs)
        if (epoch >= e) lr *= decay_factor;
    return lr;
}

TrainResult train_sgd(const MlpSpec& spec, const ParamVector& params, const Dataset& data, const TrainConfig& cfg,
                      const UpdateHook& hook, bool record_trace) {
    cfg.validate();
    data.validate(spec.output_dim());
    ParamLayout(spec).check(params);
    const Index n = data.size();
    if (n == 0) throw Error(ErrorKind::invalid_argument, "train: empty dataset");

    TrainResult res;
    res.params = params;
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::mt19937_64 rng(cfg.seed);

    Eigen::MatrixXd xb;
    std::vector<int> yb;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.lr_at_epoch(epoch);
        std::shuffle(order.begin(), order.end(), rng);
        for (Index start = 0; start < n; start += cfg.batch_size) {
            const Index len = std::min<Index>(cfg.batch_size, n - start);
            xb.resize(len, data.inputs.cols());
            yb.resize(static_cast<std::size_t>(len));
            for (Index i = 0; i < len; ++i) {
                const Index r = order[static_cast<std::size_t>(start + i)];
                xb.row(i) = data.inputs.row(r);
                yb[static_cast<std::size_t>(i)] = data.labels[static_cast<std::size_t>(r)];
            }
            LossGrad lg = loss_and_grad(spec, res.params, xb, yb);
            if (!std::isfinite(lg.loss) || lg.loss > divergence_loss)
                throw Error(ErrorKind::numerical, "train: diverged at epoch " + std::to_string(epoch) + " step " +
                                                      std::to_string(res.steps) + " (batch loss " +
                                                      format_double(lg.loss) + ", lr " + format_double(lr) + ")");
            if (hook) hook(lg.grad);
            ParamVector delta = -lr * lg.grad;
            res.params += delta;
            ++res.steps;
            if (record_trace) {
                res.trace.updates.push_back(std::move(delta));
                res.trace.batch_losses.push_back(lg.loss);
            }
        }
    }
    return res;
}

ProjectionMemory sgd_dagger_extend(const ProjectionMemory& mem, const EigenPairs& eig, const EigenBudget& budget) {
    Index k = 0;
    if (const auto* e = std::get_if<EnergyFraction>(&budget)) {
        k = energy_cutoff_k(eig.values, e->epsilon);
    } else {
        k = std::min<Index>(std::get<FixedK>(budget).k, eig.count());
    }
    const EigenPairs lead = eig.leading(k);
    std::vector<double> prio(lead.values.data(), lead.values.data() + lead.values.size());
    return extend_memory(mem, lead.vectors, prio);
}

ProjectionMemory sgd_dagger_after_task(const MlpSpec& spec, const ParamVector& params_t, const Dataset& data_t,
                                       const ProjectionMemory& mem, const EigenBudget& budget,
                                       const SgdDaggerOptions& opts) {
    if (std::holds_alternative<EnergyFraction>(budget)) {
        const double eps = std::get<EnergyFraction>(budget).epsilon;
        if (!(eps >= 0.0 && eps <= 1.0))
            throw Error(ErrorKind::invalid_argument, "sgd_dagger: epsilon must lie in [0, 1]");
        return sgd_dagger_extend(mem, dense_eigs(exact_hessian(spec, params_t, data_t, opts.hessian_cap)), budget);
    }
    const int k = std::get<FixedK>(budget).k;
    if (k < 0) throw Error(ErrorKind::invalid_argument, "sgd_dagger: k must be non-negative");
    HessianOperator op(spec, params_t, data_t);
    const EigenPairs eig = top_k_eigs([&op](const Eigen::VectorXd& v) { return op.apply(v); }, op.dim(), k,
                                      opts.power);
    return sgd_dagger_extend(mem, eig, budget);
}

std::vector<Index> sample_subset(Index n, Index cap, std::uint64_t seed) {
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index{0});
    if (cap < 0 || cap >= n) return idx;
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(cap));
    std::sort(idx.begin(), idx.end());
    return idx;
}

Eigen::MatrixXd ogd_gradient_vectors(const MlpSpec& spec, const ParamVector& params, const Dataset& data,
                                     OgdVariant variant) {
    const Index n = data.size();
    const int c = spec.output_dim();
    if (variant == OgdVariant::gtl) {
        Eigen::MatrixXd dirs = Eigen::MatrixXd::Zero(n, c);
        for (Index i = 0; i < n; ++i) dirs(i, data.labels[static_cast<std::size_t>(i)]) = 1.0;
        return per_sample_output_grads(spec, params, data.inputs, dirs);
    }
    Eigen::MatrixXd out(ParamLayout(spec).size(), n * c);
    for (int k = 0; k < c; ++k) {
        Eigen::MatrixXd dirs = Eigen::MatrixXd::Zero(n, c);
        dirs.col(k).setOnes();
        out.middleCols(Index(k) * n, n) = per_sample_output_grads(spec, params, data.inputs, dirs);
    }
    return out;
}

namespace {

// Leading left singular vectors of x carrying (1 - epsilon) of its squared
// singular-value energy; epsilon = 0 keeps the numerically nonzero ones.
std::pair<Eigen::MatrixXd, std::vector<double>> energy_subspace(const Eigen::MatrixXd& x, double epsilon,
                                                                double scale) {
    if (x.cols() == 0 || x.rows() == 0) return {Eigen::MatrixXd(x.rows(), 0), {}};
    Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinU);
    const Eigen::VectorXd& s = svd.singularValues();
    Index nz = 0;
    while (nz < s.size() && s[nz] > memory_drop_tol * scale) ++nz;
    const Index k = std::min(nz, energy_cutoff_k(Eigen::VectorXd(s.head(nz)), epsilon));
    return {svd.matrixU().leftCols(k), std::vector<double>(s.data(), s.data() + k)};
}

}  // namespace

ProjectionMemory ogd_after_task(const MlpSpec& spec, const ParamVector& params_t, const Dataset& data_t,
                                const ProjectionMemory& mem, OgdVariant variant, Index sample_cap,
                                std::uint64_t seed, double epsilon) {
    if (!(epsilon >= 0.0 && epsilon <= 1.0))
        throw Error(ErrorKind::invalid_argument, "ogd: epsilon must lie in [0, 1]");
    const auto rows = sample_subset(data_t.size(), sample_cap, seed);
    const Eigen::MatrixXd g = ogd_gradient_vectors(spec, params_t, data_t.subset(rows), variant);
    if (epsilon == 0.0) return extend_memory(mem, g);
    Eigen::MatrixXd resid = g;
    if (mem.size() > 0) resid -= mem.basis * (mem.basis.transpose() * g);
    auto [u, s] = energy_subspace(resid, epsilon, g.norm());
    return extend_memory(mem, u, s);
}

GpmMemory gpm_after_task(const MlpSpec& spec, const ParamVector& params_t, const Dataset& data_t,
                         const GpmMemory& mem, double epsilon, Index sample_cap, std::uint64_t seed) {
    spec.require_gpm_compatible();
    if (!(epsilon >= 0.0 && epsilon <= 1.0))
        throw Error(ErrorKind::invalid_argument, "gpm: epsilon must lie in [0, 1]");
    if (mem.bases.size() != static_cast<std::size_t>(spec.num_layers()))
        throw Error(ErrorKind::dimension, "gpm: memory has wrong layer count");
    const auto rows = sample_subset(data_t.size(), sample_cap, seed);
    const Dataset sub = data_t.subset(rows);
    const auto acts = layer_inputs_batch(spec, params_t, sub.inputs);

    GpmMemory out = mem;
    for (std::size_t l = 0; l < acts.size(); ++l) {
        const Eigen::MatrixXd x = acts[l].transpose();  // in_dim x n
        const Eigen::MatrixXd& b = mem.bases[l];
        Eigen::MatrixXd resid = x;
        if (b.cols() > 0) resid -= b * (b.transpose() * x);
        auto [u, s] = energy_subspace(resid, epsilon, x.norm());
        ProjectionMemory layer_mem;
        layer_mem.basis = b;
        layer_mem.cap = b.rows();
        layer_mem = extend_memory(layer_mem, u, s);
        out.bases[l] = std::move(layer_mem.basis);
        out.saturated[l] = out.saturated[l] || layer_mem.truncated || out.bases[l].cols() == out.bases[l].rows();
    }
    return out;
}

void write_memory_csv(const std::string& path, const Eigen::MatrixXd& basis) {
    std::vector<std::string> header{"row"};
    for (Index j = 0; j < basis.cols(); ++j) header.push_back("v" + std::to_string(j));
    CsvTable t(header);
    for (Index i = 0; i < basis.rows(); ++i) {
        std::vector<std::string> r{std::to_string(i)};
        for (Index j = 0; j < basis.cols(); ++j) r.push_back(format_double(basis(i, j)));
        t.add_row(std::move(r));
    }
    t.write(path);
}

}  // namespace clgeo
