#include "clgeo/harness.hpp"

#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "clgeo/checkpoint.hpp"
#include "clgeo/csv.hpp"
#include "clgeo/error.hpp"
#include "clgeo/hash.hpp"
#include "clgeo/landscape.hpp"
#include "json_fields.hpp"

namespace clgeo {

using nlohmann::json;
namespace fs = std::filesystem;
using detail::FieldReader;
using detail::read_positive;

TrainConfig TrainSchedule::for_task(int t, std::uint64_t seed) const {
    TrainConfig c;
    const PhaseTrain& p = t == 1 ? first : rest;
    c.learning_rate = p.lr;
    c.epochs = p.epochs;
    c.batch_size = batch_size;
    c.decay_epochs = decay_epochs;
    c.decay_factor = decay_factor;
    c.seed = seed * 1000003ULL + static_cast<std::uint64_t>(t);
    return c;
}

namespace {

const char* activation_name(Activation a) { return a == Activation::relu ? "relu" : "linear"; }
const char* loss_name(LossKind l) { return l == LossKind::cross_entropy ? "cross_entropy" : "mse"; }

}  // namespace

json ExperimentConfig::to_json() const {
    json j;
    j["name"] = name;
    json d;
    d["kind"] = dataset.kind;
    d["source"] = dataset.source.kind;
    d["train_images"] = dataset.source.train_images;
    d["train_labels"] = dataset.source.train_labels;
    d["test_images"] = dataset.source.test_images;
    d["test_labels"] = dataset.source.test_labels;
    d["allow_synthetic_fallback"] = dataset.source.allow_synthetic_fallback;
    d["angles"] = dataset.angles;
    d["downscale"] = dataset.downscale;
    d["n_train"] = dataset.n_train;
    d["n_test"] = dataset.n_test;
    d["n_per_class"] = dataset.n_per_class;
    d["classes_per_task"] = dataset.classes_per_task;
    d["data_seed"] = dataset.data_seed;
    j["dataset"] = d;
    j["model"] = {{"hidden", model.hidden},
                  {"activation", activation_name(model.activation)},
                  {"use_bias", model.use_bias},
                  {"loss", loss_name(model.loss)}};
    json a = {{"name", algorithm.name},
              {"epsilon", algorithm.epsilon},
              {"sample_cap", algorithm.sample_cap},
              {"hessian_samples", algorithm.hessian_samples},
              {"memory_cap", algorithm.memory_cap},
              {"mask_fraction", algorithm.mask_fraction}};
    a["k"] = algorithm.k ? json(*algorithm.k) : json(nullptr);
    j["algorithm"] = a;
    j["train"] = {{"lr", {train.first.lr, train.rest.lr}},
                  {"epochs", {train.first.epochs, train.rest.epochs}},
                  {"batch_size", train.batch_size},
                  {"decay_epochs", train.decay_epochs},
                  {"decay_factor", train.decay_factor}};
    const auto& g = diagnostics;
    j["diagnostics"] = {{"hessians", g.hessians},
                        {"hessian_split", g.hessian_split},
                        {"hessian_samples", g.hessian_samples},
                        {"taylor", g.taylor},
                        {"low_rank", g.low_rank},
                        {"vnc", g.vnc},
                        {"landscape", g.landscape},
                        {"rank_fracs", g.rank_fracs},
                        {"spectra", g.spectra},
                        {"perturb", g.perturb},
                        {"perturb_eig_index", g.perturb_eig_index},
                        {"perturb_draws", g.perturb_draws},
                        {"dump_memory", g.dump_memory},
                        {"record_trace", g.record_trace}};
    j["seeds"] = seeds;
    j["output_dir"] = output_dir;
    return j;
}

std::string ExperimentConfig::canonical() const {
    json j = to_json();
    j.erase("output_dir");
    return j.dump();
}

std::uint64_t ExperimentConfig::hash() const { return fnv1a64(canonical()); }

MlpSpec ExperimentConfig::mlp_spec(int input_dim, int num_classes) const {
    MlpSpec s;
    s.layer_widths.push_back(input_dim);
    for (int h : model.hidden) s.layer_widths.push_back(h);
    s.layer_widths.push_back(num_classes);
    s.activation = model.activation;
    s.use_bias = model.use_bias;
    s.loss = model.loss;
    s.validate();
    return s;
}

ExperimentConfig parse_config(const json& j) {
    ExperimentConfig c;
    std::vector<std::string> errors;
    {
        FieldReader top(j, "config", errors);
        top.read("name", c.name);
        top.read("output_dir", c.output_dir);

        if (top.has("dataset")) {
            FieldReader r(top.raw("dataset"), "dataset", errors);
            auto& d = c.dataset;
            r.read("kind", d.kind);
            if (d.kind != "rotated" && d.kind != "toy" && d.kind != "split")
                r.fail("kind", "must be rotated, toy or split");
            r.read("source", d.source.kind);
            if (d.source.kind != "idx" && d.source.kind != "synthetic") r.fail("source", "must be idx or synthetic");
            r.read("train_images", d.source.train_images);
            r.read("train_labels", d.source.train_labels);
            r.read("test_images", d.source.test_images);
            r.read("test_labels", d.source.test_labels);
            r.read("allow_synthetic_fallback", d.source.allow_synthetic_fallback);
            r.read("angles", d.angles);
            if (d.angles.empty()) r.fail("angles", "must not be empty");
            read_positive(r, "downscale", d.downscale);
            read_positive(r, "n_train", d.n_train);
            read_positive(r, "n_test", d.n_test);
            read_positive(r, "n_per_class", d.n_per_class);
            if (d.n_per_class < 10) r.fail("n_per_class", "must be at least 10");
            read_positive(r, "classes_per_task", d.classes_per_task);
            r.read("data_seed", d.data_seed);
        }
        if (top.has("model")) {
            FieldReader r(top.raw("model"), "model", errors);
            r.read("hidden", c.model.hidden);
            for (int h : c.model.hidden)
                if (h <= 0) r.fail("hidden", "widths must be positive");
            std::string act = activation_name(c.model.activation), loss = loss_name(c.model.loss);
            r.read("activation", act);
            if (act == "relu")
                c.model.activation = Activation::relu;
            else if (act == "linear")
                c.model.activation = Activation::linear;
            else
                r.fail("activation", "must be relu or linear");
            r.read("use_bias", c.model.use_bias);
            r.read("loss", loss);
            if (loss == "cross_entropy")
                c.model.loss = LossKind::cross_entropy;
            else if (loss == "mse")
                c.model.loss = LossKind::mse;
            else
                r.fail("loss", "must be cross_entropy or mse");
        }
        if (top.has("algorithm")) {
            FieldReader r(top.raw("algorithm"), "algorithm", errors);
            auto& a = c.algorithm;
            r.read("name", a.name);
            static const std::set<std::string> names{"sgd", "sgd_dagger", "ogd", "ogd_gtl", "gpm", "mask"};
            if (!names.count(a.name)) r.fail("name", "must be one of sgd, sgd_dagger, ogd, ogd_gtl, gpm, mask");
            r.read_number("epsilon", a.epsilon);
            if (!(a.epsilon >= 0.0 && a.epsilon <= 1.0)) r.fail("epsilon", "must lie in [0, 1]");
            if (r.has("k")) {
                long long k = 0;
                r.read_int("k", k);
                if (k < 0) r.fail("k", "must be non-negative");
                a.k = static_cast<int>(k);
            }
            read_positive(r, "sample_cap", a.sample_cap);
            read_positive(r, "hessian_samples", a.hessian_samples);
            long long cap = a.memory_cap;
            r.read_int("memory_cap", cap);
            if (cap < -1 || cap == 0) r.fail("memory_cap", "must be -1 (unbounded) or positive");
            a.memory_cap = cap;
            r.read_number("mask_fraction", a.mask_fraction);
            if (!(a.mask_fraction > 0.0 && a.mask_fraction <= 1.0)) r.fail("mask_fraction", "must lie in (0, 1]");
        }
        if (top.has("train")) {
            FieldReader r(top.raw("train"), "train", errors);
            auto& t = c.train;
            if (r.has("lr")) {
                const json& v = r.raw("lr");
                if (v.is_number()) {
                    t.first.lr = t.rest.lr = v.get<double>();
                } else if (v.is_array() && v.size() == 2 && v[0].is_number() && v[1].is_number()) {
                    t.first.lr = v[0].get<double>();
                    t.rest.lr = v[1].get<double>();
                } else {
                    r.fail("lr", "must be a number or [first_task, later_tasks]");
                }
                if (!(t.first.lr >= 0.0 && t.rest.lr >= 0.0)) r.fail("lr", "must be non-negative");
            }
            if (r.has("epochs")) {
                const json& v = r.raw("epochs");
                if (v.is_number_integer()) {
                    t.first.epochs = t.rest.epochs = v.get<int>();
                } else if (v.is_array() && v.size() == 2 && v[0].is_number_integer() && v[1].is_number_integer()) {
                    t.first.epochs = v[0].get<int>();
                    t.rest.epochs = v[1].get<int>();
                } else {
                    r.fail("epochs", "must be an integer or [first_task, later_tasks]");
                }
                if (t.first.epochs <= 0 || t.rest.epochs <= 0) r.fail("epochs", "must be positive");
            }
            read_positive(r, "batch_size", t.batch_size);
            r.read("decay_epochs", t.decay_epochs);
            for (std::size_t i = 0; i < t.decay_epochs.size(); ++i)
                if (t.decay_epochs[i] < 1 || (i > 0 && t.decay_epochs[i] <= t.decay_epochs[i - 1]))
                    r.fail("decay_epochs", "must be positive and strictly increasing");
            r.read_number("decay_factor", t.decay_factor);
            if (!(t.decay_factor > 0.0)) r.fail("decay_factor", "must be positive");
        }
        if (top.has("diagnostics")) {
            FieldReader r(top.raw("diagnostics"), "diagnostics", errors);
            auto& g = c.diagnostics;
            r.read("hessians", g.hessians);
            r.read("hessian_split", g.hessian_split);
            if (g.hessian_split != "test" && g.hessian_split != "train")
                r.fail("hessian_split", "must be test or train");
            read_positive(r, "hessian_samples", g.hessian_samples);
            r.read("taylor", g.taylor);
            r.read("low_rank", g.low_rank);
            for (int k : g.low_rank)
                if (k <= 0) r.fail("low_rank", "ranks must be positive");
            r.read("vnc", g.vnc);
            r.read("landscape", g.landscape);
            r.read("rank_fracs", g.rank_fracs);
            for (double f : g.rank_fracs)
                if (!(f > 0.0 && f <= 1.0)) r.fail("rank_fracs", "thresholds must lie in (0, 1]");
            r.read("spectra", g.spectra);
            r.read("perturb", g.perturb);
            read_positive(r, "perturb_eig_index", g.perturb_eig_index);
            read_positive(r, "perturb_draws", g.perturb_draws);
            if (g.perturb_draws < 2) r.fail("perturb_draws", "must be at least 2");
            r.read("dump_memory", g.dump_memory);
            r.read("record_trace", g.record_trace);
        }
        if (top.has("seeds")) {
            top.read("seeds", c.seeds);
            if (c.seeds.empty()) top.fail("seeds", "must not be empty");
        }
    }
    const bool gpm = c.algorithm.name == "gpm";
    if (gpm && c.model.use_bias) errors.push_back("model.use_bias: gpm requires a bias-free network");
    if ((c.diagnostics.taylor || c.diagnostics.vnc || c.diagnostics.landscape || !c.diagnostics.rank_fracs.empty()) &&
        !c.diagnostics.hessians)
        errors.push_back("diagnostics.hessians: must be true for taylor, vnc, landscape or rank diagnostics");
    if (!errors.empty()) {
        std::string msg = "invalid config (" + std::to_string(errors.size()) + " problem" +
                          (errors.size() > 1 ? "s" : "") + "):";
        for (const auto& e : errors) msg += "\n  " + e;
        throw Error(ErrorKind::config, msg);
    }
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::config, path + ": " + e.what());
    }
    return parse_config(j);
}

TaskSequence build_tasks(const ExperimentConfig& cfg) {
    const auto& d = cfg.dataset;
    if (d.kind == "toy") return toy_geometric(d.data_seed, d.n_per_class);
    if (d.kind == "rotated") {
        RotatedConfig rc;
        rc.source = d.source;
        rc.angles = d.angles;
        rc.downscale = d.downscale;
        rc.n_train = d.n_train;
        rc.n_test = d.n_test;
        rc.seed = d.data_seed;
        return rotated_digits(rc);
    }
    const DigitPair digits = load_digits(d.source, d.n_train, d.n_test, d.data_seed);
    DigitPair sub;
    sub.synthetic = digits.synthetic;
    sub.train = digits.train.subset(sample_subset(digits.train.size(), d.n_train, d.data_seed));
    sub.test = digits.test.subset(sample_subset(digits.test.size(), d.n_test, d.data_seed + 1));
    return split_by_class(sub, d.classes_per_task, d.downscale);
}

ForgettingLedger evaluate_ledger(const MlpSpec& spec, const TaskSequence& seq, const std::vector<ParamVector>& thetas) {
    const int T = seq.size();
    if (static_cast<int>(thetas.size()) != T + 1)
        throw Error(ErrorKind::invalid_argument, "ledger needs theta_0 .. theta_T");
    ForgettingLedger led(T);
    for (int t = 1; t <= T; ++t)
        for (int o = 1; o <= t; ++o) {
            const Dataset& test = seq.tasks[static_cast<std::size_t>(o - 1)].test;
            led.set_loss(t, o, mean_loss(spec, thetas[static_cast<std::size_t>(t)], test));
            led.set_acc(t, o, accuracy(spec, thetas[static_cast<std::size_t>(t)], test));
        }
    return led;
}

namespace {

Dataset curvature_data(const ExperimentConfig& cfg, const TaskSequence& seq, int o) {
    const TaskData& td = seq.tasks[static_cast<std::size_t>(o - 1)];
    const Dataset& base = cfg.diagnostics.hessian_split == "test" ? td.test : td.train;
    const auto rows = sample_subset(base.size(), cfg.diagnostics.hessian_samples,
                                    cfg.dataset.data_seed + static_cast<std::uint64_t>(o));
    return base.subset(rows);
}

}  // namespace

CheckpointSet compute_curvature(const ExperimentConfig& cfg, const TaskSequence& seq,
                                const std::vector<ParamVector>& thetas, bool dense_hessian) {
    const MlpSpec spec = cfg.mlp_spec(seq.input_dim, seq.num_classes);
    CheckpointSet cs;
    cs.thetas = thetas;
    for (int o = 1; o <= seq.size(); ++o) {
        const Dataset data = curvature_data(cfg, seq, o);
        TaskCurvature c;
        c.gradient = mean_grad(spec, thetas[static_cast<std::size_t>(o)], data);
        if (dense_hessian) c.hessian = exact_hessian(spec, thetas[static_cast<std::size_t>(o)], data);
        cs.curvature.push_back(std::move(c));
    }
    return cs;
}

namespace {

struct MemoryState {
    ProjectionMemory proj;
    GpmMemory gpm;
    TaskMask mask;
};

double constraint_violation(const std::string& algo, const ParamLayout& layout, const MemoryState& mem,
                            const ParamVector& delta) {
    if (algo == "sgd_dagger" || algo == "ogd" || algo == "ogd_gtl") {
        if (mem.proj.size() == 0) return 0.0;
        return (mem.proj.basis.transpose() * delta).cwiseAbs().maxCoeff();
    }
    if (algo == "gpm") {
        double worst = 0.0;
        for (const auto& s : layout.layers()) {
            const auto& b = mem.gpm.bases[static_cast<std::size_t>(s.layer)];
            if (b.cols() == 0) continue;
            worst = std::max(worst, (b.transpose() * layout.weights(delta, s.layer)).cwiseAbs().maxCoeff());
        }
        return worst;
    }
    if (algo == "mask") {
        if (mem.mask.mask.size() == 0) return 0.0;
        return (delta.array() * (1.0 - mem.mask.mask.array())).abs().maxCoeff();
    }
    return 0.0;
}

void add_metric(std::vector<MetricRow>& rows, std::string name, int o, int t, std::uint64_t seed, double v) {
    rows.push_back({std::move(name), o, t, seed, v});
}

std::string frac_name(double f) {
    std::ostringstream ss;
    ss << f;
    return ss.str();
}

}  // namespace

SeedResult run_seed(const ExperimentConfig& cfg, const TaskSequence& seq, std::uint64_t seed) {
    seq.validate();
    const MlpSpec spec = cfg.mlp_spec(seq.input_dim, seq.num_classes);
    const ParamLayout layout(spec);
    const std::string& algo = cfg.algorithm.name;
    if (algo == "gpm") spec.require_gpm_compatible();
    const int T = seq.size();

    SeedResult res;
    res.seed = seed;
    ParamVector theta = init_params(spec, seed);
    res.thetas.push_back(theta);

    MemoryState mem;
    mem.proj = ProjectionMemory::empty(layout.size(), cfg.algorithm.memory_cap);
    mem.gpm = GpmMemory::empty(spec);

    std::vector<double> violation(static_cast<std::size_t>(T), 0.0);
    std::vector<Index> mem_size;
    for (int t = 1; t <= T; ++t) {
        const TaskData& td = seq.tasks[static_cast<std::size_t>(t - 1)];
        if (algo == "mask") mem.mask = mask_freeze_allocate(layout.size(), t, cfg.algorithm.mask_fraction, seed);
        UpdateHook hook;
        if (algo == "sgd_dagger" || algo == "ogd" || algo == "ogd_gtl")
            hook = [&mem](ParamVector& g) { g = project_out(g, mem.proj); };
        else if (algo == "gpm")
            hook = [&mem, &layout](ParamVector& g) { g = gpm_project_flat(layout, g, mem.gpm); };
        else if (algo == "mask")
            hook = [&mem](ParamVector& g) { g = mask_apply(g, mem.mask); };

        const TrainConfig tc = cfg.train.for_task(t, seed);
        TrainResult tr = train_sgd(spec, theta, td.train, tc, hook, cfg.diagnostics.record_trace);
        for (const auto& d : tr.trace.updates)
            violation[static_cast<std::size_t>(t - 1)] =
                std::max(violation[static_cast<std::size_t>(t - 1)], constraint_violation(algo, layout, mem, d));
        theta = tr.params;
        res.thetas.push_back(theta);

        const std::uint64_t mseed = seed + static_cast<std::uint64_t>(t);
        if (t < T) {
            if (algo == "sgd_dagger") {
                const Dataset sub = td.train.subset(sample_subset(td.train.size(), cfg.algorithm.hessian_samples, mseed));
                const EigenBudget budget = cfg.algorithm.k ? EigenBudget{FixedK{*cfg.algorithm.k}}
                                                           : EigenBudget{EnergyFraction{cfg.algorithm.epsilon}};
                SgdDaggerOptions so;
                so.power.seed = mseed;
                mem.proj = sgd_dagger_after_task(spec, theta, sub, mem.proj, budget, so);
            } else if (algo == "ogd" || algo == "ogd_gtl") {
                mem.proj = ogd_after_task(spec, theta, td.train, mem.proj,
                                          algo == "ogd" ? OgdVariant::all : OgdVariant::gtl, cfg.algorithm.sample_cap,
                                          mseed, cfg.algorithm.epsilon);
            } else if (algo == "gpm") {
                mem.gpm = gpm_after_task(spec, theta, td.train, mem.gpm, cfg.algorithm.epsilon, cfg.algorithm.sample_cap,
                                         mseed);
            }
        }
        mem_size.push_back(algo == "gpm" ? mem.gpm.total_size() : mem.proj.size());
    }
    res.max_constraint_violation = *std::max_element(violation.begin(), violation.end());

    res.ledger = evaluate_ledger(spec, seq, res.thetas);
    auto& m = res.metrics;
    const auto& led = res.ledger;
    for (int t = 1; t <= T; ++t) {
        for (int o = 1; o <= t; ++o) {
            add_metric(m, "loss", o, t, seed, led.loss(t, o));
            add_metric(m, "acc", o, t, seed, led.acc(t, o));
            add_metric(m, "forgetting", o, t, seed, led.forgetting(o, t));
            add_metric(m, "acc_forgetting", o, t, seed, led.accuracy_forgetting(o, t));
            if (o < t)
                add_metric(m, "param_distance", o, t, seed,
                           (res.thetas[static_cast<std::size_t>(t)] - res.thetas[static_cast<std::size_t>(o)]).norm());
        }
        add_metric(m, "avg_forgetting", 0, t, seed, led.avg_forgetting(t));
        add_metric(m, "avg_acc_forgetting", 0, t, seed, led.avg_accuracy_forgetting(t));
        add_metric(m, "avg_accuracy", 0, t, seed, led.average_accuracy(t));
        add_metric(m, "memory_size", 0, t, seed, static_cast<double>(mem_size[static_cast<std::size_t>(t - 1)]));
        if (cfg.diagnostics.record_trace)
            add_metric(m, "constraint_violation", 0, t, seed, violation[static_cast<std::size_t>(t - 1)]);
    }
    if (T >= 2) add_metric(m, "bwt", 0, T, seed, led.bwt());

    const auto& dg = cfg.diagnostics;
    if (dg.hessians) {
        res.checkpoints = compute_curvature(cfg, seq, res.thetas, true);
        if (dg.vnc || !dg.low_rank.empty() || dg.taylor) res.checkpoints.ensure_eigen();
        auto& cs = res.checkpoints;
        if (dg.vnc)
            for (int t = 2; t <= T; ++t) add_metric(m, "vnc", 0, t, seed, vnc(cs, t));
        if (dg.taylor) {
            for (int t = 2; t <= T; ++t) {
                for (int o = 1; o < t; ++o) {
                    const TaylorTerms tt = taylor_forgetting(cs, HessianSource::exact(), o, t);
                    add_metric(m, "taylor_first", o, t, seed, tt.first_order);
                    add_metric(m, "taylor_second", o, t, seed, tt.second_order);
                    add_metric(m, "taylor_total", o, t, seed, tt.total);
                    add_metric(m, "taylor_error", o, t, seed, std::abs(tt.total - led.forgetting(o, t)));
                    for (int r : dg.low_rank) {
                        const TaylorTerms lr = taylor_forgetting(cs, HessianSource::low_rank(r), o, t);
                        add_metric(m, "taylor_error_r" + std::to_string(r), o, t, seed,
                                   std::abs(lr.total - led.forgetting(o, t)));
                    }
                }
                const double rec = recursive_avg_forgetting(cs, t);
                add_metric(m, "recursive_avg", 0, t, seed, rec);
                add_metric(m, "recursive_error", 0, t, seed, std::abs(rec - led.avg_forgetting(t)));
                for (int r : dg.low_rank) {
                    const double rr = recursive_avg_forgetting(cs, t, HessianSource::low_rank(r));
                    add_metric(m, "recursive_error_r" + std::to_string(r), 0, t, seed,
                               std::abs(rr - led.avg_forgetting(t)));
                }
                const Theorem1Result th = theorem1_check(cs, led, t);
                add_metric(m, "theorem1_predicted", 0, t, seed, th.predicted);
                add_metric(m, "theorem1_gap", 0, t, seed, th.gap);
                add_metric(m, "theorem1_assumption_violated", 0, t, seed, th.assumption_violated ? 1.0 : 0.0);
            }
        }
        if (dg.landscape) {
            const auto blocks = layer_blocks(layout);
            for (int o = 1; o <= T; ++o) {
                const Eigen::MatrixXd& h = *cs.task(o).hessian;
                const Dataset data = curvature_data(cfg, seq, o);
                const Eigen::MatrixXd outer = outer_product_hessian(spec, res.thetas[static_cast<std::size_t>(o)], data);
                add_metric(m, "block_diagonality", o, o, seed, block_diagonality(h, blocks));
                add_metric(m, "similarity_outer_exact", o, o, seed, spectral_similarity(outer, h));
                const Eigen::MatrixXd func = h - outer;
                if (func.norm() > 0.0)
                    add_metric(m, "similarity_functional_exact", o, o, seed, spectral_similarity(func, h));
            }
        }
        if (!dg.rank_fracs.empty()) {
            for (const auto& r : rank_evolution(cs, dg.rank_fracs)) {
                if (r.lambda_frac == dg.rank_fracs.front())
                    add_metric(m, "rank", 0, r.t, seed, static_cast<double>(r.rank));
                add_metric(m, "eff_rank_" + frac_name(r.lambda_frac), 0, r.t, seed,
                           static_cast<double>(r.effective_rank));
            }
        }
    }
    if (dg.perturb) {
        for (int o = 1; o <= T; ++o) {
            const Dataset data = curvature_data(cfg, seq, o);
            PowerIterationOptions po;
            po.seed = seed + static_cast<std::uint64_t>(o);
            const auto curve = perturbation_score(spec, res.thetas[static_cast<std::size_t>(o)], data,
                                                  dg.perturb_eig_index, default_radii(), dg.perturb_draws,
                                                  seed + static_cast<std::uint64_t>(o), po);
            if (const auto r = convergence_radius(curve)) add_metric(m, "convergence_radius", o, o, seed, *r);
            for (const auto& p : curve)
                if (p.reliable) add_metric(m, "perturb_r" + format_double(p.radius), o, o, seed, p.score);
        }
    }
    if (cfg.diagnostics.record_trace) add_metric(m, "max_constraint_violation", 0, 0, seed, res.max_constraint_violation);
    return res;
}

std::vector<AggregateRow> aggregate(const std::vector<MetricRow>& rows) {
    std::map<std::tuple<std::string, int, int>, std::vector<double>> groups;
    for (const auto& r : rows) groups[{r.metric, r.task_o, r.task_t}].push_back(r.value);
    std::vector<AggregateRow> out;
    for (const auto& [key, vals] : groups) {
        AggregateRow a;
        std::tie(a.metric, a.task_o, a.task_t) = key;
        a.n = vals.size();
        double s = 0.0;
        for (double v : vals) s += v;
        a.mean = s / static_cast<double>(a.n);
        if (a.n > 1) {
            double ss = 0.0;
            for (double v : vals) ss += (v - a.mean) * (v - a.mean);
            a.std = std::sqrt(ss / static_cast<double>(a.n - 1));
        }
        out.push_back(std::move(a));
    }
    return out;
}

const AggregateRow* find_aggregate(const std::vector<AggregateRow>& rows, const std::string& metric, int task_o,
                                   int task_t) {
    for (const auto& r : rows)
        if (r.metric == metric && r.task_o == task_o && r.task_t == task_t) return &r;
    return nullptr;
}

std::string metrics_csv(std::uint64_t config_hash, const std::vector<MetricRow>& rows) {
    CsvTable t({"config_hash", "metric", "task_o", "task_t", "seed", "value"});
    for (const auto& r : rows)
        t.add_row({hex64(config_hash), r.metric, std::to_string(r.task_o), std::to_string(r.task_t),
                   std::to_string(r.seed), format_double(r.value)});
    return t.str();
}

std::vector<MetricRow> parse_metrics_csv(const std::string& text) {
    const CsvTable t = CsvTable::parse(text);
    const auto cm = t.column("metric"), co = t.column("task_o"), ct = t.column("task_t"), cs = t.column("seed"),
               cv = t.column("value");
    std::vector<MetricRow> out;
    for (const auto& r : t.rows())
        out.push_back({r[cm], std::stoi(r[co]), std::stoi(r[ct]), std::stoull(r[cs]), parse_double(r[cv])});
    return out;
}

std::string aggregate_csv(const std::vector<AggregateRow>& rows) {
    CsvTable t({"metric", "task_o", "task_t", "n", "mean", "std"});
    for (const auto& r : rows)
        t.add_row({r.metric, std::to_string(r.task_o), std::to_string(r.task_t), std::to_string(r.n),
                   format_double(r.mean), format_double(r.std)});
    return t.str();
}

namespace {

json metric_provenance() {
    return {
        {"loss", "test loss of task o at theta_t"},
        {"acc", "test accuracy of task o at theta_t"},
        {"forgetting", "loss(t,o) - loss(o,o)"},
        {"acc_forgetting", "acc(o,o) - acc(t,o)"},
        {"avg_forgetting", "mean over o <= t of forgetting(o,t)"},
        {"avg_acc_forgetting", "mean over o <= t of acc_forgetting(o,t)"},
        {"avg_accuracy", "mean over o <= t of acc(t,o)"},
        {"bwt", "mean over o < T of acc_forgetting(o,T)"},
        {"param_distance", "|theta_t - theta_o|_2"},
        {"memory_size", "stored protected directions after task t"},
        {"constraint_violation", "max over steps of task t of the algorithm's orthogonality residual"},
        {"vnc", "Delta_t^T (1/t sum_{o<t} PSD(H_o)) Delta_t"},
        {"taylor_total", "gradient term + 1/2 quadratic term with exact H_o"},
        {"taylor_error", "|taylor_total - forgetting|"},
        {"taylor_error_r<k>", "as taylor_error with the rank-k eigen truncation of H_o"},
        {"recursive_avg", "quadratic recursion for avg_forgetting seeded with 0"},
        {"recursive_error", "|recursive_avg - avg_forgetting|"},
        {"theorem1_predicted", "1/2 vnc(t)"},
        {"theorem1_gap", "|theorem1_predicted - avg_forgetting|"},
        {"block_diagonality", "layer block-diagonality score of H_o"},
        {"similarity_outer_exact", "Frobenius cosine of outer-product and exact H_o"},
        {"rank", "numerical rank of the average Hessian of tasks < t"},
        {"eff_rank_<f>", "eigenvalues above f times the largest, average Hessian of tasks < t"},
        {"convergence_radius", "first radius with |s(r) - 1| < 0.1 for 3 grid points"},
    };
}

}  // namespace

RunSummary run_experiment(const ExperimentConfig& cfg, bool write_outputs) {
    RunSummary sum;
    sum.dir = cfg.output_dir;
    const TaskSequence seq = build_tasks(cfg);
    const std::uint64_t h = cfg.hash();
    const fs::path dir(cfg.output_dir);
    if (write_outputs) {
        fs::create_directories(dir);
        fs::remove(dir / "FAILED");
        write_file_atomic((dir / "config.json").string(), cfg.to_json().dump(2) + "\n");
    }
    std::vector<MetricRow> all;
    json files = json::object();
    for (std::uint64_t seed : cfg.seeds) {
        const fs::path sd = dir / ("seed_" + std::to_string(seed));
        try {
            SeedResult r = run_seed(cfg, seq, seed);
            if (write_outputs) {
                const MlpSpec spec = cfg.mlp_spec(seq.input_dim, seq.num_classes);
                for (std::size_t t = 0; t < r.thetas.size(); ++t)
                    save_checkpoint((sd / ("theta_" + std::to_string(t) + ".ckpt")).string(),
                                    {spec.hash(), static_cast<std::uint32_t>(t), seed, r.thetas[t]});
                write_file_atomic((sd / "ledger.csv").string(), r.ledger.to_csv());
                write_file_atomic((sd / "metrics.csv").string(), metrics_csv(h, r.metrics));
                if (cfg.diagnostics.spectra && cfg.diagnostics.hessians) {
                    std::vector<std::pair<int, Eigen::VectorXd>> spectra;
                    for (int o = 1; o <= r.checkpoints.num_tasks(); ++o) {
                        const auto& c = r.checkpoints.task(o);
                        spectra.emplace_back(o, c.eigen ? c.eigen->values : dense_eigenvalues(*c.hessian));
                    }
                    write_spectrum_csv((sd / "spectra.csv").string(), spectra);
                }
                files["seed_" + std::to_string(seed)] = {"theta_<t>.ckpt", "ledger.csv", "metrics.csv"};
            }
            all.insert(all.end(), r.metrics.begin(), r.metrics.end());
            sum.seeds.push_back(std::move(r));
        } catch (const std::exception& e) {
            if (write_outputs) {
                if (!all.empty()) write_file_atomic((dir / "aggregate.partial.csv").string(), aggregate_csv(aggregate(all)));
                write_file_atomic((dir / "FAILED").string(),
                                  "seed " + std::to_string(seed) + ": " + std::string(e.what()) + "\n");
            }
            throw;
        }
    }
    sum.aggregate = aggregate(all);
    if (write_outputs) {
        write_file_atomic((dir / "aggregate.csv").string(), aggregate_csv(sum.aggregate));
        json man;
        man["name"] = cfg.name;
        man["config_hash"] = hex64(h);
        man["version"] = clgeo_version;
        man["seeds"] = cfg.seeds;
        man["synthetic_data"] = seq.synthetic;
        man["tasks"] = seq.size();
        man["forgetting_measured_on"] = "test";
        man["files"] = files;
        man["metrics"] = metric_provenance();
        write_file_atomic((dir / "manifest.json").string(), man.dump(2) + "\n");
    }
    return sum;
}

LoadedRun load_run(const std::string& dir) {
    LoadedRun lr;
    lr.config = load_config((fs::path(dir) / "config.json").string());
    lr.config.output_dir = dir;
    for (std::uint64_t seed : lr.config.seeds) {
        const fs::path sd = fs::path(dir) / ("seed_" + std::to_string(seed));
        std::vector<ParamVector> th;
        for (int t = 0;; ++t) {
            const fs::path p = sd / ("theta_" + std::to_string(t) + ".ckpt");
            if (!fs::exists(p)) break;
            th.push_back(load_checkpoint(p.string()).params);
        }
        if (th.empty()) throw Error(ErrorKind::io, "no checkpoints under " + sd.string());
        lr.thetas.emplace_back(seed, std::move(th));
    }
    return lr;
}

}  // namespace clgeo
