#include "clgeo/mlp.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "clgeo/error.hpp"
#include "clgeo/hash.hpp"

namespace clgeo {

void MlpSpec::validate() const {
    if (layer_widths.size() < 2) {
        throw Error(ErrorKind::invalid_argument, "MlpSpec: layer_widths needs at least input and output dims");
    }
    for (std::size_t i = 0; i < layer_widths.size(); ++i) {
        if (layer_widths[i] < 1) {
            throw Error(ErrorKind::invalid_argument,
                        "MlpSpec: layer_widths[" + std::to_string(i) + "] must be >= 1");
        }
    }
}

void MlpSpec::require_gpm_compatible() const {
    validate();
    if (use_bias) {
        throw Error(ErrorKind::invalid_argument, "GPM requires a network without bias terms");
    }
}

std::string MlpSpec::canonical() const {
    std::ostringstream os;
    os << "mlp[";
    for (std::size_t i = 0; i < layer_widths.size(); ++i) {
        os << (i ? "," : "") << layer_widths[i];
    }
    os << "];act=" << (activation == Activation::relu ? "relu" : "linear")
       << ";bias=" << (use_bias ? 1 : 0)
       << ";loss=" << (loss == LossKind::cross_entropy ? "cross_entropy" : "mse");
    return os.str();
}

std::uint64_t MlpSpec::hash() const { return fnv1a64(canonical()); }

ParamLayout::ParamLayout(const MlpSpec& spec) {
    spec.validate();
    Index offset = 0;
    for (int l = 0; l < spec.num_layers(); ++l) {
        LayerSlice s;
        s.layer = l;
        s.rows = spec.layer_widths[static_cast<std::size_t>(l)];
        s.cols = spec.layer_widths[static_cast<std::size_t>(l) + 1];
        s.weight_offset = offset;
        offset += s.weight_count();
        if (spec.use_bias) {
            s.bias_offset = offset;
            offset += s.cols;
        }
        layers_.push_back(s);
    }
    size_ = offset;
}

int ParamLayout::layer_of(Index i) const {
    for (const auto& s : layers_) {
        const Index end = s.bias_offset >= 0 ? s.bias_offset + s.cols : s.weight_offset + s.weight_count();
        if (i >= s.weight_offset && i < end) return s.layer;
    }
    throw Error(ErrorKind::dimension, "ParamLayout: coordinate " + std::to_string(i) + " out of range");
}

bool ParamLayout::is_bias(Index i) const {
    const auto& s = layers_[static_cast<std::size_t>(layer_of(i))];
    return s.bias_offset >= 0 && i >= s.bias_offset;
}

Eigen::Map<Eigen::MatrixXd> ParamLayout::weights(ParamVector& v, int l) const {
    const auto& s = layer(l);
    return {v.data() + s.weight_offset, s.rows, s.cols};
}

Eigen::Map<const Eigen::MatrixXd> ParamLayout::weights(const ParamVector& v, int l) const {
    const auto& s = layer(l);
    return {v.data() + s.weight_offset, s.rows, s.cols};
}

Eigen::Map<Eigen::VectorXd> ParamLayout::bias(ParamVector& v, int l) const {
    const auto& s = layer(l);
    if (s.bias_offset < 0) throw Error(ErrorKind::invalid_argument, "layer has no bias");
    return {v.data() + s.bias_offset, s.cols};
}

Eigen::Map<const Eigen::VectorXd> ParamLayout::bias(const ParamVector& v, int l) const {
    const auto& s = layer(l);
    if (s.bias_offset < 0) throw Error(ErrorKind::invalid_argument, "layer has no bias");
    return {v.data() + s.bias_offset, s.cols};
}

void ParamLayout::check(const ParamVector& v) const {
    if (v.size() != size_) {
        throw Error(ErrorKind::dimension, "parameter vector has length " + std::to_string(v.size()) +
                                              ", layout expects " + std::to_string(size_));
    }
}

void Dataset::validate(int num_classes) const {
    if (inputs.rows() < 1) throw Error(ErrorKind::invalid_argument, "dataset is empty");
    if (static_cast<Index>(labels.size()) != inputs.rows()) {
        throw Error(ErrorKind::dimension, "dataset: label count does not match input rows");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes) {
            throw Error(ErrorKind::invalid_argument, "dataset: label " + std::to_string(labels[i]) +
                                                         " at row " + std::to_string(i) + " outside [0, " +
                                                         std::to_string(num_classes) + ")");
        }
    }
    if (!inputs.allFinite()) throw Error(ErrorKind::numerical, "dataset: non-finite inputs");
}

Dataset Dataset::subset(std::span<const Index> rows) const {
    Dataset out;
    out.task_id = task_id;
    out.inputs.resize(static_cast<Index>(rows.size()), inputs.cols());
    out.labels.reserve(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
        out.inputs.row(static_cast<Index>(k)) = inputs.row(rows[k]);
        out.labels.push_back(labels[static_cast<std::size_t>(rows[k])]);
    }
    return out;
}

ParamVector init_params(const MlpSpec& spec, std::uint64_t seed) {
    ParamLayout layout(spec);
    ParamVector theta(layout.size());
    std::mt19937_64 rng(seed);
    auto uniform = [&rng]() {
        // 53 random bits mapped to [-1, 1).
        return 2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0;
    };
    for (const auto& s : layout.layers()) {
        const double fan_in = static_cast<double>(s.rows);
        const double w_bound = std::sqrt(6.0 / fan_in);
        const double b_bound = 1.0 / std::sqrt(fan_in);
        auto w = layout.weights(theta, s.layer);
        for (Index j = 0; j < w.cols(); ++j)
            for (Index i = 0; i < w.rows(); ++i) w(i, j) = w_bound * uniform();
        if (s.bias_offset >= 0) {
            auto b = layout.bias(theta, s.layer);
            for (Index i = 0; i < b.size(); ++i) b(i) = b_bound * uniform();
        }
    }
    return theta;
}

namespace detail {

Eigen::MatrixXd activation_derivative(Activation act, const Eigen::MatrixXd& pre) {
    if (act == Activation::linear) return Eigen::MatrixXd::Ones(pre.rows(), pre.cols());
    return (pre.array() > 0.0).cast<double>().matrix();
}

Tape run_forward(const MlpSpec& spec, const ParamLayout& layout, const ParamVector& params,
                 const Eigen::MatrixXd& x) {
    layout.check(params);
    if (x.cols() != spec.input_dim()) {
        throw Error(ErrorKind::dimension, "forward: layer 0 expects input dim " + std::to_string(spec.input_dim()) +
                                              ", got " + std::to_string(x.cols()));
    }
    const int L = spec.num_layers();
    Tape tape;
    tape.inputs.reserve(static_cast<std::size_t>(L));
    tape.pre.reserve(static_cast<std::size_t>(L));
    tape.inputs.push_back(x);
    for (int l = 0; l < L; ++l) {
        Eigen::MatrixXd z = tape.inputs.back() * layout.weights(params, l);
        if (spec.use_bias) z.rowwise() += layout.bias(params, l).transpose();
        if (l + 1 < L) {
            Eigen::MatrixXd a = spec.activation == Activation::relu ? Eigen::MatrixXd(z.cwiseMax(0.0)) : z;
            tape.inputs.push_back(std::move(a));
        }
        tape.pre.push_back(std::move(z));
    }
    return tape;
}

ParamVector backward(const MlpSpec& spec, const ParamLayout& layout, const ParamVector& params, const Tape& tape,
                     const Eigen::MatrixXd& d_out, std::vector<Eigen::MatrixXd>* d_pre) {
    const int L = spec.num_layers();
    ParamVector grad = ParamVector::Zero(layout.size());
    if (d_pre) d_pre->assign(static_cast<std::size_t>(L), Eigen::MatrixXd());
    Eigen::MatrixXd dz = d_out;
    for (int l = L - 1; l >= 0; --l) {
        const auto ul = static_cast<std::size_t>(l);
        layout.weights(grad, l).noalias() = tape.inputs[ul].transpose() * dz;
        if (spec.use_bias) layout.bias(grad, l) = dz.colwise().sum().transpose();
        if (l > 0) {
            Eigen::MatrixXd da = dz * layout.weights(params, l).transpose();
            if (d_pre) (*d_pre)[ul] = std::move(dz);
            dz = da.cwiseProduct(activation_derivative(spec.activation, tape.pre[ul - 1]));
        } else if (d_pre) {
            (*d_pre)[ul] = std::move(dz);
        }
    }
    return grad;
}

Eigen::MatrixXd output_gradients(LossKind kind, const Eigen::MatrixXd& logits, std::span<const int> labels) {
    Eigen::MatrixXd g(logits.rows(), logits.cols());
    for (Index i = 0; i < logits.rows(); ++i) {
        g.row(i) = loss_output_gradient(kind, logits.row(i).transpose(), labels[static_cast<std::size_t>(i)]).transpose();
    }
    return g;
}

}  // namespace detail

ForwardResult forward(const MlpSpec& spec, const ParamVector& params, const Eigen::VectorXd& x) {
    const ParamLayout layout(spec);
    const auto tape = detail::run_forward(spec, layout, params, x.transpose());
    ForwardResult out;
    for (const auto& a : tape.inputs) out.activations.push_back(a.row(0).transpose());
    out.logits = tape.pre.back().row(0).transpose();
    out.activations.push_back(out.logits);
    return out;
}

Eigen::MatrixXd logits_batch(const MlpSpec& spec, const ParamVector& params, const Eigen::MatrixXd& inputs) {
    const ParamLayout layout(spec);
    return detail::run_forward(spec, layout, params, inputs).pre.back();
}

std::vector<Eigen::MatrixXd> layer_inputs_batch(const MlpSpec& spec, const ParamVector& params,
                                                const Eigen::MatrixXd& inputs) {
    const ParamLayout layout(spec);
    return detail::run_forward(spec, layout, params, inputs).inputs;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
    const double m = logits.maxCoeff();
    Eigen::VectorXd e = (logits.array() - m).exp().matrix();
    return e / e.sum();
}

double sample_loss(LossKind kind, const Eigen::VectorXd& logits, int label) {
    if (kind == LossKind::mse) {
        Eigen::VectorXd r = logits;
        r(label) -= 1.0;
        return 0.5 * r.squaredNorm();
    }
    const double m = logits.maxCoeff();
    const double lse = m + std::log((logits.array() - m).exp().sum());
    return lse - logits(label);
}

Eigen::VectorXd loss_output_gradient(LossKind kind, const Eigen::VectorXd& logits, int label) {
    Eigen::VectorXd g = kind == LossKind::mse ? logits : softmax(logits);
    g(label) -= 1.0;
    return g;
}

Eigen::MatrixXd loss_output_hessian(const Eigen::VectorXd& probs, LossKind kind) {
    const Index c = probs.size();
    if (kind == LossKind::mse) return Eigen::MatrixXd::Identity(c, c);
    if ((probs.array() < 0.0).any() || std::abs(probs.sum() - 1.0) > 1e-8) {
        throw Error(ErrorKind::invalid_argument, "loss_output_hessian: probabilities must be >= 0 and sum to 1");
    }
    Eigen::MatrixXd h = -probs * probs.transpose();
    h.diagonal() += probs;
    return h;
}

LossGrad loss_and_grad(const MlpSpec& spec, const ParamVector& params, const Eigen::MatrixXd& inputs,
                       std::span<const int> labels) {
    if (inputs.rows() < 1) throw Error(ErrorKind::invalid_argument, "loss_and_grad: empty batch");
    const ParamLayout layout(spec);
    const auto tape = detail::run_forward(spec, layout, params, inputs);
    const auto& logits = tape.pre.back();
    const double inv_n = 1.0 / static_cast<double>(inputs.rows());
    LossGrad out;
    for (Index i = 0; i < logits.rows(); ++i) {
        out.loss += sample_loss(spec.loss, logits.row(i).transpose(), labels[static_cast<std::size_t>(i)]);
    }
    out.loss *= inv_n;
    Eigen::MatrixXd d_out = detail::output_gradients(spec.loss, logits, labels) * inv_n;
    out.grad = detail::backward(spec, layout, params, tape, d_out);
    return out;
}

double mean_loss(const MlpSpec& spec, const ParamVector& params, const Dataset& data) {
    data.validate(spec.output_dim());
    const Eigen::MatrixXd logits = logits_batch(spec, params, data.inputs);
    double total = 0.0;
    for (Index i = 0; i < logits.rows(); ++i) {
        total += sample_loss(spec.loss, logits.row(i).transpose(), data.labels[static_cast<std::size_t>(i)]);
    }
    return total / static_cast<double>(data.size());
}

ParamVector mean_grad(const MlpSpec& spec, const ParamVector& params, const Dataset& data) {
    data.validate(spec.output_dim());
    return loss_and_grad(spec, params, data.inputs, data.labels).grad;
}

double accuracy(const MlpSpec& spec, const ParamVector& params, const Dataset& data) {
    data.validate(spec.output_dim());
    const Eigen::MatrixXd logits = logits_batch(spec, params, data.inputs);
    Index correct = 0;
    for (Index i = 0; i < logits.rows(); ++i) {
        Index arg = 0;
        logits.row(i).maxCoeff(&arg);
        if (arg == data.labels[static_cast<std::size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

Eigen::MatrixXd output_jacobian(const MlpSpec& spec, const ParamVector& params, const Eigen::VectorXd& x) {
    const int c = spec.output_dim();
    return per_sample_output_grads(spec, params, x.transpose().replicate(c, 1), Eigen::MatrixXd::Identity(c, c));
}

Eigen::MatrixXd per_sample_output_grads(const MlpSpec& spec, const ParamVector& params,
                                        const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& dirs) {
    const ParamLayout layout(spec);
    const auto tape = detail::run_forward(spec, layout, params, inputs);
    if (dirs.rows() != inputs.rows() || dirs.cols() != spec.output_dim()) {
        throw Error(ErrorKind::dimension, "per_sample_output_grads: direction matrix shape mismatch");
    }
    std::vector<Eigen::MatrixXd> d_pre;
    detail::backward(spec, layout, params, tape, dirs, &d_pre);
    const Index n = inputs.rows();
    Eigen::MatrixXd out(layout.size(), n);
    for (const auto& s : layout.layers()) {
        const auto ul = static_cast<std::size_t>(s.layer);
        const auto& a = tape.inputs[ul];
        const auto& d = d_pre[ul];
        for (Index i = 0; i < n; ++i) {
            Eigen::Map<Eigen::MatrixXd> block(out.col(i).data() + s.weight_offset, s.rows, s.cols);
            block.noalias() = a.row(i).transpose() * d.row(i);
            if (s.bias_offset >= 0) out.col(i).segment(s.bias_offset, s.cols) = d.row(i).transpose();
        }
    }
    return out;
}

}  // namespace clgeo
