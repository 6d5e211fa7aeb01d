#pragma once

// Fully connected network x^{l+1} = act(W^l^T x^l + b^l) with a linear output
// layer. Weight matrices are stored (input-dim x output-dim), column-major,
// inside one flat parameter vector; a layer's bias (when enabled) follows its
// weights.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace clgeo {

using Index = Eigen::Index;
using ParamVector = Eigen::VectorXd;

enum class Activation { relu, linear };
enum class LossKind { cross_entropy, mse };

struct MlpSpec {
    std::vector<int> layer_widths;  // input dim, hidden widths..., output dim
    Activation activation = Activation::relu;
    bool use_bias = true;
    LossKind loss = LossKind::cross_entropy;

    int num_layers() const { return static_cast<int>(layer_widths.size()) - 1; }
    int input_dim() const { return layer_widths.front(); }
    int output_dim() const { return layer_widths.back(); }

    void validate() const;
    // GPM needs bias-free nets with piecewise-linear activations.
    void require_gpm_compatible() const;
    std::string canonical() const;
    std::uint64_t hash() const;
};

struct LayerSlice {
    int layer = 0;
    int rows = 0;  // input dim of the layer
    int cols = 0;  // output dim of the layer
    Index weight_offset = 0;
    Index bias_offset = -1;  // -1 when the layer has no bias

    Index weight_count() const { return Index(rows) * cols; }
};

class ParamLayout {
public:
    explicit ParamLayout(const MlpSpec& spec);

    Index size() const { return size_; }
    const std::vector<LayerSlice>& layers() const { return layers_; }
    const LayerSlice& layer(int l) const { return layers_.at(static_cast<std::size_t>(l)); }

    // Layer owning flat coordinate i, and whether it is a bias entry.
    int layer_of(Index i) const;
    bool is_bias(Index i) const;

    Eigen::Map<Eigen::MatrixXd> weights(ParamVector& v, int l) const;
    Eigen::Map<const Eigen::MatrixXd> weights(const ParamVector& v, int l) const;
    Eigen::Map<Eigen::VectorXd> bias(ParamVector& v, int l) const;
    Eigen::Map<const Eigen::VectorXd> bias(const ParamVector& v, int l) const;

    void check(const ParamVector& v) const;

private:
    std::vector<LayerSlice> layers_;
    Index size_ = 0;
};

struct Dataset {
    Eigen::MatrixXd inputs;  // n x d, one sample per row
    std::vector<int> labels;
    int task_id = 1;

    Index size() const { return inputs.rows(); }
    void validate(int num_classes) const;
    Dataset subset(std::span<const Index> rows) const;
};

struct ForwardResult {
    Eigen::VectorXd logits;
    // x^0 .. x^L; x^0 is the input and x^L equals the logits.
    std::vector<Eigen::VectorXd> activations;
};

// He-uniform weights U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
ParamVector init_params(const MlpSpec& spec, std::uint64_t seed);

ForwardResult forward(const MlpSpec& spec, const ParamVector& params, const Eigen::VectorXd& x);
Eigen::MatrixXd logits_batch(const MlpSpec& spec, const ParamVector& params, const Eigen::MatrixXd& inputs);

// Inputs of every layer (x^0 .. x^{L-1}) for a batch, one sample per row.
std::vector<Eigen::MatrixXd> layer_inputs_batch(const MlpSpec& spec, const ParamVector& params,
                                                const Eigen::MatrixXd& inputs);

Eigen::VectorXd softmax(const Eigen::VectorXd& logits);
double sample_loss(LossKind kind, const Eigen::VectorXd& logits, int label);
// d loss / d logits for one sample.
Eigen::VectorXd loss_output_gradient(LossKind kind, const Eigen::VectorXd& logits, int label);
// d^2 loss / d logits^2: diag(p) - p p^T for cross entropy, identity for mse.
Eigen::MatrixXd loss_output_hessian(const Eigen::VectorXd& probs, LossKind kind = LossKind::cross_entropy);

double mean_loss(const MlpSpec& spec, const ParamVector& params, const Dataset& data);
ParamVector mean_grad(const MlpSpec& spec, const ParamVector& params, const Dataset& data);

struct LossGrad {
    double loss = 0.0;
    ParamVector grad;
};
LossGrad loss_and_grad(const MlpSpec& spec, const ParamVector& params, const Eigen::MatrixXd& inputs,
                       std::span<const int> labels);

double accuracy(const MlpSpec& spec, const ParamVector& params, const Dataset& data);

// P x C matrix whose column c is d logit_c / d theta.
Eigen::MatrixXd output_jacobian(const MlpSpec& spec, const ParamVector& params, const Eigen::VectorXd& x);

// Per-sample parameter gradients of the scalar dirs.row(i) . f(x_i).
// Returns P x n, column i for sample i.
Eigen::MatrixXd per_sample_output_grads(const MlpSpec& spec, const ParamVector& params,
                                        const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& dirs);

namespace detail {

// Forward tape of a batch: layer inputs A^l and pre-activations Z^l.
struct Tape {
    std::vector<Eigen::MatrixXd> inputs;
    std::vector<Eigen::MatrixXd> pre;
};

Tape run_forward(const MlpSpec& spec, const ParamLayout& layout, const ParamVector& params,
                 const Eigen::MatrixXd& x);

// Activation derivative evaluated at pre-activations (relu'(0) := 0).
Eigen::MatrixXd activation_derivative(Activation act, const Eigen::MatrixXd& pre);

// Accumulates the parameter gradient given d/dZ^{L-1}; optionally stores
// d/dZ^l for every layer.
ParamVector backward(const MlpSpec& spec, const ParamLayout& layout, const ParamVector& params,
                     const Tape& tape, const Eigen::MatrixXd& d_out,
                     std::vector<Eigen::MatrixXd>* d_pre = nullptr);

// Per-row d loss / d logits, unscaled.
Eigen::MatrixXd output_gradients(LossKind kind, const Eigen::MatrixXd& logits, std::span<const int> labels);

}  // namespace detail

}  // namespace clgeo
