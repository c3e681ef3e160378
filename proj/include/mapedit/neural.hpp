#pragma once

#include "mapedit/common.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace mapedit::nn {

using Matrix = Eigen::MatrixXd;

namespace detail {
struct Node;
}

/// Handle to a node of a reverse-mode autodiff graph. Values are 2-D
/// (batch rows x feature columns); scalars are 1 x 1. Copies share the node.
class Tensor {
public:
    Tensor() = default;

    /// A graph input. Leaves with requires_grad accumulate gradients across backward() calls.
    static Tensor leaf(Matrix value, bool requires_grad = true);
    static Tensor constant(Matrix value) { return leaf(std::move(value), false); }

    bool defined() const { return static_cast<bool>(node_); }
    const Matrix& value() const;
    Matrix& mutable_value();

    /// Accumulated gradient; a zero matrix of the value's shape when nothing was accumulated.
    Matrix grad() const;
    bool has_grad() const;
    bool requires_grad() const;
    void zero_grad();

    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    std::array<Eigen::Index, 2> shape() const { return {rows(), cols()}; }

    /// Scalar value of a 1 x 1 tensor.
    double item() const;

    std::shared_ptr<detail::Node> node() const { return node_; }

private:
    friend Tensor make_op(Matrix, std::vector<Tensor>, std::function<void(const Matrix&, std::span<Matrix*>)>);
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;
};

/// Builds an interior node. `vjp(grad_out, parent_grads)` must add into the parent
/// gradient buffers it receives; entries for parents without requires_grad are null.
Tensor make_op(Matrix value, std::vector<Tensor> parents,
               std::function<void(const Matrix& grad_out, std::span<Matrix*> parent_grads)> vjp);

/// Reverse pass from a scalar root. Throws UsageError unless the root is 1 x 1.
void backward(const Tensor& root);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x * W^T + b, with W stored out x in and b a 1 x out row broadcast over the batch.
Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b); // elementwise
Tensor scale(const Tensor& a, double s);
Tensor leaky_relu(const Tensor& x, double slope);
/// Elementwise clamp; the gradient is passed through inside [lo, hi] and zero outside.
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor tanh(const Tensor& x);
/// Columns [offset, offset + n).
Tensor slice_cols(const Tensor& x, Eigen::Index offset, Eigen::Index n);
/// Mean of |x| over all elements (1 x 1). The subgradient at 0 is 0.
Tensor abs_mean(const Tensor& x);
/// Sum of squares over all elements (1 x 1).
Tensor sum_squares(const Tensor& x);
Tensor sum(const Tensor& x);

/// Wraps an external differentiable function of `x` into the graph. `vjp` maps the
/// output cotangent to the cotangent of x and must return a matrix shaped like x.
Tensor custom(const Tensor& x, Matrix value, std::function<Matrix(const Matrix& grad_out)> vjp);

/// Five affine layers; leaky rectifier after layers 1 to 4, linear output.
class Mlp {
public:
    static constexpr int kLayers = 5;

    Mlp() = default;

    /// Kaiming-uniform weights scaled by fan-in, zero biases.
    Mlp(int input_dim, int hidden_dim, int output_dim, Rng& rng, double slope = 0.2);

    /// All weights and biases zero.
    static Mlp zeros(int input_dim, int hidden_dim, int output_dim, double slope = 0.2);

    int input_dim() const { return input_dim_; }
    int hidden_dim() const { return hidden_dim_; }
    int output_dim() const { return output_dim_; }
    double slope() const { return slope_; }
    const char* activation() const { return "leaky_relu"; }

    /// Batched forward through the graph; x is B x input_dim.
    Tensor forward(const Tensor& x) const;

    /// Plain forward without recording a graph.
    Matrix forward(const Matrix& x) const;

    Tensor& weight(int layer) { return weights_.at(layer); }
    Tensor& bias(int layer) { return biases_.at(layer); }
    const Tensor& weight(int layer) const { return weights_.at(layer); }
    const Tensor& bias(int layer) const { return biases_.at(layer); }

    /// Weight then bias for each layer in order.
    std::vector<Tensor> parameters() const;
    std::size_t num_parameters() const;
    void zero_grad();

    /// Independent copy (new leaf nodes).
    Mlp clone() const;

private:
    void check_input(Eigen::Index cols) const;

    int input_dim_ = 0;
    int hidden_dim_ = 0;
    int output_dim_ = 0;
    double slope_ = 0.2;
    std::vector<Tensor> weights_; // out x in
    std::vector<Tensor> biases_;  // 1 x out
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam moments for a fixed list of parameter buffers. The buffers are sized on the
/// first step; later steps must present the same shapes in the same order.
struct AdamState {
    AdamConfig config;
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    long step = 0;

    explicit AdamState(AdamConfig cfg = {}) : config(cfg) {}
};

/// One bias-corrected Adam update. `lr_scale`, when given, multiplies the learning
/// rate per parameter buffer.
void adam_step(AdamState& state, std::span<Matrix* const> params, std::span<const Matrix* const> grads,
               std::span<const double> lr_scale = {});

/// Updates every parameter of the given networks from their accumulated gradients.
void adam_step(AdamState& state, std::span<Mlp* const> nets);

/// "MAPEDIT1", u64 header length, UTF-8 JSON header, then little-endian f64 blocks:
/// for each network, for each layer, the weight (row-major, out x in) then the bias.
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& header, std::span<const Mlp* const> nets);

struct Checkpoint {
    nlohmann::json header;
    std::vector<Mlp> nets;
};

/// Network shapes are read from header["nets"] = [{input, hidden, output, slope}, ...].
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace mapedit::nn
