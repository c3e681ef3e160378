#include "mapedit/neural.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_set>

namespace mapedit::nn {

namespace detail {
struct Node {
    Matrix value;
    Matrix grad; // empty until something flows in
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Matrix&, std::span<Matrix*>)> vjp;
};
} // namespace detail

using detail::Node;

namespace {

void ensure_grad(Node& n)
{
    if (n.grad.size() == 0) {
        n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op)
{
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ConfigError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()) + ")");
    }
}

Matrix scalar(double v)
{
    Matrix m(1, 1);
    m(0, 0) = v;
    return m;
}

} // namespace

Tensor Tensor::leaf(Matrix value, bool requires_grad)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

const Matrix& Tensor::value() const
{
    if (!node_) {
        throw UsageError("access to an undefined tensor");
    }
    return node_->value;
}

Matrix& Tensor::mutable_value()
{
    if (!node_) {
        throw UsageError("access to an undefined tensor");
    }
    return node_->value;
}

Matrix Tensor::grad() const
{
    const Matrix& v = value();
    if (node_->grad.size() == 0) {
        return Matrix::Zero(v.rows(), v.cols());
    }
    return node_->grad;
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() != 0; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::zero_grad()
{
    if (node_) {
        node_->grad.resize(0, 0);
    }
}

double Tensor::item() const
{
    const Matrix& v = value();
    if (v.rows() != 1 || v.cols() != 1) {
        throw UsageError("item() on a non-scalar tensor");
    }
    return v(0, 0);
}

Tensor make_op(Matrix value, std::vector<Tensor> parents,
               std::function<void(const Matrix&, std::span<Matrix*>)> vjp)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    for (const Tensor& p : parents) {
        if (!p.defined()) {
            throw UsageError("op input is an undefined tensor");
        }
        node->requires_grad = node->requires_grad || p.requires_grad();
    }
    if (node->requires_grad) {
        node->parents.reserve(parents.size());
        for (const Tensor& p : parents) {
            node->parents.push_back(p.node());
        }
        node->vjp = std::move(vjp);
    }
    return Tensor(std::move(node));
}

void backward(const Tensor& root)
{
    if (!root.defined() || root.rows() != 1 || root.cols() != 1) {
        throw UsageError("backward() needs a scalar (1x1) root");
    }
    Node* top = root.node().get();
    if (!top->requires_grad) {
        return;
    }
    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(top, 0);
    seen.insert(top);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior gradients are scratch; leaves keep accumulating.
    for (Node* n : order) {
        if (!n->parents.empty()) {
            n->grad.resize(0, 0);
        }
    }
    ensure_grad(*top);
    top->grad(0, 0) += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->parents.empty() || n->grad.size() == 0) {
            continue;
        }
        std::vector<Matrix*> pg(n->parents.size(), nullptr);
        for (std::size_t i = 0; i < n->parents.size(); ++i) {
            if (n->parents[i]->requires_grad) {
                ensure_grad(*n->parents[i]);
                pg[i] = &n->parents[i]->grad;
            }
        }
        n->vjp(n->grad, pg);
    }
    for (Node* n : order) {
        if (!n->parents.empty()) {
            n->grad.resize(0, 0);
        }
    }
}

Tensor matmul(const Tensor& a, const Tensor& b)
{
    if (a.cols() != b.rows()) {
        throw ConfigError("matmul: inner dimensions differ");
    }
    Matrix av = a.value(), bv = b.value();
    return make_op(av * bv, {a, b}, [av, bv](const Matrix& g, std::span<Matrix*> pg) {
        if (pg[0]) {
            pg[0]->noalias() += g * bv.transpose();
        }
        if (pg[1]) {
            pg[1]->noalias() += av.transpose() * g;
        }
    });
}

Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias)
{
    if (x.cols() != weight.cols()) {
        throw ConfigError("affine: input has " + std::to_string(x.cols()) + " columns, layer expects " +
                          std::to_string(weight.cols()));
    }
    if (bias.rows() != 1 || bias.cols() != weight.rows()) {
        throw ConfigError("affine: bias must be 1 x out");
    }
    Matrix y = x.value() * weight.value().transpose();
    y.rowwise() += bias.value().row(0);
    Matrix xv = x.value(), wv = weight.value();
    return make_op(std::move(y), {x, weight, bias}, [xv, wv](const Matrix& g, std::span<Matrix*> pg) {
        if (pg[0]) {
            pg[0]->noalias() += g * wv;
        }
        if (pg[1]) {
            pg[1]->noalias() += g.transpose() * xv;
        }
        if (pg[2]) {
            *pg[2] += g.colwise().sum();
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b)
{
    check_same_shape(a, b, "add");
    return make_op(a.value() + b.value(), {a, b}, [](const Matrix& g, std::span<Matrix*> pg) {
        if (pg[0]) {
            *pg[0] += g;
        }
        if (pg[1]) {
            *pg[1] += g;
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b)
{
    check_same_shape(a, b, "sub");
    return make_op(a.value() - b.value(), {a, b}, [](const Matrix& g, std::span<Matrix*> pg) {
        if (pg[0]) {
            *pg[0] += g;
        }
        if (pg[1]) {
            *pg[1] -= g;
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b)
{
    check_same_shape(a, b, "mul");
    Matrix av = a.value(), bv = b.value();
    return make_op(av.cwiseProduct(bv), {a, b}, [av, bv](const Matrix& g, std::span<Matrix*> pg) {
        if (pg[0]) {
            *pg[0] += g.cwiseProduct(bv);
        }
        if (pg[1]) {
            *pg[1] += g.cwiseProduct(av);
        }
    });
}

Tensor scale(const Tensor& a, double s)
{
    return make_op(a.value() * s, {a}, [s](const Matrix& g, std::span<Matrix*> pg) { *pg[0] += s * g; });
}

Tensor leaky_relu(const Tensor& x, double slope)
{
    const Matrix& xv = x.value();
    Matrix y = xv.unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
    Matrix d = xv.unaryExpr([slope](double v) { return v > 0.0 ? 1.0 : slope; });
    return make_op(std::move(y), {x}, [d = std::move(d)](const Matrix& g, std::span<Matrix*> pg) {
        *pg[0] += g.cwiseProduct(d);
    });
}

Tensor clamp(const Tensor& x, double lo, double hi)
{
    const Matrix& xv = x.value();
    Matrix y = xv.cwiseMax(lo).cwiseMin(hi);
    Matrix d = xv.unaryExpr([lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
    return make_op(std::move(y), {x}, [d = std::move(d)](const Matrix& g, std::span<Matrix*> pg) {
        *pg[0] += g.cwiseProduct(d);
    });
}

Tensor tanh(const Tensor& x)
{
    Matrix y = x.value().array().tanh().matrix();
    Matrix d = (1.0 - y.array().square()).matrix();
    return make_op(std::move(y), {x}, [d = std::move(d)](const Matrix& g, std::span<Matrix*> pg) {
        *pg[0] += g.cwiseProduct(d);
    });
}

Tensor slice_cols(const Tensor& x, Eigen::Index offset, Eigen::Index n)
{
    if (offset < 0 || n < 0 || offset + n > x.cols()) {
        throw ConfigError("slice_cols: range out of bounds");
    }
    return make_op(x.value().middleCols(offset, n), {x}, [offset, n](const Matrix& g, std::span<Matrix*> pg) {
        pg[0]->middleCols(offset, n) += g;
    });
}

Tensor abs_mean(const Tensor& x)
{
    const Matrix& xv = x.value();
    const double count = static_cast<double>(xv.size());
    if (count == 0) {
        throw ConfigError("abs_mean of an empty tensor");
    }
    Matrix sgn = xv.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
    return make_op(scalar(xv.cwiseAbs().sum() / count), {x},
                   [sgn = std::move(sgn), count](const Matrix& g, std::span<Matrix*> pg) {
                       *pg[0] += (g(0, 0) / count) * sgn;
                   });
}

Tensor sum_squares(const Tensor& x)
{
    Matrix xv = x.value();
    return make_op(scalar(xv.squaredNorm()), {x},
                   [xv](const Matrix& g, std::span<Matrix*> pg) { *pg[0] += (2.0 * g(0, 0)) * xv; });
}

Tensor sum(const Tensor& x)
{
    return make_op(scalar(x.value().sum()), {x}, [](const Matrix& g, std::span<Matrix*> pg) {
        pg[0]->array() += g(0, 0);
    });
}

Tensor custom(const Tensor& x, Matrix value, std::function<Matrix(const Matrix&)> vjp)
{
    const Eigen::Index r = x.rows(), c = x.cols();
    return make_op(std::move(value), {x}, [vjp = std::move(vjp), r, c](const Matrix& g, std::span<Matrix*> pg) {
        Matrix gx = vjp(g);
        if (gx.rows() != r || gx.cols() != c) {
            throw UsageError("custom op vjp returned a gradient of the wrong shape");
        }
        *pg[0] += gx;
    });
}

// ---------------------------------------------------------------------------
// Mlp

namespace {
std::array<int, Mlp::kLayers + 1> layer_dims(int in, int hidden, int out)
{
    return {in, hidden, hidden, hidden, hidden, out};
}
} // namespace

Mlp::Mlp(int input_dim, int hidden_dim, int output_dim, Rng& rng, double slope)
    : input_dim_(input_dim), hidden_dim_(hidden_dim), output_dim_(output_dim), slope_(slope)
{
    if (input_dim < 1 || hidden_dim < 1 || output_dim < 1) {
        throw ConfigError("Mlp dimensions must be positive");
    }
    const auto dims = layer_dims(input_dim, hidden_dim, output_dim);
    for (int l = 0; l < kLayers; ++l) {
        const int fan_in = dims[l], fan_out = dims[l + 1];
        // Layers feeding the rectifier use its gain; the linear output layer uses 1.
        const double gain = l + 1 < kLayers ? std::sqrt(2.0 / (1.0 + slope * slope)) : 1.0;
        const double bound = gain * std::sqrt(3.0 / fan_in);
        Matrix w(fan_out, fan_in);
        for (int i = 0; i < fan_out; ++i) {
            for (int j = 0; j < fan_in; ++j) {
                w(i, j) = rng.uniform(-bound, bound);
            }
        }
        weights_.push_back(Tensor::leaf(std::move(w)));
        biases_.push_back(Tensor::leaf(Matrix::Zero(1, fan_out)));
    }
}

Mlp Mlp::zeros(int input_dim, int hidden_dim, int output_dim, double slope)
{
    if (input_dim < 1 || hidden_dim < 1 || output_dim < 1) {
        throw ConfigError("Mlp dimensions must be positive");
    }
    Mlp net;
    net.input_dim_ = input_dim;
    net.hidden_dim_ = hidden_dim;
    net.output_dim_ = output_dim;
    net.slope_ = slope;
    const auto dims = layer_dims(input_dim, hidden_dim, output_dim);
    for (int l = 0; l < kLayers; ++l) {
        net.weights_.push_back(Tensor::leaf(Matrix::Zero(dims[l + 1], dims[l])));
        net.biases_.push_back(Tensor::leaf(Matrix::Zero(1, dims[l + 1])));
    }
    return net;
}

void Mlp::check_input(Eigen::Index cols) const
{
    if (weights_.empty()) {
        throw UsageError("Mlp is not initialised");
    }
    if (cols != input_dim_) {
        throw ConfigError("Mlp input has " + std::to_string(cols) + " features, expected " +
                          std::to_string(input_dim_));
    }
}

Tensor Mlp::forward(const Tensor& x) const
{
    check_input(x.cols());
    Tensor h = x;
    for (int l = 0; l < kLayers; ++l) {
        h = affine(h, weights_[l], biases_[l]);
        if (l + 1 < kLayers) {
            h = leaky_relu(h, slope_);
        }
    }
    return h;
}

Matrix Mlp::forward(const Matrix& x) const
{
    check_input(x.cols());
    Matrix h = x;
    for (int l = 0; l < kLayers; ++l) {
        Matrix z = h * weights_[l].value().transpose();
        z.rowwise() += biases_[l].value().row(0);
        if (l + 1 < kLayers) {
            const double a = slope_;
            h = z.unaryExpr([a](double v) { return v > 0.0 ? v : a * v; });
        } else {
            h = std::move(z);
        }
    }
    return h;
}

std::vector<Tensor> Mlp::parameters() const
{
    std::vector<Tensor> out;
    for (int l = 0; l < static_cast<int>(weights_.size()); ++l) {
        out.push_back(weights_[l]);
        out.push_back(biases_[l]);
    }
    return out;
}

std::size_t Mlp::num_parameters() const
{
    std::size_t n = 0;
    for (const Tensor& t : parameters()) {
        n += static_cast<std::size_t>(t.value().size());
    }
    return n;
}

void Mlp::zero_grad()
{
    for (Tensor& t : weights_) {
        t.zero_grad();
    }
    for (Tensor& t : biases_) {
        t.zero_grad();
    }
}

Mlp Mlp::clone() const
{
    Mlp out;
    out.input_dim_ = input_dim_;
    out.hidden_dim_ = hidden_dim_;
    out.output_dim_ = output_dim_;
    out.slope_ = slope_;
    for (const Tensor& t : weights_) {
        out.weights_.push_back(Tensor::leaf(t.value()));
    }
    for (const Tensor& t : biases_) {
        out.biases_.push_back(Tensor::leaf(t.value()));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adam

void adam_step(AdamState& state, std::span<Matrix* const> params, std::span<const Matrix* const> grads,
               std::span<const double> lr_scale)
{
    if (params.size() != grads.size()) {
        throw ConfigError("adam_step: parameter and gradient lists differ in length");
    }
    if (!lr_scale.empty() && lr_scale.size() != params.size()) {
        throw ConfigError("adam_step: lr_scale must have one entry per parameter buffer");
    }
    if (state.m.empty()) {
        for (const Matrix* p : params) {
            state.m.push_back(Matrix::Zero(p->rows(), p->cols()));
            state.v.push_back(Matrix::Zero(p->rows(), p->cols()));
        }
    }
    if (state.m.size() != params.size()) {
        throw ConfigError("adam_step: parameter list changed between steps");
    }
    const AdamConfig& c = state.config;
    ++state.step;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& p = *params[i];
        const Matrix& g = *grads[i];
        if (g.rows() != p.rows() || g.cols() != p.cols() || state.m[i].rows() != p.rows() ||
            state.m[i].cols() != p.cols()) {
            throw ConfigError("adam_step: shape mismatch in buffer " + std::to_string(i));
        }
        const double lr = c.lr * (lr_scale.empty() ? 1.0 : lr_scale[i]);
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g.cwiseAbs2();
        p.array() -= lr * (state.m[i].array() / bc1) / ((state.v[i].array() / bc2).sqrt() + c.eps);
    }
}

void adam_step(AdamState& state, std::span<Mlp* const> nets)
{
    std::vector<Tensor> tensors;
    for (Mlp* net : nets) {
        for (Tensor& t : net->parameters()) {
            tensors.push_back(t);
        }
    }
    std::vector<Matrix> grads;
    grads.reserve(tensors.size());
    for (const Tensor& t : tensors) {
        grads.push_back(t.grad());
    }
    std::vector<Matrix*> p;
    std::vector<const Matrix*> g;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        p.push_back(&tensors[i].mutable_value());
        g.push_back(&grads[i]);
    }
    adam_step(state, p, g);
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {
constexpr char kMagic[8] = {'M', 'A', 'P', 'E', 'D', 'I', 'T', '1'};

void write_block(std::ostream& os, const Matrix& m)
{
    // Row-major on disk.
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            const double v = m(i, j);
            os.write(reinterpret_cast<const char*>(&v), sizeof v);
        }
    }
}

void read_block(std::istream& is, Matrix& m)
{
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            double v;
            if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
                throw FormatError("checkpoint truncated inside a weight block");
            }
            m(i, j) = v;
        }
    }
}
} // namespace

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& header, std::span<const Mlp* const> nets)
{
    nlohmann::json h = header;
    h["nets"] = nlohmann::json::array();
    for (const Mlp* net : nets) {
        h["nets"].push_back({{"input", net->input_dim()},
                             {"hidden", net->hidden_dim()},
                             {"output", net->output_dim()},
                             {"slope", net->slope()},
                             {"activation", net->activation()}});
    }
    const std::string text = h.dump();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw ConfigError("cannot open " + path.string() + " for writing");
    }
    os.write(kMagic, sizeof kMagic);
    const std::uint64_t len = text.size();
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const Mlp* net : nets) {
        for (int l = 0; l < Mlp::kLayers; ++l) {
            write_block(os, net->weight(l).value());
            write_block(os, net->bias(l).value());
        }
    }
    if (!os) {
        throw ConfigError("failed writing " + path.string());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw ConfigError("cannot open checkpoint " + path.string());
    }
    char magic[8];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw FormatError(path.string() + " is not a MAPEDIT1 checkpoint");
    }
    std::uint64_t len = 0;
    if (!is.read(reinterpret_cast<char*>(&len), sizeof len) || len > (1u << 26)) {
        throw FormatError("checkpoint header length is invalid");
    }
    std::string text(len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) {
        throw FormatError("checkpoint truncated inside the header");
    }
    Checkpoint ck;
    try {
        ck.header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    if (!ck.header.contains("nets") || !ck.header["nets"].is_array()) {
        throw FormatError("checkpoint header lacks the network list");
    }
    for (const auto& spec : ck.header["nets"]) {
        Mlp net = Mlp::zeros(spec.at("input").get<int>(), spec.at("hidden").get<int>(), spec.at("output").get<int>(),
                             spec.at("slope").get<double>());
        for (int l = 0; l < Mlp::kLayers; ++l) {
            read_block(is, net.weight(l).mutable_value());
            read_block(is, net.bias(l).mutable_value());
        }
        ck.nets.push_back(std::move(net));
    }
    if (is.peek() != std::char_traits<char>::eof()) {
        throw FormatError("checkpoint has trailing bytes");
    }
    return ck;
}

} // namespace mapedit::nn
