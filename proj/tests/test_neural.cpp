#include "mapedit/neural.hpp"
#include "mapedit/png_io.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace mapedit;
using namespace mapedit::nn;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0)
{
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = rng.uniform(-scale, scale);
    }
    return m;
}

// Loop-by-loop forward pass: no Eigen products, no graph.
Matrix naive_forward(const Mlp& net, const Matrix& x)
{
    Matrix h = x;
    for (int l = 0; l < Mlp::kLayers; ++l) {
        const Matrix& w = net.weight(l).value();
        const Matrix& b = net.bias(l).value();
        Matrix out(h.rows(), w.rows());
        for (Eigen::Index r = 0; r < h.rows(); ++r) {
            for (Eigen::Index o = 0; o < w.rows(); ++o) {
                double s = b(0, o);
                for (Eigen::Index i = 0; i < w.cols(); ++i) {
                    s += h(r, i) * w(o, i);
                }
                if (l + 1 < Mlp::kLayers && s < 0.0) {
                    s *= net.slope();
                }
                out(r, o) = s;
            }
        }
        h = out;
    }
    return h;
}

} // namespace

TEST(Mlp, ForwardMatchesLoopOracle)
{
    Rng rng(1);
    const Mlp net(7, 11, 5, rng);
    const Matrix x = random_matrix(rng, 4, 7, 2.0);
    const Matrix want = naive_forward(net, x);
    EXPECT_LT((net.forward(x) - want).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((net.forward(Tensor::constant(x)).value() - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Mlp, ShapesAndParameterCount)
{
    Rng rng(2);
    const Mlp net(3, 8, 2, rng);
    EXPECT_EQ(net.parameters().size(), 10u);
    EXPECT_EQ(net.num_parameters(), 3u * 8 + 8 + 3 * (8 * 8 + 8) + 8 * 2 + 2);
    EXPECT_EQ(net.weight(0).rows(), 8);
    EXPECT_EQ(net.weight(4).rows(), 2);
    EXPECT_THROW(net.forward(Matrix::Zero(1, 4)), ConfigError);
    for (int l = 0; l < Mlp::kLayers; ++l) {
        EXPECT_EQ(net.bias(l).value().cwiseAbs().maxCoeff(), 0.0);
        // Kaiming-uniform bound sqrt(6 / fan_in)
        EXPECT_LE(net.weight(l).value().cwiseAbs().maxCoeff(), std::sqrt(6.0 / net.weight(l).cols()) + 1e-12);
    }
}

TEST(Mlp, ZerosAndIdentity)
{
    const Mlp z = Mlp::zeros(4, 6, 3);
    EXPECT_EQ(z.forward(Matrix::Constant(2, 4, 5.0)).cwiseAbs().maxCoeff(), 0.0);

    // Identity through the width-4 hidden layers when the input is non-negative.
    Mlp id = Mlp::zeros(4, 4, 4);
    for (int l = 0; l < Mlp::kLayers; ++l) {
        id.weight(l).mutable_value() = Matrix::Identity(4, 4);
    }
    Rng rng(3);
    const Matrix x = random_matrix(rng, 3, 4).cwiseAbs();
    EXPECT_LT((id.forward(x) - x).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Mlp, CloneIsIndependent)
{
    Rng rng(4);
    Mlp a(2, 4, 2, rng);
    Mlp b = a.clone();
    b.weight(0).mutable_value()(0, 0) += 1.0;
    EXPECT_NE(a.weight(0).value()(0, 0), b.weight(0).value()(0, 0));
}

TEST(Autodiff, ProductGradient)
{
    Rng rng(5);
    const Matrix xv = random_matrix(rng, 3, 2);
    Tensor x = Tensor::leaf(xv);
    backward(sum(mul(x, x)));
    EXPECT_LT((x.grad() - 2.0 * xv).cwiseAbs().maxCoeff(), 1e-15);

    // Gradients accumulate until cleared.
    backward(sum(mul(x, x)));
    EXPECT_LT((x.grad() - 4.0 * xv).cwiseAbs().maxCoeff(), 1e-15);
    x.zero_grad();
    EXPECT_EQ(x.grad().cwiseAbs().maxCoeff(), 0.0);
}

TEST(Autodiff, AbsMeanSubgradient)
{
    Matrix v(1, 4);
    v << -2.0, 0.0, 3.0, -0.5;
    Tensor x = Tensor::leaf(v);
    const Tensor l = abs_mean(x);
    EXPECT_DOUBLE_EQ(l.item(), 5.5 / 4.0);
    backward(l);
    Matrix want(1, 4);
    want << -0.25, 0.0, 0.25, -0.25;
    EXPECT_EQ(x.grad(), want);
}

TEST(Autodiff, ClampAndLeakyRelu)
{
    Matrix v(1, 3);
    v << -2.0, 0.5, 2.0;
    Tensor x = Tensor::leaf(v);
    backward(sum(clamp(x, -1.0, 1.0)));
    EXPECT_EQ(x.grad(), (Matrix(1, 3) << 0.0, 1.0, 0.0).finished());
    x.zero_grad();
    backward(sum(leaky_relu(x, 0.1)));
    EXPECT_NEAR(x.grad()(0, 0), 0.1, 1e-15);
    EXPECT_EQ(x.grad()(0, 2), 1.0);
}

TEST(Autodiff, NonScalarRootIsRejected)
{
    Tensor x = Tensor::leaf(Matrix::Ones(2, 2));
    EXPECT_THROW(backward(x), UsageError);
}

TEST(Autodiff, MlpGradientMatchesFiniteDifferences)
{
    Rng rng(6);
    Mlp net(5, 9, 4, rng);
    const Matrix x = random_matrix(rng, 3, 5);
    const Matrix target = random_matrix(rng, 3, 4);
    Tensor xt = Tensor::leaf(x);
    auto loss_of = [&](const Mlp& m, const Tensor& in) {
        const Tensor y = m.forward(in);
        // A smooth loss plus a slice and tanh so more ops are exercised.
        return add(sum_squares(sub(y, Tensor::constant(target))), sum(tanh(slice_cols(y, 1, 2))));
    };
    backward(loss_of(net, xt));

    const double h = 1e-6;
    double worst = 0.0;
    for (int l = 0; l < Mlp::kLayers; ++l) {
        for (Tensor* p : {&net.weight(l), &net.bias(l)}) {
            const Matrix g = p->grad();
            for (Eigen::Index i = 0; i < g.size(); ++i) {
                double& w = p->mutable_value().data()[i];
                const double keep = w;
                w = keep + h;
                const double up = loss_of(net, Tensor::constant(x)).item();
                w = keep - h;
                const double dn = loss_of(net, Tensor::constant(x)).item();
                w = keep;
                worst = std::max(worst, std::abs((up - dn) / (2 * h) - g.data()[i]));
            }
        }
    }
    EXPECT_LT(worst, 1e-4);

    // Input gradient as well.
    const Matrix gx = xt.grad();
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        Matrix up = x, dn = x;
        up.data()[i] += h;
        dn.data()[i] -= h;
        const double fd = (loss_of(net, Tensor::constant(up)).item() - loss_of(net, Tensor::constant(dn)).item()) / (2 * h);
        EXPECT_NEAR(gx.data()[i], fd, 1e-4);
    }
}

TEST(Autodiff, CustomOpForwardsCotangent)
{
    Tensor x = Tensor::leaf(Matrix::Constant(1, 2, 3.0));
    const Tensor y = custom(x, x.value() * 2.0, [](const Matrix& g) { return Matrix(g * 2.0); });
    backward(sum(y));
    EXPECT_EQ(x.grad(), Matrix::Constant(1, 2, 2.0));
}

TEST(Adam, ZeroGradientLeavesParametersAlone)
{
    AdamState st;
    Matrix w = Matrix::Constant(2, 2, 1.5);
    const Matrix g = Matrix::Zero(2, 2);
    Matrix* pw = &w;
    const Matrix* pg = &g;
    for (int i = 0; i < 5; ++i) {
        adam_step(st, std::span<Matrix* const>(&pw, 1), std::span<const Matrix* const>(&pg, 1));
    }
    EXPECT_EQ(w, Matrix::Constant(2, 2, 1.5));
    EXPECT_EQ(st.step, 5);
}

TEST(Adam, FirstStepMovesByLearningRate)
{
    AdamState st(AdamConfig{0.01, 0.9, 0.999, 1e-8});
    Matrix w(1, 3);
    w << 0.0, 0.0, 0.0;
    Matrix g(1, 3);
    g << 5.0, -0.001, 200.0;
    Matrix* pw = &w;
    const Matrix* pg = &g;
    adam_step(st, std::span<Matrix* const>(&pw, 1), std::span<const Matrix* const>(&pg, 1));
    // Bias correction makes the first update -lr * sign(g) (up to eps).
    EXPECT_NEAR(w(0, 0), -0.01, 1e-8);
    EXPECT_NEAR(w(0, 1), 0.01, 1e-5);
    EXPECT_NEAR(w(0, 2), -0.01, 1e-8);

    const double scale = 0.5;
    AdamState st2(AdamConfig{0.01, 0.9, 0.999, 1e-8});
    Matrix w2 = Matrix::Zero(1, 3);
    Matrix* pw2 = &w2;
    adam_step(st2, std::span<Matrix* const>(&pw2, 1), std::span<const Matrix* const>(&pg, 1),
              std::span<const double>(&scale, 1));
    EXPECT_NEAR(w2(0, 0), -0.005, 1e-8);
}

TEST(Adam, ConvergesOnQuadraticBowl)
{
    Rng rng(7);
    Mlp net = Mlp::zeros(1, 2, 1);
    // Only the output bias is free to matter: the loss is (b - 3)^2.
    AdamState st(AdamConfig{0.05});
    Mlp* nets[] = {&net};
    for (int i = 0; i < 2000; ++i) {
        net.zero_grad();
        const Tensor y = net.forward(Tensor::constant(Matrix::Zero(1, 1)));
        backward(sum_squares(sub(y, Tensor::constant(Matrix::Constant(1, 1, 3.0)))));
        adam_step(st, nets);
    }
    EXPECT_NEAR(net.bias(4).value()(0, 0), 3.0, 1e-3);
}

TEST(Checkpoint, RoundTripIsExact)
{
    Rng rng(8);
    const Mlp a(6, 10, 4, rng);
    const Mlp b(4, 10, 6, rng, 0.1);
    const auto dir = mapedit::testing::scratch_dir("nn_ckpt");
    const auto path = dir / "nets.bin";
    const Mlp* nets[] = {&a, &b};
    save_checkpoint(path, nlohmann::json{{"note", "x"}}, nets);
    const Checkpoint c = load_checkpoint(path);
    ASSERT_EQ(c.nets.size(), 2u);
    EXPECT_EQ(c.header["note"], "x");
    EXPECT_DOUBLE_EQ(c.nets[1].slope(), 0.1);
    const Matrix x = random_matrix(rng, 2, 6);
    EXPECT_EQ(c.nets[0].forward(x), a.forward(x));
    for (int l = 0; l < Mlp::kLayers; ++l) {
        EXPECT_EQ(c.nets[1].weight(l).value(), b.weight(l).value());
    }
}

TEST(Checkpoint, CorruptFilesAreRejected)
{
    const auto dir = mapedit::testing::scratch_dir("nn_bad");
    {
        std::ofstream(dir / "magic.bin") << "NOTMAGIC";
    }
    EXPECT_THROW(load_checkpoint(dir / "magic.bin"), FormatError);
    EXPECT_THROW(load_checkpoint(dir / "missing.bin"), ConfigError);

    Rng rng(9);
    const Mlp a(3, 5, 2, rng);
    const Mlp* nets[] = {&a};
    save_checkpoint(dir / "full.bin", nlohmann::json::object(), nets);
    const std::string bytes = io::read_file(dir / "full.bin");
    io::write_file(dir / "short.bin", bytes.substr(0, bytes.size() - 9));
    EXPECT_THROW(load_checkpoint(dir / "short.bin"), FormatError);
}
