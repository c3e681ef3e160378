#include "mapedit/map_edit.hpp"
#include "oracles.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <map>
#include <set>
#include <sstream>

using namespace mapedit;
using namespace mapedit::map;
using mapedit::testing::desk_basis;
using mapedit::testing::random_params;
using mapedit::testing::landmark_oracle;

namespace {

const ToyGenerator& desk_generator()
{
    static const Camera cam = Camera::square(32);
    static const ToyGenerator gen(desk_basis(), cam, SoftRasterConfig::defaults_for(cam), GeneratorConfig{});
    return gen;
}

LatentCode random_latent(Rng& rng, const LatentShape& s = {})
{
    return sample_latent(rng, 1, s).front();
}

TrainConfig tiny_train(int iters, std::uint64_t seed = 3)
{
    TrainConfig c;
    c.iterations = iters;
    c.hidden = 32;
    c.seed = seed;
    return c;
}

} // namespace

TEST(Losses, ParamAndLatentMatchLoopOracles)
{
    const auto& dims = desk_basis().dims;
    Rng rng(11);
    for (int n = 0; n < 100; ++n) {
        const MorphParams a = random_params(rng, dims), b = random_params(rng, dims);
        const Eigen::VectorXd fa = a.flatten(), fb = b.flatten();
        double s = 0.0;
        for (Eigen::Index i = 0; i < fa.size(); ++i) {
            s += std::abs(fa[i] - fb[i]);
        }
        EXPECT_NEAR(loss_param(a, b), s / fa.size(), 1e-12);

        const LatentCode w = random_latent(rng), v = random_latent(rng);
        double t = 0.0;
        for (int r = 0; r < w.rows(); ++r) {
            for (int c = 0; c < w.cols(); ++c) {
                t += std::abs(w(r, c) - v(r, c));
            }
        }
        EXPECT_NEAR(loss_latent(w, v), t / w.size(), 1e-12);
    }
    EXPECT_THROW(loss_latent(LatentCode::Zero(4, 32), LatentCode::Zero(4, 31)), ConfigError);
}

TEST(Losses, RegularizerMatchesOracle)
{
    const auto& dims = desk_basis().dims;
    Rng rng(12);
    for (int n = 0; n < 100; ++n) {
        const MorphParams p = random_params(rng, dims, 2.0);
        const RegWeights w{rng.uniform(0, 0.1), rng.uniform(0, 0.1), rng.uniform(0, 0.1)};
        double want = 0.0;
        for (int i = 0; i < p.alpha.size(); ++i) {
            want += w.alpha * p.alpha[i] * p.alpha[i];
        }
        for (int i = 0; i < p.beta.size(); ++i) {
            want += w.beta * p.beta[i] * p.beta[i];
        }
        for (int i = 0; i < p.delta.size(); ++i) {
            want += w.delta * p.delta[i] * p.delta[i];
        }
        EXPECT_NEAR(loss_reg(p, w), want, 1e-12);
    }
    EXPECT_THROW(loss_reg(MorphParams::neutral(dims), RegWeights{-1, 0, 0}), ConfigError);
}

TEST(Losses, LandmarkLossMatchesOracle)
{
    const auto& b = desk_basis();
    const Camera cam = Camera::square(64);
    Rng rng(13);
    for (int n = 0; n < 100; ++n) {
        const MorphParams p = random_params(rng, b.dims), q = random_params(rng, b.dims);
        const MorphParams e = random_params(rng, b.dims), f = random_params(rng, b.dims);
        const LandmarkLoss l = loss_landmark(p, q, e, f, b, cam);
        const double want = landmark_oracle(p, q, b, cam) + landmark_oracle(e, f, b, cam);
        EXPECT_NEAR(l.value, want, 1e-9 * std::max(1.0, want));
        EXPECT_EQ(l.invalid, 0);
    }
}

TEST(Losses, LandmarkLossRejectsDegeneratePose)
{
    const auto& b = desk_basis();
    const Camera cam = Camera::square(64);
    MorphParams p = MorphParams::neutral(b.dims);
    MorphParams behind = p;
    behind.t.z() = 30.0;
    EXPECT_THROW(loss_landmark(p, behind, p, p, b, cam), DegeneratePoseError);
}

TEST(Losses, RenderedLossIsMeanImageDifference)
{
    const auto& b = desk_basis();
    const Camera cam = Camera::square(16);
    const SoftRasterConfig cfg = SoftRasterConfig::defaults_for(cam);
    Rng rng(14);
    for (int n = 0; n < 100; ++n) {
        const MorphParams p = random_params(rng, b.dims), q = random_params(rng, b.dims);
        const Image a = render::render(p, b, cam, cfg), c = render::render(q, b, cam, cfg);
        double s = 0.0;
        for (std::size_t i = 0; i < a.data.size(); ++i) {
            s += std::abs(a.data[i] - c.data[i]);
        }
        EXPECT_NEAR(loss_rendered(p, q, b, cam, cfg), s / a.data.size(), 1e-12);
    }
    EXPECT_EQ(loss_rendered(MorphParams::neutral(b.dims), MorphParams::neutral(b.dims), b, cam, cfg), 0.0);
}

TEST(Losses, TotalAppliesWeights)
{
    const LossComponents c{0.1, 0.2, 0.3, 4.0, 0.05};
    LossWeights w;
    w.ren = 2.0;
    w.p = 3.0;
    w.lat = 0.5;
    w.lm = 0.01;
    EXPECT_NEAR(loss_total(c, w), 0.2 + 0.6 + 0.15 + 0.04 + 0.05, 1e-15);
    w.reg = false;
    EXPECT_NEAR(loss_total(c, w), 0.2 + 0.6 + 0.15 + 0.04, 1e-15);
    EXPECT_EQ(LossWeights::from_json(w.to_json()).to_json(), w.to_json());
}

TEST(Latent, SamplingStatisticsAndFlattening)
{
    Rng rng(15);
    const auto codes = sample_latent(rng, 400, LatentShape{});
    double mean = 0.0, sq = 0.0;
    int n = 0;
    for (const auto& c : codes) {
        ASSERT_EQ(c.rows(), 4);
        ASSERT_EQ(c.cols(), 32);
        for (Eigen::Index i = 0; i < c.size(); ++i) {
            mean += c.data()[i];
            sq += c.data()[i] * c.data()[i];
            ++n;
        }
    }
    mean /= n;
    EXPECT_NEAR(mean, 0.0, 0.02);
    EXPECT_NEAR(sq / n - mean * mean, 1.0, 0.03);

    const Eigen::RowVectorXd flat = flatten_latent(codes[0]);
    EXPECT_EQ(flat[33], codes[0](1, 1)); // row-major
    EXPECT_EQ(unflatten_latent(flat, LatentShape{}), codes[0]);
    EXPECT_EQ(stack_latents({codes[0], codes[1]}).row(1), flatten_latent(codes[1]));
}

TEST(ChannelLayout, DeskAndWideLayouts)
{
    const ChannelLayout d = ChannelLayout::for_rows(4);
    EXPECT_EQ(d.pose, std::vector<int>{0});
    EXPECT_EQ(d.identity, std::vector<int>{3});
    const ChannelLayout w = ChannelLayout::for_rows(18);
    EXPECT_EQ(w.pose, (std::vector<int>{0, 1, 2, 3}));
    EXPECT_EQ(w.lighting, (std::vector<int>{8, 9}));
    std::set<int> all;
    for (const auto* rows : {&w.pose, &w.expression, &w.lighting, &w.identity}) {
        all.insert(rows->begin(), rows->end());
    }
    EXPECT_EQ(all.size(), 18u);
    EXPECT_THROW(ChannelLayout::for_rows(5), ConfigError);
}

TEST(Generator, ZeroLatentGivesSquashedBias)
{
    const ToyGenerator& gen = desk_generator();
    const GeneratorConfig& cfg = gen.config();
    const auto& dims = gen.basis().dims;
    const Eigen::VectorXd p = gen.params_for(LatentCode::Zero(4, 32)).flatten();
    auto expect_block = [&](morph::Block block, double center, double scale) {
        const auto r = morph::block_range(dims, block);
        for (int k = r.offset; k < r.offset + r.size; ++k) {
            EXPECT_NEAR(p[k], center + scale * std::tanh(gen.bias()[k]), 1e-15) << k;
        }
    };
    expect_block(morph::Block::Identity, 0.0, cfg.alpha_scale);
    expect_block(morph::Block::Texture, 0.0, cfg.beta_scale);
    expect_block(morph::Block::Expression, 0.0, cfg.delta_scale);
    const auto light = morph::block_range(dims, morph::Block::Lighting);
    for (int k = light.offset; k < light.offset + light.size; ++k) {
        const double center = k < light.offset + 3 ? cfg.light_level / morph::kShC0 : 0.0;
        EXPECT_NEAR(p[k], center + cfg.light_scale * std::tanh(gen.bias()[k]), 1e-15);
    }
    // No pose bias: the zero code looks straight at the camera.
    for (auto block : {morph::Block::Rotation, morph::Block::Translation}) {
        const auto r = morph::block_range(dims, block);
        EXPECT_EQ(p.segment(r.offset, r.size).cwiseAbs().maxCoeff(), 0.0);
    }
}

TEST(Generator, BlocksAreDrivenByTheirRows)
{
    const ToyGenerator& gen = desk_generator();
    Rng rng(16);
    const LatentCode w = random_latent(rng);
    const MorphParams base = gen.params_for(w);
    LatentCode moved = w;
    moved.row(0).array() += 0.7; // pose row
    const MorphParams p = gen.params_for(moved);
    EXPECT_EQ(p.alpha, base.alpha);
    EXPECT_EQ(p.beta, base.beta);
    EXPECT_EQ(p.delta, base.delta);
    EXPECT_EQ(p.gamma, base.gamma);
    EXPECT_GT((p.phi - base.phi).norm(), 1e-3);

    moved = w;
    moved.row(3).array() += 0.7; // identity row
    const MorphParams q = gen.params_for(moved);
    EXPECT_EQ(q.phi, base.phi);
    EXPECT_EQ(q.delta, base.delta);
    EXPECT_GT((q.alpha - base.alpha).norm(), 1e-3);
    EXPECT_GT((q.beta - base.beta).norm(), 1e-3);
}

TEST(Generator, PoseStaysWithinConfiguredRange)
{
    const ToyGenerator& gen = desk_generator();
    Rng rng(17);
    for (const auto& w : sample_latent(rng, 200, LatentShape{})) {
        const MorphParams p = gen.params_for(w);
        EXPECT_LT(std::abs(rad2deg(p.phi[1])), 40.0);
        EXPECT_LT(std::abs(rad2deg(p.phi[0])), 30.0);
        EXPECT_LT(std::abs(rad2deg(p.phi[2])), 8.0);
    }
}

TEST(Generator, VjpMatchesFiniteDifferences)
{
    const ToyGenerator& gen = desk_generator();
    Rng rng(18);
    const LatentCode w = random_latent(rng);
    Eigen::VectorXd cot(gen.basis().dims.param_size());
    for (Eigen::Index i = 0; i < cot.size(); ++i) {
        cot[i] = rng.uniform(-1, 1);
    }
    const Eigen::RowVectorXd g = gen.params_vjp(w, cot);
    const Eigen::RowVectorXd flat = flatten_latent(w);
    for (Eigen::Index i = 0; i < flat.size(); i += 7) {
        Eigen::RowVectorXd up = flat, dn = flat;
        up[i] += 1e-6;
        dn[i] -= 1e-6;
        const double fu = gen.params_for(unflatten_latent(up, LatentShape{})).flatten().dot(cot);
        const double fd = gen.params_for(unflatten_latent(dn, LatentShape{})).flatten().dot(cot);
        EXPECT_NEAR(g[i], (fu - fd) / 2e-6, 1e-7);
    }
}

TEST(Edits, ApplyEditTouchesOnlyItsBlock)
{
    const auto& dims = desk_basis().dims;
    Rng rng(19);
    const EditRanges ranges;
    for (int n = 0; n < 100; ++n) {
        const MorphParams p = random_params(rng, dims);
        const auto attr = static_cast<Attribute>(n % 3);
        const EditRequest req = sample_request(attr, p, rng, ranges);
        ASSERT_NO_THROW(validate_edit(req, dims, ranges));
        const MorphParams e = apply_edit(p, req);
        EXPECT_EQ(e.alpha, p.alpha);
        EXPECT_EQ(e.beta, p.beta);
        EXPECT_EQ(e.t, p.t);
        if (attr != Attribute::Pose) {
            EXPECT_EQ(e.phi, p.phi);
        } else {
            EXPECT_EQ(e.phi[2], p.phi[2]); // roll is never edited
            EXPECT_LE(std::abs(rad2deg(e.phi[1])), 40.0);
            EXPECT_LE(std::abs(rad2deg(e.phi[0])), 30.0);
        }
        if (attr != Attribute::Lighting) {
            EXPECT_EQ(e.gamma, p.gamma);
        } else {
            for (int i = 0; i < morph::kLightingSize; ++i) {
                const double offset = i < 3 ? ranges.light_band0_offset / morph::kShC0 : 0.0;
                EXPECT_LE(std::abs(e.gamma[i] - offset), ranges.light_half_width);
            }
        }
        if (attr != Attribute::Expression) {
            EXPECT_EQ(e.delta, p.delta);
        } else {
            int changed = 0;
            for (int i = 0; i < dims.exp; ++i) {
                changed += e.delta[i] != p.delta[i];
            }
            EXPECT_LE(changed, 2);
            ASSERT_EQ(req.expression.size(), 2u);
            EXPECT_NE(req.expression[0].first, req.expression[1].first);
        }
    }
}

TEST(Edits, AttributeFrequenciesAreUniform)
{
    const auto& dims = desk_basis().dims;
    Rng rng(20);
    std::map<Attribute, int> count;
    const MorphParams p = MorphParams::neutral(dims);
    const int n = 3000;
    for (int i = 0; i < n; ++i) {
        ++count[sample_edit(p, rng, EditRanges{}).attribute];
    }
    for (auto a : {Attribute::Pose, Attribute::Lighting, Attribute::Expression}) {
        const double f = static_cast<double>(count[a]) / n;
        EXPECT_GE(f, 0.30);
        EXPECT_LE(f, 0.37);
    }
}

TEST(Edits, ValidationNamesTheField)
{
    const auto& dims = desk_basis().dims;
    const EditRanges r;
    auto message = [&](const EditRequest& e) {
        try {
            validate_edit(e, dims, r);
        } catch (const ConfigError& err) {
            return std::string(err.what());
        }
        return std::string();
    };
    EXPECT_EQ(message(EditRequest::pose(deg2rad(40), deg2rad(-30))), "");
    EXPECT_EQ(message(EditRequest::pose(deg2rad(41), std::nullopt)).rfind("yaw", 0), 0u);
    EXPECT_EQ(message(EditRequest::pose(std::nullopt, deg2rad(31))).rfind("pitch", 0), 0u);
    EXPECT_EQ(message(EditRequest::pose(std::nullopt, std::nullopt)).rfind("targets", 0), 0u);
    EXPECT_EQ(message(EditRequest::light({1.0, 2.0})).rfind("lighting", 0), 0u);
    EXPECT_EQ(message(EditRequest::expr({})).rfind("expression", 0), 0u);
    EXPECT_EQ(message(EditRequest::expr({{dims.exp, 0.5}})).rfind("expression", 0), 0u);
    EXPECT_EQ(message(EditRequest::expr({{0, 0.5}, {1, 0.5}, {2, 0.5}})).rfind("expression", 0), 0u);
    EXPECT_EQ(parse_attribute("lighting"), Attribute::Lighting);
    EXPECT_THROW(parse_attribute("hair"), ConfigError);
}

TEST(Masks, ChannelMaskZeroesOtherRows)
{
    Rng rng(21);
    const LatentCode d = random_latent(rng);
    const LatentCode m = apply_channel_mask(d, {1, 2});
    EXPECT_EQ(m.row(1), d.row(1));
    EXPECT_EQ(m.row(2), d.row(2));
    EXPECT_EQ(m.row(0).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(m.row(3).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(apply_channel_mask(m, {1, 2}), m); // idempotent
    EXPECT_THROW(apply_channel_mask(d, {4}), ConfigError);
}

class TrainedNets : public ::testing::Test {
protected:
    static void SetUpTestSuite() { result_ = new TrainResult(train(desk_generator(), tiny_train(30))); }
    static void TearDownTestSuite()
    {
        delete result_;
        result_ = nullptr;
    }
    static TrainResult* result_;
};
TrainResult* TrainedNets::result_ = nullptr;

TEST_F(TrainedNets, LogHasOneRowPerIteration)
{
    ASSERT_EQ(result_->log.size(), 30u);
    EXPECT_EQ(result_->nets.iterations, 30);
    for (const auto& row : result_->log) {
        EXPECT_TRUE(std::isfinite(row.total));
        EXPECT_NEAR(row.total, loss_total(row.components, LossWeights{}), 1e-9 * std::max(1.0, row.total));
    }
    std::ostringstream csv;
    write_train_log_csv(csv, result_->log);
    const std::string text = csv.str();
    EXPECT_EQ(text.rfind("iter,", 0), 0u);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 31);
}

TEST_F(TrainedNets, TrainingIsDeterministic)
{
    const TrainResult again = train(desk_generator(), tiny_train(30));
    ASSERT_EQ(again.log.size(), result_->log.size());
    for (std::size_t i = 0; i < again.log.size(); ++i) {
        EXPECT_EQ(again.log[i].total, result_->log[i].total);
    }
    for (int l = 0; l < nn::Mlp::kLayers; ++l) {
        EXPECT_EQ(again.nets.mf.weight(l).value(), result_->nets.mf.weight(l).value());
    }
    const TrainResult other = train(desk_generator(), tiny_train(30, 4));
    EXPECT_NE(other.log.back().total, result_->log.back().total);
}

TEST_F(TrainedNets, NoOpEditHasZeroDirection)
{
    const MapEditNets& nets = result_->nets;
    Rng rng(22);
    const LatentCode w = random_latent(rng);
    const MorphParams p = nets.forward_params(w);
    // Re-requesting the current pose yields an edited parameter vector equal to M_f(w).
    const EditRequest same = EditRequest::pose(p.phi[1], p.phi[0]);
    const LatentCode d = extract_direction(nets, w, same, desk_generator().layout(), DirectionSign::Reversed);
    EXPECT_EQ(d.cwiseAbs().maxCoeff(), 0.0);
    const EditResult r = edit_image(desk_generator(), nets, w, same, DirectionSign::Reversed, false);
    EXPECT_EQ(r.image.data, desk_generator().generate(w).data);
}

TEST_F(TrainedNets, DirectionIsMaskedToTheAttributeRows)
{
    const MapEditNets& nets = result_->nets;
    const ChannelLayout& layout = desk_generator().layout();
    Rng rng(23);
    for (int n = 0; n < 20; ++n) {
        const LatentCode w = random_latent(rng);
        const auto attr = static_cast<Attribute>(n % 3);
        const EditRequest req = sample_request(attr, nets.forward_params(w), rng, EditRanges{});
        const LatentCode d = extract_direction(nets, w, req, layout, DirectionSign::Reversed);
        const auto& rows = rows_for(layout, attr);
        for (int r = 0; r < d.rows(); ++r) {
            if (std::find(rows.begin(), rows.end(), r) == rows.end()) {
                EXPECT_EQ(d.row(r).cwiseAbs().maxCoeff(), 0.0);
            }
        }
        EXPECT_EQ(apply_channel_mask(d, rows), d);

        // Paper and reversed conventions are exact negatives.
        const LatentCode dp = extract_direction(nets, w, req, layout, DirectionSign::Paper);
        EXPECT_EQ(dp, LatentCode(-d));
    }
}

TEST(Directions, UntrainedNetsAreRefused)
{
    const MapEditNets nets = MapEditNets::init(LatentShape{}, desk_basis().dims, 16, 1);
    EXPECT_THROW(extract_direction(nets, LatentCode::Zero(4, 32), EditRequest::pose(0.1, std::nullopt),
                                   desk_generator().layout(), DirectionSign::Reversed),
                 UsageError);
}

TEST(TrainConfig, JsonRoundTripAndValidation)
{
    TrainConfig c = tiny_train(17);
    c.weights.lat = 0.0;
    c.estimator = EstimatorBackend::Fit;
    const TrainConfig back = TrainConfig::from_json(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json());
    c.batch = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_EQ(parse_backend("oracle"), EstimatorBackend::Oracle);
    EXPECT_THROW(parse_backend("magic"), ConfigError);
}

TEST(Fit, RecoversGeneratedFace)
{
    const ToyGenerator& gen = desk_generator();
    Rng rng(24);
    const LatentCode w = random_latent(rng);
    const MorphParams truth = gen.params_for(w);
    const FitResult r = fit_params(gen.generate(w), gen.basis(), gen.camera(), gen.raster());
    EXPECT_TRUE(r.converged);
    EXPECT_LT(r.image_l1, 0.02);
    EXPECT_LE(r.steps, 500 * (1 + FitConfig{}.restarts));
    EXPECT_LT(std::abs(rad2deg(r.params.phi[1] - truth.phi[1])), 5.0);
    EXPECT_LT(std::abs(rad2deg(r.params.phi[0] - truth.phi[0])), 5.0);
}

TEST(Invert, ReducesImageError)
{
    const ToyGenerator& gen = desk_generator();
    Rng rng(25);
    const Image target = gen.generate(random_latent(rng));
    const double start = render::mean_abs_diff(gen.generate(LatentCode::Zero(4, 32)), target);
    const LatentCode w = invert(gen, target, InvertConfig{60, 0.05});
    EXPECT_LT(render::mean_abs_diff(gen.generate(w), target), start);
}
