#include "mapedit/renderer.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <numeric>

using namespace mapedit;
using namespace mapedit::render;
using morph::MorphParams;
using mapedit::testing::desk_basis;
using mapedit::testing::random_params;

namespace {

double seg_dist2(double px, double py, double ax, double ay, double bx, double by)
{
    const double dx = bx - ax, dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double qx = ax + t * dx - px, qy = ay + t * dy - py;
    return qx * qx + qy * qy;
}

// Every face against one pixel, no culling; shading from the closed-form band-0 term only
// (neutral lighting), normals unused.
Eigen::Vector3d oracle_pixel(const MorphParams& p, const morph::BasisModel& b, const Camera& cam,
                             const SoftRasterConfig& cfg, int px, int py)
{
    const int nv = b.num_vertices();
    std::vector<Eigen::Vector3d> pos(nv), col(nv);
    const Eigen::Matrix3d r = morph::rotation_matrix(p.phi);
    for (int v = 0; v < nv; ++v) {
        Eigen::Vector3d s(b.mean_shape[3 * v], b.mean_shape[3 * v + 1], b.mean_shape[3 * v + 2]);
        pos[v] = r * s + p.t;
        for (int c = 0; c < 3; ++c) {
            const double albedo = std::clamp(b.mean_tex[3 * v + c], 0.0, 1.0);
            col[v][c] = std::clamp(albedo * p.gamma[c] * (0.5 / std::sqrt(kPi)), 0.0, 1.0);
        }
    }
    const double x = px + 0.5, y = py + 0.5;
    struct Hit {
        double cov, z;
        Eigen::Vector3d color;
    };
    std::vector<Hit> hits;
    double transmit = 1.0;
    for (const auto& f : b.faces) {
        double sx[3], sy[3], z = 0.0;
        Eigen::Vector3d color = Eigen::Vector3d::Zero();
        for (int k = 0; k < 3; ++k) {
            const Eigen::Vector3d& v = pos[f[k]];
            const double d = cam.distance - v.z();
            sx[k] = cam.cx + cam.focal * v.x() / d;
            sy[k] = cam.cy - cam.focal * v.y() / d;
            z += (cam.zfar - d) / (cam.zfar - cam.znear) / 3.0;
            color += col[f[k]] / 3.0;
        }
        double d2 = std::numeric_limits<double>::infinity();
        int pos_side = 0, neg_side = 0;
        for (int k = 0; k < 3; ++k) {
            const int j = (k + 1) % 3;
            d2 = std::min(d2, seg_dist2(x, y, sx[k], sy[k], sx[j], sy[j]));
            const double cross = (sx[j] - sx[k]) * (y - sy[k]) - (sy[j] - sy[k]) * (x - sx[k]);
            (cross >= 0 ? pos_side : neg_side)++;
        }
        const bool inside = pos_side == 3 || neg_side == 3;
        const double s = inside ? d2 : -d2;
        const double cov = 1.0 / (1.0 + std::exp(-s / cfg.sigma));
        transmit *= 1.0 - cov;
        if (cov > 1e-12) {
            hits.push_back({cov, z, color});
        }
    }
    if (hits.empty()) {
        return cfg.background;
    }
    double zmax = -1e300;
    for (const auto& h : hits) {
        zmax = std::max(zmax, h.z);
    }
    double wsum = 0.0;
    Eigen::Vector3d acc = Eigen::Vector3d::Zero();
    for (const auto& h : hits) {
        const double w = h.cov * std::exp((h.z - zmax) / cfg.gamma_agg);
        wsum += w;
        acc += w * h.color;
    }
    const double alpha = 1.0 - transmit;
    return alpha * (acc / wsum) + (1.0 - alpha) * cfg.background;
}

struct Scene {
    Camera camera;
    SoftRasterConfig config;
    explicit Scene(int size) : camera(Camera::square(size)), config(SoftRasterConfig::defaults_for(camera)) {}
};

} // namespace

TEST(Camera, DefaultsFollowImageSize)
{
    const Camera c = Camera::square(64);
    EXPECT_DOUBLE_EQ(c.focal, 224.0);
    EXPECT_DOUBLE_EQ(c.cx, 32.0);
    const SoftRasterConfig cfg = SoftRasterConfig::defaults_for(c);
    EXPECT_NEAR(cfg.sigma, 1e-4 * (64.0 * 64.0 * 2.0), 1e-12);
    EXPECT_DOUBLE_EQ(cfg.gamma_agg, 1e-2);
    Camera bad = c;
    bad.focal = 0.0;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Render, PixelMatchesBruteForceOracle)
{
    const Scene s(16);
    const auto& b = desk_basis();
    const MorphParams p = MorphParams::neutral(b.dims);
    const Image img = render::render(p, b, s.camera, s.config);
    for (auto [px, py] : {std::pair{8, 8}, std::pair{5, 9}, std::pair{11, 4}}) {
        const Eigen::Vector3d want = oracle_pixel(p, b, s.camera, s.config, px, py);
        for (int c = 0; c < 3; ++c) {
            EXPECT_NEAR(img.at(py, px, c), want[c], 1e-6) << px << "," << py << " channel " << c;
        }
    }
}

TEST(Render, PosedPixelMatchesOracle)
{
    const Scene s(16);
    const auto& b = desk_basis();
    MorphParams p = MorphParams::neutral(b.dims);
    p.phi = Eigen::Vector3d(0.2, -0.4, 0.1);
    p.t = Eigen::Vector3d(0.05, -0.03, 0.2);
    const Image img = render::render(p, b, s.camera, s.config);
    for (int py = 2; py < 16; py += 5) {
        for (int px = 3; px < 16; px += 4) {
            const Eigen::Vector3d want = oracle_pixel(p, b, s.camera, s.config, px, py);
            for (int c = 0; c < 3; ++c) {
                EXPECT_NEAR(img.at(py, px, c), want[c], 1e-6);
            }
        }
    }
}

TEST(Render, DeterministicAndBehindCameraIsBackground)
{
    const Scene s(32);
    const auto& b = desk_basis();
    Rng rng(1);
    const MorphParams p = random_params(rng, b.dims);
    EXPECT_EQ(render::render(p, b, s.camera, s.config).data, render::render(p, b, s.camera, s.config).data);

    MorphParams behind = p;
    behind.t = Eigen::Vector3d(0.0, 0.0, 20.0); // past the camera centre at z = 10
    SoftRasterConfig grey = s.config;
    grey.background = Eigen::Vector3d(0.2, 0.3, 0.4);
    const Image img = render::render(behind, b, s.camera, grey);
    for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) {
            EXPECT_EQ(img.at(y, x, 0), 0.2);
            EXPECT_EQ(img.at(y, x, 2), 0.4);
        }
    }
}

TEST(Render, FaceOrderDoesNotMatter)
{
    const Scene s(24);
    morph::BasisModel b = desk_basis();
    Rng rng(2);
    const MorphParams p = random_params(rng, b.dims);
    const Image a = render::render(p, b, s.camera, s.config);
    std::vector<std::size_t> order(b.faces.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size() - 1; i > 0; --i) {
        std::swap(order[i], order[rng.below(i + 1)]);
    }
    std::vector<morph::Face> shuffled;
    for (auto i : order) {
        shuffled.push_back(b.faces[i]);
    }
    b.faces = shuffled;
    const Image c = render::render(p, b, s.camera, s.config);
    EXPECT_LT(mean_abs_diff(a, c), 1e-12);
}

TEST(Rasterizer, LargerSigmaPullsCoverageTowardHalf)
{
    // One big triangle; pixel (8, 4) sits just outside its hypotenuse.
    const Camera cam = Camera::square(16);
    ScreenMesh m;
    m.xy.resize(3, 2);
    m.xy << 7.0, 0.0, 16.0, 0.0, 16.0, 16.0;
    m.depth = Eigen::Vector3d::Constant(10.0);
    m.znorm = Eigen::Vector3d::Constant(0.5);
    m.colors = morph::PointCloud::Ones(3, 3);
    m.faces = {{0, 1, 2}};
    double previous = 0.0;
    for (double sigma : {0.05, 0.2, 1.0, 5.0, 50.0}) {
        SoftRasterConfig cfg;
        cfg.sigma = sigma;
        cfg.cutoff = 1e9;
        SoftRasterizer r(cam, cfg);
        const double alpha = r.forward(m).at(4, 8, 0); // white on black: pixel value = coverage
        EXPECT_GT(alpha, previous);
        EXPECT_LT(alpha, 0.5);
        previous = alpha;
    }
    EXPECT_GT(previous, 0.45);
}

TEST(RenderVjp, ZeroCotangentGivesZeroGradient)
{
    const Scene s(16);
    const auto& b = desk_basis();
    Rng rng(3);
    const Eigen::VectorXd g = render_vjp(random_params(rng, b.dims), b, s.camera, s.config, Image(16, 16));
    EXPECT_EQ(g.cwiseAbs().maxCoeff(), 0.0);
}

TEST(RenderVjp, MatchesFiniteDifferences)
{
    for (std::uint64_t seed : {101u, 102u, 103u}) {
        const auto r = mapedit::testing::check_render_gradient(seed);
        EXPECT_GT(r.active, 40);
        EXPECT_GE(r.pass_fraction(), 0.95) << "seed " << seed << " worst " << r.worst_rel;
    }
}

TEST(RenderVjp, SaturatedLightingHasNoGradient)
{
    const Scene s(16);
    const auto& b = desk_basis();
    MorphParams p = MorphParams::neutral(b.dims);
    for (int c = 0; c < 3; ++c) {
        p.gamma[c] = 50.0; // every channel clamps at 1
    }
    Image cot(16, 16);
    for (double& v : cot.data) {
        v = 1.0;
    }
    const Eigen::VectorXd g = render_vjp(p, b, s.camera, s.config, cot);
    const auto r = morph::block_range(b.dims, morph::Block::Lighting);
    EXPECT_EQ(g.segment(r.offset, r.size).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Landmarks, ProjectionMatchesPinholeOracle)
{
    const auto& b = desk_basis();
    const Camera cam = Camera::square(64);
    Rng rng(4);
    const MorphParams p = random_params(rng, b.dims);
    const LandmarkProjection lp = project_landmarks(p, b, cam);
    const morph::Mesh posed = morph::pose_transform(morph::build_mesh(p, b), p.phi, p.t);
    EXPECT_EQ(lp.num_invalid, 0);
    for (int i = 0; i < morph::kNumLandmarks; ++i) {
        const Eigen::Vector3d v = posed.vertices.row(b.landmark_indices[i]);
        const double d = cam.distance - v.z();
        EXPECT_NEAR(lp.points(i, 0), cam.cx + cam.focal * v.x() / d, 1e-9);
        EXPECT_NEAR(lp.points(i, 1), cam.cy - cam.focal * v.y() / d, 1e-9);
    }
}

TEST(Landmarks, TranslationShiftsByFocalOverDepth)
{
    const auto& b = desk_basis();
    const Camera cam = Camera::square(64);
    MorphParams p = MorphParams::neutral(b.dims);
    const LandmarkProjection a = project_landmarks(p, b, cam);
    const double delta = 0.1;
    p.t.x() = delta;
    const LandmarkProjection c = project_landmarks(p, b, cam);
    for (int i = 0; i < morph::kNumLandmarks; ++i) {
        const double depth = cam.distance - b.mean_shape[3 * b.landmark_indices[i] + 2];
        EXPECT_NEAR(c.points(i, 0) - a.points(i, 0), cam.focal * delta / depth, 1e-9);
        EXPECT_NEAR(c.points(i, 1), a.points(i, 1), 1e-12);
    }
}

TEST(Landmarks, OpticalAxisHitsPrincipalPoint)
{
    const Camera cam = Camera::square(64);
    morph::PointCloud v(3, 3);
    v << 0, 0, 1, 1, 0, 0, 0, 1, 0;
    const ScreenMesh s = project_mesh(v, morph::PointCloud::Zero(3, 3), std::vector<morph::Face>{{0, 1, 2}}, cam);
    EXPECT_DOUBLE_EQ(s.xy(0, 0), cam.cx);
    EXPECT_DOUBLE_EQ(s.xy(0, 1), cam.cy);
}

TEST(Landmarks, VjpMatchesFiniteDifferences)
{
    const auto& b = desk_basis();
    const Camera cam = Camera::square(64);
    Rng rng(5);
    const MorphParams p = random_params(rng, b.dims);
    Eigen::Matrix<double, morph::kNumLandmarks, 2, Eigen::RowMajor> cot;
    for (int i = 0; i < cot.size(); ++i) {
        cot.data()[i] = rng.uniform(-1, 1);
    }
    const Eigen::VectorXd g = project_landmarks_vjp(p, b, cam, cot);
    const Eigen::VectorXd x = p.flatten();
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        Eigen::VectorXd up = x, dn = x;
        up[i] += 1e-6;
        dn[i] -= 1e-6;
        const double fu = (project_landmarks(MorphParams::unflatten(b.dims, up), b, cam).points.cwiseProduct(cot)).sum();
        const double fd = (project_landmarks(MorphParams::unflatten(b.dims, dn), b, cam).points.cwiseProduct(cot)).sum();
        EXPECT_NEAR(g[i], (fu - fd) / 2e-6, 1e-5 * std::max(1.0, std::abs(g[i])));
    }
}

TEST(Visibility, FacingAndBackfacingScores)
{
    const Camera cam = Camera::square(32);
    // A single small triangle facing the camera, plus an isolated vertex whose normal points away.
    morph::PointCloud v(4, 3), n(4, 3);
    v << -0.1, -0.1, 0, 0.1, -0.1, 0, 0, 0.1, 0, 0.5, 0.5, 0;
    n << 0, 0, 1, 0, 0, 1, 0, 0, 1, 0, 0, -1;
    const Visibility vis = visibility(v, n, std::vector<morph::Face>{{0, 1, 2}}, cam);
    EXPECT_NEAR(vis.score[2], 1.0, 1e-3); // direction to the camera is almost exactly +z near the axis
    EXPECT_EQ(vis.score[3], 0.0);
}

TEST(Visibility, SphereHemisphereOracle)
{
    // The synthetic head at the neutral pose: vertices with a camera-facing normal and
    // positive z should be the visible set, up to the silhouette band.
    const auto& b = desk_basis();
    const Camera cam = Camera::square(64);
    const MorphParams p = MorphParams::neutral(b.dims);
    const Visibility vis = visibility(p, b, cam);
    const PosedGeometry g = posed_geometry(p, b);
    int disagree = 0;
    for (int v = 0; v < b.num_vertices(); ++v) {
        const Eigen::Vector3d to_cam = Eigen::Vector3d(0, 0, cam.distance) - g.vertices.row(v).transpose();
        const bool oracle = g.normals.row(v).dot(to_cam) > 0.0 && g.vertices(v, 2) > 0.0;
        disagree += oracle != (vis.score[v] > 0.0);
    }
    EXPECT_LE(disagree, static_cast<int>(0.02 * b.num_vertices()));
}

TEST(Image, BilinearSamplingAndMeanAbsDiff)
{
    Image img(2, 1);
    img.at(0, 0, 0) = 0.0;
    img.at(0, 1, 0) = 1.0;
    EXPECT_NEAR(img.sample_bilinear(1.0, 0.5)[0], 0.5, 1e-12);
    EXPECT_NEAR(img.sample_bilinear(0.5, 0.5)[0], 0.0, 1e-12);
    EXPECT_NEAR(img.sample_bilinear(-3.0, 0.5)[0], 0.0, 1e-12); // clamps
    Image other(2, 1);
    EXPECT_NEAR(mean_abs_diff(img, other), 1.0 / 6.0, 1e-12);
}
