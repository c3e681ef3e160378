#include "mapedit/png_io.hpp"
#include "mapedit/uv_completion.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace mapedit;
using namespace mapedit::uv;
using mapedit::testing::desk_basis;

namespace {

const Camera& cam64()
{
    static const Camera c = Camera::square(64);
    return c;
}

const map::ToyGenerator& generator()
{
    static const map::ToyGenerator gen(desk_basis(), cam64(), SoftRasterConfig::defaults_for(cam64()),
                                       map::GeneratorConfig{});
    return gen;
}

const UvRaster& raster128()
{
    static const UvRaster r(desk_basis(), 128);
    return r;
}

const map::MapEditNets& tiny_nets()
{
    static const map::MapEditNets nets = [] {
        map::TrainConfig c;
        c.iterations = 20;
        c.hidden = 32;
        return map::train(generator(), c).nets;
    }();
    return nets;
}

MorphParams frontal(const map::LatentCode& w)
{
    MorphParams p = generator().params_for(w);
    p.phi.setZero();
    return p;
}

// A hand-built unwrap with constant colour and visibility on the chart.
ViewUnwrap flat_unwrap(const UvRaster& r, const Eigen::Vector3d& color, double vis)
{
    const int n = r.resolution();
    ViewUnwrap u;
    u.colors = Image(n, n);
    u.visibility.assign(static_cast<std::size_t>(n) * n, 0.0);
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            if (r.texel(x, y)) {
                for (int c = 0; c < 3; ++c) {
                    u.colors.at(y, x, c) = color[c];
                }
                u.visibility[static_cast<std::size_t>(y) * n + x] = vis;
            }
        }
    }
    return u;
}

} // namespace

TEST(ViewSpec, DefaultsParseAndValidate)
{
    const ViewSpec d = ViewSpec::defaults();
    ASSERT_EQ(d.views.size(), 6u);
    EXPECT_EQ(d.views[0], (View{-40, 0}));
    EXPECT_EQ(d.views[5], (View{0, 20}));
    EXPECT_EQ(ViewSpec::parse("default").views, d.views);
    const ViewSpec p = ViewSpec::parse("0:0, 30:-10");
    ASSERT_EQ(p.views.size(), 2u);
    EXPECT_EQ(p.views[1], (View{30, -10}));
    EXPECT_THROW(ViewSpec::parse("30"), ConfigError);
    EXPECT_THROW(ViewSpec::parse(""), ConfigError);
    EXPECT_THROW(ViewSpec::parse("50:0").validate(map::EditRanges{}), ConfigError);
    EXPECT_NO_THROW(d.validate(map::EditRanges{}));
}

TEST(UvRaster, TexelsCarryValidBarycentrics)
{
    const UvRaster& r = raster128();
    EXPECT_GT(r.chart_texels(), 128 * 128 / 4);
    int seen = 0;
    for (int y = 0; y < 128; y += 3) {
        for (int x = 0; x < 128; x += 3) {
            const auto& hit = r.texel(x, y);
            if (!hit) {
                continue;
            }
            ++seen;
            EXPECT_NEAR(hit->bary.sum(), 1.0, 1e-12);
            EXPECT_GE(hit->bary.minCoeff(), -1e-12);
            // The barycentric uv reproduces the texel centre.
            const auto& f = desk_basis().faces[hit->face];
            Eigen::Vector2d uv = Eigen::Vector2d::Zero();
            for (int k = 0; k < 3; ++k) {
                uv += hit->bary[k] * desk_basis().uv_coords.row(f[k]).transpose();
            }
            EXPECT_NEAR(uv.x(), (x + 0.5) / 128, 1e-9);
            EXPECT_NEAR(uv.y(), (y + 0.5) / 128, 1e-9);
            const auto again = r.locate(uv);
            ASSERT_TRUE(again.has_value());
        }
    }
    EXPECT_GT(seen, 100);
}

TEST(Unwrap, LandmarkVertexSamplesTheProjectedPixel)
{
    const auto& b = desk_basis();
    Rng rng(31);
    const auto w = map::sample_latent(rng, 1, map::LatentShape{}).front();
    const MorphParams p = generator().params_for(w);
    const Image img = render::render(p, b, cam64(), generator().raster());
    const render::LandmarkProjection lp = render::project_landmarks(p, b, cam64());
    int checked = 0;
    for (int i = 0; i < morph::kNumLandmarks; i += 5) {
        const int v = b.landmark_indices[i];
        for (std::size_t fi = 0; fi < b.faces.size(); ++fi) {
            const auto& f = b.faces[fi];
            const int k = f[0] == v ? 0 : (f[1] == v ? 1 : (f[2] == v ? 2 : -1));
            if (k < 0) {
                continue;
            }
            UvRaster::Hit hit;
            hit.face = static_cast<int>(fi);
            hit.bary[k] = 1.0;
            const SurfaceSample s = sample_surface(img, p, b, cam64(), hit);
            const Eigen::Vector3d want = img.sample_bilinear(lp.points(i, 0), lp.points(i, 1));
            EXPECT_LE((s.color - want).cwiseAbs().maxCoeff(), 1.0 / 255.0);
            ++checked;
            break;
        }
    }
    EXPECT_GE(checked, 10);
}

TEST(Unwrap, UniformImageAndBackfacingTexels)
{
    const auto& b = desk_basis();
    const Image grey(64, 64, Eigen::Vector3d(0.3, 0.5, 0.7));
    // Turned far enough that part of the chart faces away from the camera.
    MorphParams p = MorphParams::neutral(b.dims);
    p.phi[1] = deg2rad(75.0);
    const ViewUnwrap u = unwrap(grey, p, b, cam64(), raster128());
    const render::PosedGeometry g = render::posed_geometry(p, b);
    int visible = 0, back = 0;
    for (int y = 0; y < 128; ++y) {
        for (int x = 0; x < 128; ++x) {
            const auto& hit = raster128().texel(x, y);
            const double vis = u.visibility[static_cast<std::size_t>(y) * 128 + x];
            if (!hit) {
                EXPECT_EQ(vis, 0.0);
                continue;
            }
            if (vis > 0.0) {
                ++visible;
                EXPECT_NEAR(u.colors.at(y, x, 0), 0.3, 1e-12);
                EXPECT_NEAR(u.colors.at(y, x, 2), 0.7, 1e-12);
            }
            // Every corner facing away from the camera: the texel must be invisible.
            const auto& f = b.faces[hit->face];
            bool away = true;
            for (int k = 0; k < 3; ++k) {
                const Eigen::Vector3d to_cam =
                    Eigen::Vector3d(0, 0, cam64().distance) - g.vertices.row(f[k]).transpose();
                away = away && g.normals.row(f[k]).dot(to_cam) <= 0.0;
            }
            if (away) {
                ++back;
                EXPECT_EQ(vis, 0.0);
            }
        }
    }
    EXPECT_GT(visible, 1000);
    EXPECT_GT(back, 200);
}

TEST(Blend, SingleViewOwnsEveryCoveredTexel)
{
    const UvRaster& r = raster128();
    const ViewUnwrap u = flat_unwrap(r, Eigen::Vector3d(0.2, 0.4, 0.6), 0.5);
    const UvAtlas a = blend({u}, r);
    EXPECT_EQ(a.hole_texels, 0);
    for (std::size_t i = 0; i < a.covered.size(); ++i) {
        if (a.covered[i]) {
            EXPECT_EQ(a.masks[0][i], 1.0);
            EXPECT_EQ(a.blended.data[3 * i + 1], 0.4);
        }
    }
}

TEST(Blend, DominantViewWinsAndTiesGoToTheFirst)
{
    const UvRaster& r = raster128();
    const ViewUnwrap a = flat_unwrap(r, Eigen::Vector3d(1, 0, 0), 0.9);
    const ViewUnwrap b = flat_unwrap(r, Eigen::Vector3d(0, 1, 0), 0.4);
    const UvAtlas ab = blend({b, a}, r);
    for (std::size_t i = 0; i < ab.covered.size(); ++i) {
        if (ab.covered[i]) {
            EXPECT_EQ(ab.masks[1][i], 1.0);
            EXPECT_EQ(ab.blended.data[3 * i], 1.0);
        }
    }
    const UvAtlas tie = blend({b, flat_unwrap(r, Eigen::Vector3d(0, 0, 1), 0.4)}, r);
    for (std::size_t i = 0; i < tie.covered.size(); ++i) {
        if (tie.covered[i]) {
            EXPECT_EQ(tie.masks[0][i], 1.0);
        }
    }
}

TEST(Blend, PartitionOfUnityIsExactOnRealViews)
{
    const auto& b = desk_basis();
    const auto& gen = generator();
    Rng rng(32);
    const auto w = map::sample_latent(rng, 1, map::LatentShape{}).front();
    std::vector<ViewUnwrap> unwraps;
    std::vector<View> views;
    for (const View& v : ViewSpec::defaults().views) {
        MorphParams p = gen.params_for(w);
        p.phi[0] = deg2rad(v.pitch_deg);
        p.phi[1] = deg2rad(v.yaw_deg);
        unwraps.push_back(unwrap(render::render(p, b, cam64(), gen.raster()), p, b, cam64(), raster128()));
        views.push_back(v);
    }
    const UvAtlas a = blend(unwraps, raster128(), views);
    int covered = 0, seams = 0;
    for (std::size_t i = 0; i < a.covered.size(); ++i) {
        double s = 0.0;
        int owners = 0;
        for (const auto& m : a.masks) {
            s += m[i];
            owners += m[i] > 0.0;
            EXPECT_GE(m[i], 0.0);
            EXPECT_LE(m[i], 1.0);
        }
        if (a.covered[i]) {
            ++covered;
            EXPECT_EQ(s, 1.0);
            seams += owners > 1;
        } else {
            EXPECT_EQ(s, 0.0);
        }
    }
    EXPECT_EQ(covered + a.hole_texels, a.chart_texels);
    EXPECT_GT(seams, 0); // feathering actually mixes views somewhere
    EXPECT_LE(a.hole_fraction(), 0.05);
    EXPECT_EQ(a.metadata()["views"].size(), 6u);
    EXPECT_THROW(blend({}, raster128()), ConfigError);
}

TEST(Rerender, UniformGreyAtlasGivesGreyFace)
{
    const auto& b = desk_basis();
    const UvRaster& r = raster128();
    const UvAtlas a = blend({flat_unwrap(r, Eigen::Vector3d::Constant(0.5), 1.0)}, r);
    const MorphParams p = MorphParams::neutral(b.dims);
    SoftRasterConfig cfg = SoftRasterConfig::defaults_for(cam64());
    const RerenderResult rr = rerender_check(a, p, b, cam64(), cfg);
    EXPECT_EQ(rr.hole_vertices, 0);
    // Across the facial region the picture equals a mesh painted grey directly. Only the
    // silhouette differs, where off-chart vertices at the back fall back to the background
    // (they still leak a depth-softmax weight of order 1e-7 into the interior).
    const Image direct =
        render::render_with_colors(p, b, morph::PointCloud::Constant(b.dims.vertices, 3, 0.5), cam64(), cfg);
    for (int y = 24; y < 40; ++y) {
        for (int x = 24; x < 40; ++x) {
            for (int c = 0; c < 3; ++c) {
                EXPECT_NEAR(rr.image.at(y, x, c), direct.at(y, x, c), 1e-5);
            }
            EXPECT_NEAR(rr.image.at(y, x, 0), 0.5, 0.02);
        }
    }
}

TEST(Rerender, FrontalRoundTrip)
{
    const auto& b = desk_basis();
    const auto& gen = generator();
    Rng rng(33);
    const MorphParams p = frontal(map::sample_latent(rng, 1, map::LatentShape{}).front());
    const Image img = render::render(p, b, cam64(), gen.raster());
    const UvAtlas a = blend({unwrap(img, p, b, cam64(), raster128())}, raster128());
    const RerenderResult rr = rerender_check(a, p, b, cam64(), gen.raster());
    EXPECT_LE(render::mean_abs_diff(rr.image, img), 0.02);
}

TEST(Rerender, MultiviewBeatsFrontalOnlyAtHeldOutYaw)
{
    const auto& b = desk_basis();
    const auto& gen = generator();
    Rng rng(34);
    const auto w = map::sample_latent(rng, 1, map::LatentShape{}).front();
    auto posed = [&](double yaw) {
        MorphParams p = gen.params_for(w);
        p.phi[0] = 0.0;
        p.phi[1] = deg2rad(yaw);
        return p;
    };
    auto view_unwrap = [&](double yaw) {
        const MorphParams p = posed(yaw);
        return unwrap(render::render(p, b, cam64(), gen.raster()), p, b, cam64(), raster128());
    };
    std::vector<ViewUnwrap> many;
    for (double yaw : {-40.0, -20.0, 0.0, 20.0, 40.0}) {
        many.push_back(view_unwrap(yaw));
    }
    const MorphParams held = posed(15.0);
    const Image truth = render::render(held, b, cam64(), gen.raster());
    const double multi = render::mean_abs_diff(rerender_check(blend(many, raster128()), held, b, cam64(), gen.raster()).image, truth);
    const double single = render::mean_abs_diff(rerender_check(blend({view_unwrap(0.0)}, raster128()), held, b, cam64(), gen.raster()).image, truth);
    EXPECT_LT(multi, single);
}

TEST(Multiview, OneSamplePerViewInOrder)
{
    Rng rng(35);
    const auto w = map::sample_latent(rng, 1, map::LatentShape{}).front();
    const ViewSpec spec = ViewSpec::parse("20:0,-10:5,20:0");
    const auto samples = multiview(generator(), tiny_nets(), w, spec, map::DirectionSign::Reversed,
                                   map::EstimatorBackend::Oracle);
    ASSERT_EQ(samples.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(samples[i].view, spec.views[i]);
        EXPECT_EQ(samples[i].fit_l1, 0.0);
    }
    EXPECT_EQ(samples[0].image.data, samples[2].image.data);
    EXPECT_NE(samples[0].image.data, samples[1].image.data);
}

TEST(Export, WritesMasksAtlasAndMetadata)
{
    const UvRaster r(desk_basis(), 32);
    const UvAtlas a = blend({flat_unwrap(r, Eigen::Vector3d::Constant(0.5), 1.0),
                             flat_unwrap(r, Eigen::Vector3d::Constant(0.2), 0.5)},
                            r, {View{0, 0}, View{20, 0}});
    const auto dir = mapedit::testing::scratch_dir("uv_export");
    export_atlas(dir, a);
    for (const char* f : {"mask_0.png", "mask_1.png", "uf.png", "atlas.json"}) {
        EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
    }
    const Image uf = io::read_png(dir / "uf.png");
    EXPECT_EQ(uf.width, 32);
    const auto meta = nlohmann::json::parse(io::read_file(dir / "atlas.json"));
    EXPECT_EQ(meta["resolution"], 32);
    EXPECT_EQ(meta["views"].size(), 2u);
    EXPECT_TRUE(meta.contains("hole_fraction"));
}
