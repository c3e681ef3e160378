#include "mapedit/uv_completion.hpp"

#include "mapedit/png_io.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <sstream>

namespace mapedit::uv {

ViewSpec ViewSpec::defaults()
{
    return ViewSpec{{{-40.0, 0.0}, {-20.0, 0.0}, {20.0, 0.0}, {40.0, 0.0}, {0.0, -20.0}, {0.0, 20.0}}};
}

ViewSpec ViewSpec::parse(const std::string& text)
{
    if (text == "default") {
        return defaults();
    }
    ViewSpec spec;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) {
            throw ConfigError("views: expected yaw:pitch, got '" + item + "'");
        }
        try {
            std::size_t used = 0;
            const std::string ys = item.substr(0, colon), ps = item.substr(colon + 1);
            View v;
            v.yaw_deg = std::stod(ys, &used);
            if (used != ys.size()) {
                throw std::invalid_argument(ys);
            }
            v.pitch_deg = std::stod(ps, &used);
            if (used != ps.size()) {
                throw std::invalid_argument(ps);
            }
            spec.views.push_back(v);
        } catch (const std::logic_error&) {
            throw ConfigError("views: cannot parse '" + item + "'");
        }
    }
    if (spec.views.empty()) {
        throw ConfigError("views: at least one yaw:pitch pair is required");
    }
    return spec;
}

void ViewSpec::validate(const map::EditRanges& ranges) const
{
    if (views.empty()) {
        throw ConfigError("views: at least one view is required");
    }
    for (const auto& v : views) {
        if (!std::isfinite(v.yaw_deg) || !std::isfinite(v.pitch_deg) || std::abs(v.yaw_deg) > ranges.yaw_max_deg ||
            std::abs(v.pitch_deg) > ranges.pitch_max_deg) {
            std::ostringstream os;
            os << "views: (" << v.yaw_deg << ", " << v.pitch_deg << ") is outside yaw +-" << ranges.yaw_max_deg
               << " / pitch +-" << ranges.pitch_max_deg;
            throw ConfigError(os.str());
        }
    }
}

nlohmann::json ViewSpec::to_json() const
{
    nlohmann::json out = nlohmann::json::array();
    for (const auto& v : views) {
        out.push_back({{"yaw_deg", v.yaw_deg}, {"pitch_deg", v.pitch_deg}});
    }
    return out;
}

std::vector<ViewSample> multiview(const map::ToyGenerator& gen, const map::MapEditNets& nets,
                                  const map::LatentCode& w, const ViewSpec& views, map::DirectionSign sign,
                                  map::EstimatorBackend backend, const map::FitConfig& fit)
{
    std::vector<ViewSample> out;
    out.reserve(views.views.size());
    for (const auto& v : views.views) {
        const auto edit = map::EditRequest::pose(deg2rad(v.yaw_deg), deg2rad(v.pitch_deg));
        const bool refit = backend == map::EstimatorBackend::Fit;
        map::EditResult r = map::edit_image(gen, nets, w, edit, sign, refit, fit);
        ViewSample s;
        s.view = v;
        if (refit) {
            s.params = r.achieved->params;
            s.fit_l1 = r.achieved->image_l1;
        } else {
            s.params = gen.params_for(r.w_edited);
        }
        s.image = std::move(r.image);
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// UV raster

namespace {

constexpr double kBaryEps = 1e-12;

std::optional<Eigen::Vector3d> barycentric(const Eigen::Vector2d& p, const Eigen::Vector2d& a,
                                           const Eigen::Vector2d& b, const Eigen::Vector2d& c)
{
    const double det = (b.x() - a.x()) * (c.y() - a.y()) - (c.x() - a.x()) * (b.y() - a.y());
    if (std::abs(det) < 1e-18) {
        return std::nullopt;
    }
    const double l1 = ((p.x() - a.x()) * (c.y() - a.y()) - (c.x() - a.x()) * (p.y() - a.y())) / det;
    const double l2 = ((b.x() - a.x()) * (p.y() - a.y()) - (p.x() - a.x()) * (b.y() - a.y())) / det;
    const double l0 = 1.0 - l1 - l2;
    if (l0 < -kBaryEps || l1 < -kBaryEps || l2 < -kBaryEps) {
        return std::nullopt;
    }
    return Eigen::Vector3d(l0, l1, l2);
}

Eigen::Vector2d uv_of(const BasisModel& basis, int v) { return basis.uv_coords.row(v).transpose(); }

} // namespace

UvRaster::UvRaster(const BasisModel& basis, int resolution)
    : basis_(&basis), resolution_(resolution), chart_(basis.uv_chart_faces())
{
    if (resolution <= 0) {
        throw ConfigError("uv resolution must be positive");
    }
    texels_.assign(static_cast<std::size_t>(resolution) * resolution, std::nullopt);
    const double r = resolution;
    for (int f : chart_) {
        const auto& face = basis.faces[f];
        const Eigen::Vector2d a = uv_of(basis, face[0]), b = uv_of(basis, face[1]), c = uv_of(basis, face[2]);
        const double umin = std::min({a.x(), b.x(), c.x()}), umax = std::max({a.x(), b.x(), c.x()});
        const double vmin = std::min({a.y(), b.y(), c.y()}), vmax = std::max({a.y(), b.y(), c.y()});
        const int x0 = std::max(0, static_cast<int>(std::floor(umin * r - 0.5)));
        const int x1 = std::min(resolution - 1, static_cast<int>(std::ceil(umax * r - 0.5)));
        const int y0 = std::max(0, static_cast<int>(std::floor(vmin * r - 0.5)));
        const int y1 = std::min(resolution - 1, static_cast<int>(std::ceil(vmax * r - 0.5)));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                auto& slot = texels_[static_cast<std::size_t>(y) * resolution + x];
                if (slot) {
                    continue; // first face in chart order keeps shared edges
                }
                const Eigen::Vector2d p((x + 0.5) / r, (y + 0.5) / r);
                if (auto bary = barycentric(p, a, b, c)) {
                    slot = Hit{f, *bary};
                    ++chart_texels_;
                }
            }
        }
    }
}

std::optional<UvRaster::Hit> UvRaster::locate(const Eigen::Vector2d& uv) const
{
    for (int f : chart_) {
        const auto& face = basis_->faces[f];
        if (auto bary = barycentric(uv, uv_of(*basis_, face[0]), uv_of(*basis_, face[1]), uv_of(*basis_, face[2]))) {
            return Hit{f, *bary};
        }
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Unwrap

namespace {

struct ViewContext {
    render::PosedGeometry posed;
    render::Visibility vis;
};

ViewContext make_context(const MorphParams& params, const BasisModel& basis, const Camera& camera)
{
    ViewContext ctx;
    ctx.posed = render::posed_geometry(params, basis);
    ctx.vis = render::visibility(ctx.posed.vertices, ctx.posed.normals, basis.faces, camera);
    return ctx;
}

SurfaceSample sample_with(const ViewContext& ctx, const Image& image, const BasisModel& basis, const Camera& camera,
                          const UvRaster::Hit& hit)
{
    const auto& face = basis.faces[hit.face];
    Eigen::RowVector3d point = Eigen::RowVector3d::Zero();
    double score = 0.0;
    for (int k = 0; k < 3; ++k) {
        point += hit.bary[k] * ctx.posed.vertices.row(face[k]);
        score += hit.bary[k] * ctx.vis.score[face[k]];
    }
    SurfaceSample s;
    const double d = camera.distance - point.z();
    if (d <= 1e-6) {
        return s;
    }
    const double u = camera.cx + camera.focal * point.x() / d;
    const double v = camera.cy - camera.focal * point.y() / d;
    if (u < 0.0 || v < 0.0 || u > camera.width || v > camera.height) {
        return s;
    }
    s.color = image.sample_bilinear(u, v);
    s.visibility = std::clamp(score, 0.0, 1.0);
    return s;
}

} // namespace

SurfaceSample sample_surface(const Image& image, const MorphParams& params, const BasisModel& basis,
                             const Camera& camera, const UvRaster::Hit& hit)
{
    return sample_with(make_context(params, basis, camera), image, basis, camera, hit);
}

ViewUnwrap unwrap(const Image& image, const MorphParams& params, const BasisModel& basis, const Camera& camera,
                  const UvRaster& raster)
{
    if (image.width != camera.width || image.height != camera.height) {
        throw ConfigError("unwrap: image does not match the camera resolution");
    }
    const int r = raster.resolution();
    const ViewContext ctx = make_context(params, basis, camera);
    ViewUnwrap out;
    out.colors = Image(r, r);
    out.visibility.assign(static_cast<std::size_t>(r) * r, 0.0);
    for (int y = 0; y < r; ++y) {
        for (int x = 0; x < r; ++x) {
            const auto& hit = raster.texel(x, y);
            if (!hit) {
                continue;
            }
            const SurfaceSample s = sample_with(ctx, image, basis, camera, *hit);
            for (int c = 0; c < 3; ++c) {
                out.colors.at(y, x, c) = s.color[c];
            }
            out.visibility[static_cast<std::size_t>(y) * r + x] = s.visibility;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Blend

namespace {

constexpr std::int64_t kWeightUnits = std::int64_t{1} << 20;

// Chessboard distance to the nearest texel with label `view`, capped at `cap`.
std::vector<int> label_distance(const std::vector<int>& labels, int view, int r, int cap)
{
    std::vector<int> dist(labels.size(), cap);
    std::deque<int> queue;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == view) {
            dist[i] = 0;
            queue.push_back(static_cast<int>(i));
        }
    }
    while (!queue.empty()) {
        const int i = queue.front();
        queue.pop_front();
        if (dist[i] + 1 >= cap) {
            continue;
        }
        const int x = i % r, y = i / r;
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                const int nx = x + dx, ny = y + dy;
                if (nx < 0 || ny < 0 || nx >= r || ny >= r) {
                    continue;
                }
                const int j = ny * r + nx;
                if (dist[j] > dist[i] + 1) {
                    dist[j] = dist[i] + 1;
                    queue.push_back(j);
                }
            }
        }
    }
    return dist;
}

} // namespace

UvAtlas blend(const std::vector<ViewUnwrap>& unwraps, const UvRaster& raster, const std::vector<View>& views,
              int feather)
{
    if (unwraps.empty()) {
        throw ConfigError("blend needs at least one view");
    }
    if (feather < 1) {
        throw ConfigError("feather width must be at least 1");
    }
    const int r = raster.resolution();
    const std::size_t n = static_cast<std::size_t>(r) * r;
    for (const auto& u : unwraps) {
        if (u.colors.width != r || u.colors.height != r || u.visibility.size() != n) {
            throw ConfigError("blend: all views must share the raster resolution");
        }
    }
    const int nviews = static_cast<int>(unwraps.size());

    UvAtlas atlas;
    atlas.resolution = r;
    atlas.views = views;
    atlas.chart_texels = raster.chart_texels();
    atlas.covered.assign(n, false);
    atlas.masks.assign(nviews, std::vector<double>(n, 0.0));
    atlas.blended = Image(r, r);
    for (const auto& u : unwraps) {
        atlas.maps.push_back(u.colors);
    }

    std::vector<int> labels(n, -1);
    for (std::size_t i = 0; i < n; ++i) {
        double best = 0.0;
        for (int k = 0; k < nviews; ++k) {
            if (unwraps[k].visibility[i] > best) {
                best = unwraps[k].visibility[i];
                labels[i] = k;
            }
        }
    }
    std::vector<std::vector<int>> dist;
    for (int k = 0; k < nviews; ++k) {
        dist.push_back(label_distance(labels, k, r, feather));
    }

    std::vector<double> raw(nviews);
    std::vector<std::int64_t> units(nviews);
    std::vector<int> order(nviews);
    for (int y = 0; y < r; ++y) {
        for (int x = 0; x < r; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * r + x;
            if (!raster.texel(x, y)) {
                continue;
            }
            if (labels[i] < 0) {
                ++atlas.hole_texels;
                continue;
            }
            atlas.covered[i] = true;
            double total = 0.0;
            for (int k = 0; k < nviews; ++k) {
                raw[k] = unwraps[k].visibility[i] > 0.0
                             ? std::max(0.0, 1.0 - static_cast<double>(dist[k][i]) / feather)
                             : 0.0;
                total += raw[k];
            }
            // Largest-remainder rounding to integer units that add up to kWeightUnits.
            std::int64_t assigned = 0;
            for (int k = 0; k < nviews; ++k) {
                units[k] = static_cast<std::int64_t>(std::floor(raw[k] / total * kWeightUnits));
                assigned += units[k];
            }
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                const double ra = raw[a] / total * kWeightUnits - units[a];
                const double rb = raw[b] / total * kWeightUnits - units[b];
                return ra > rb;
            });
            for (int j = 0; assigned < kWeightUnits; j = (j + 1) % nviews) {
                if (raw[order[j]] > 0.0) {
                    ++units[order[j]];
                    ++assigned;
                }
            }
            Eigen::Vector3d color = Eigen::Vector3d::Zero();
            for (int k = 0; k < nviews; ++k) {
                const double m = static_cast<double>(units[k]) / static_cast<double>(kWeightUnits);
                atlas.masks[k][i] = m;
                for (int c = 0; c < 3; ++c) {
                    color[c] += m * unwraps[k].colors.at(y, x, c);
                }
            }
            for (int c = 0; c < 3; ++c) {
                atlas.blended.at(y, x, c) = color[c];
            }
        }
    }
    return atlas;
}

nlohmann::json UvAtlas::metadata() const
{
    nlohmann::json v = nlohmann::json::array();
    for (const auto& view : views) {
        v.push_back({{"yaw_deg", view.yaw_deg}, {"pitch_deg", view.pitch_deg}});
    }
    return {{"resolution", resolution},  {"views", v},
            {"view_count", maps.size()}, {"chart_texels", chart_texels},
            {"hole_texels", hole_texels}, {"hole_fraction", hole_fraction()}};
}

// ---------------------------------------------------------------------------
// Re-render

RerenderResult rerender_check(const UvAtlas& atlas, const MorphParams& params, const BasisModel& basis,
                              const Camera& camera, const SoftRasterConfig& raster)
{
    const int r = atlas.resolution;
    if (r <= 0 || atlas.blended.width != r || atlas.covered.size() != static_cast<std::size_t>(r) * r) {
        throw ConfigError("rerender_check: atlas is empty or inconsistent");
    }
    const int nv = basis.dims.vertices;
    morph::PointCloud colors(nv, 3);
    std::vector<bool> hole(nv, false);
    for (int v = 0; v < nv; ++v) {
        // Bilinear read that only trusts covered texels.
        const double fx = std::clamp(basis.uv_coords(v, 0) * r - 0.5, 0.0, r - 1.0);
        const double fy = std::clamp(basis.uv_coords(v, 1) * r - 0.5, 0.0, r - 1.0);
        const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
        const int x1 = std::min(x0 + 1, r - 1), y1 = std::min(y0 + 1, r - 1);
        const double ax = fx - x0, ay = fy - y0;
        const std::array<std::pair<int, int>, 4> taps = {{{x0, y0}, {x1, y0}, {x0, y1}, {x1, y1}}};
        const std::array<double, 4> wts = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
        Eigen::Vector3d acc = Eigen::Vector3d::Zero();
        double wsum = 0.0;
        for (int k = 0; k < 4; ++k) {
            const auto [x, y] = taps[k];
            if (!atlas.covered[static_cast<std::size_t>(y) * r + x] || wts[k] <= 0.0) {
                continue;
            }
            for (int c = 0; c < 3; ++c) {
                acc[c] += wts[k] * atlas.blended.at(y, x, c);
            }
            wsum += wts[k];
        }
        if (wsum > 0.0) {
            colors.row(v) = (acc / wsum).transpose();
        } else {
            colors.row(v) = raster.background.transpose();
            hole[v] = true;
        }
    }
    RerenderResult out;
    out.image = render::render_with_colors(params, basis, colors, camera, raster);
    const render::Visibility vis = render::visibility(params, basis, camera);
    for (int v = 0; v < nv; ++v) {
        if (hole[v] && vis.score[v] > 0.0) {
            ++out.hole_vertices;
        }
    }
    return out;
}

void export_atlas(const std::filesystem::path& dir, const UvAtlas& atlas, const std::vector<ViewSample>& samples)
{
    std::filesystem::create_directories(dir);
    nlohmann::json meta = atlas.metadata();
    nlohmann::json files = {{"uf", "uf.png"}};
    const int r = atlas.resolution;
    for (std::size_t k = 0; k < atlas.masks.size(); ++k) {
        Image m(r, r);
        for (std::size_t i = 0; i < atlas.masks[k].size(); ++i) {
            for (int c = 0; c < 3; ++c) {
                m.data[3 * i + c] = atlas.masks[k][i];
            }
        }
        const std::string name = "mask_" + std::to_string(k) + ".png";
        io::write_png(dir / name, m);
        files["masks"].push_back(name);
    }
    for (std::size_t k = 0; k < samples.size(); ++k) {
        const std::string name = "view_" + std::to_string(k) + ".png";
        io::write_png(dir / name, samples[k].image);
        files["views"].push_back(name);
        meta["view_fit_l1"].push_back(samples[k].fit_l1);
        meta["view_achieved_deg"].push_back(
            {{"yaw", rad2deg(samples[k].params.yaw())}, {"pitch", rad2deg(samples[k].params.pitch())}});
    }
    io::write_png(dir / "uf.png", atlas.blended);
    meta["files"] = files;
    io::write_file(dir / "atlas.json", meta.dump(2) + "\n");
}

} // namespace mapedit::uv
