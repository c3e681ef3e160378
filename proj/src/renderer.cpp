#include "mapedit/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mapedit::render {

namespace {

constexpr double kMinDepth = 1e-6;

struct EdgeHit {
    double d2;
    double t;
    int edge; // segment (k, k+1 mod 3)
};

double cross2(double ax, double ay, double bx, double by) { return ax * by - ay * bx; }

// Squared distance from (px, py) to the nearest triangle edge plus an inside flag.
EdgeHit nearest_edge(const double* vx, const double* vy, double px, double py, bool& inside)
{
    EdgeHit best{std::numeric_limits<double>::infinity(), 0.0, 0};
    int positive = 0, negative = 0;
    for (int k = 0; k < 3; ++k) {
        const int k1 = (k + 1) % 3;
        const double ex = vx[k1] - vx[k], ey = vy[k1] - vy[k];
        const double wx = px - vx[k], wy = py - vy[k];
        const double side = cross2(ex, ey, wx, wy);
        positive += side > 0.0;
        negative += side < 0.0;
        const double len2 = ex * ex + ey * ey;
        double t = len2 > 0.0 ? (wx * ex + wy * ey) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double rx = wx - t * ex, ry = wy - t * ey;
        const double d2 = rx * rx + ry * ry;
        if (d2 < best.d2) {
            best = {d2, t, k};
        }
    }
    inside = (positive == 0 || negative == 0) && (positive + negative) > 0;
    return best;
}

} // namespace

Camera Camera::square(int size)
{
    Camera c;
    c.width = size;
    c.height = size;
    c.focal = 3.5 * size;
    c.cx = 0.5 * size;
    c.cy = 0.5 * size;
    return c;
}

void Camera::validate() const
{
    if (!(focal > 0.0)) {
        throw ConfigError("camera focal length must be positive");
    }
    if (width < 16 || height < 16) {
        throw ConfigError("camera image must be at least 16x16");
    }
    if (!(zfar > znear)) {
        throw ConfigError("camera zfar must exceed znear");
    }
}

Image::Image(int w, int h, const Eigen::Vector3d& fill)
    : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3), background(fill)
{
    for (std::size_t i = 0; i < data.size(); i += 3) {
        data[i] = fill[0];
        data[i + 1] = fill[1];
        data[i + 2] = fill[2];
    }
}

Eigen::Vector3d Image::sample_bilinear(double u, double v) const
{
    const double fx = std::clamp(u - 0.5, 0.0, static_cast<double>(width - 1));
    const double fy = std::clamp(v - 0.5, 0.0, static_cast<double>(height - 1));
    const int x0 = std::min(static_cast<int>(fx), width - 1);
    const int y0 = std::min(static_cast<int>(fy), height - 1);
    const int x1 = std::min(x0 + 1, width - 1);
    const int y1 = std::min(y0 + 1, height - 1);
    const double ax = fx - x0, ay = fy - y0;
    Eigen::Vector3d out;
    for (int c = 0; c < 3; ++c) {
        const double top = (1 - ax) * at(y0, x0, c) + ax * at(y0, x1, c);
        const double bottom = (1 - ax) * at(y1, x0, c) + ax * at(y1, x1, c);
        out[c] = (1 - ay) * top + ay * bottom;
    }
    return out;
}

double mean_abs_diff(const Image& a, const Image& b)
{
    if (!a.same_shape(b)) {
        throw ConfigError("image shapes differ");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        acc += std::abs(a.data[i] - b.data[i]);
    }
    return acc / static_cast<double>(a.data.size());
}

SoftRasterConfig SoftRasterConfig::defaults_for(const Camera& camera)
{
    SoftRasterConfig cfg;
    cfg.sigma = 1e-4 * (static_cast<double>(camera.width) * camera.width +
                        static_cast<double>(camera.height) * camera.height);
    cfg.gamma_agg = 1e-2;
    return cfg;
}

void SoftRasterConfig::validate() const
{
    if (!(sigma > 0.0) || !(gamma_agg > 0.0)) {
        throw ConfigError("soft raster sigma and gamma_agg must be positive");
    }
    if (!(cutoff > 0.0)) {
        throw ConfigError("soft raster cutoff must be positive");
    }
}

ScreenMesh project_mesh(const PointCloud& camera_vertices, const PointCloud& colors,
                        std::span<const morph::Face> faces, const Camera& camera)
{
    const Eigen::Index nv = camera_vertices.rows();
    ScreenMesh s;
    s.xy.resize(nv, 2);
    s.depth.resize(nv);
    s.znorm.resize(nv);
    s.colors = colors;
    s.faces.assign(faces.begin(), faces.end());
    const double inv_range = 1.0 / (camera.zfar - camera.znear);
    for (Eigen::Index v = 0; v < nv; ++v) {
        const double d = camera.distance - camera_vertices(v, 2);
        s.depth[v] = d;
        s.znorm[v] = (camera.zfar - d) * inv_range;
        if (d > kMinDepth) {
            s.xy(v, 0) = camera.cx + camera.focal * camera_vertices(v, 0) / d;
            s.xy(v, 1) = camera.cy - camera.focal * camera_vertices(v, 1) / d;
        } else {
            s.xy(v, 0) = s.xy(v, 1) = 0.0;
        }
    }
    return s;
}

SoftRasterizer::SoftRasterizer(const Camera& camera, const SoftRasterConfig& config)
    : camera_(camera), config_(config)
{
    camera_.validate();
    config_.validate();
}

Image SoftRasterizer::forward(const ScreenMesh& mesh)
{
    mesh_ = &mesh;
    const int w = camera_.width, h = camera_.height;
    const int num_faces = static_cast<int>(mesh.faces.size());
    const double sigma = config_.sigma;
    const double inv_sigma = 1.0 / sigma;
    const double radius = std::sqrt(config_.cutoff * sigma);
    const double min_s = -config_.cutoff * sigma;

    face_colors_.resize(num_faces, 3);
    face_z_.resize(num_faces);

    // Fragments are produced face-major, then counting-sorted into per-pixel runs
    // so that every pixel sees its faces in ascending face order.
    struct RawFragment {
        std::uint32_t pixel;
        int face;
        double s;
    };
    std::vector<RawFragment> raw;
    raw.reserve(static_cast<std::size_t>(num_faces) * 48);
    for (int f = 0; f < num_faces; ++f) {
        const auto& face = mesh.faces[f];
        if (mesh.depth[face[0]] <= kMinDepth || mesh.depth[face[1]] <= kMinDepth ||
            mesh.depth[face[2]] <= kMinDepth) {
            continue;
        }
        double vx[3], vy[3];
        for (int k = 0; k < 3; ++k) {
            vx[k] = mesh.xy(face[k], 0);
            vy[k] = mesh.xy(face[k], 1);
        }
        face_colors_.row(f) = (mesh.colors.row(face[0]) + mesh.colors.row(face[1]) + mesh.colors.row(face[2])) / 3.0;
        face_z_[f] = (mesh.znorm[face[0]] + mesh.znorm[face[1]] + mesh.znorm[face[2]]) / 3.0;
        const double xmin = std::min({vx[0], vx[1], vx[2]}) - radius;
        const double xmax = std::max({vx[0], vx[1], vx[2]}) + radius;
        const double ymin = std::min({vy[0], vy[1], vy[2]}) - radius;
        const double ymax = std::max({vy[0], vy[1], vy[2]}) + radius;
        if (xmax < 0.0 || ymax < 0.0 || xmin > w || ymin > h) {
            continue;
        }
        const int x0 = std::max(0, static_cast<int>(std::ceil(xmin - 0.5)));
        const int x1 = std::min(w - 1, static_cast<int>(std::floor(xmax - 0.5)));
        const int y0 = std::max(0, static_cast<int>(std::ceil(ymin - 0.5)));
        const int y1 = std::min(h - 1, static_cast<int>(std::floor(ymax - 0.5)));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                bool inside = false;
                const EdgeHit hit = nearest_edge(vx, vy, x + 0.5, y + 0.5, inside);
                const double s = inside ? hit.d2 : -hit.d2;
                if (s < min_s) {
                    continue;
                }
                raw.push_back({static_cast<std::uint32_t>(y * w + x), f, s});
            }
        }
    }

    pixel_offsets_.assign(static_cast<std::size_t>(w) * h + 1, 0);
    for (const auto& r : raw) {
        ++pixel_offsets_[r.pixel + 1];
    }
    for (std::size_t i = 1; i < pixel_offsets_.size(); ++i) {
        pixel_offsets_[i] += pixel_offsets_[i - 1];
    }
    fragments_.resize(raw.size());
    {
        std::vector<std::uint32_t> cursor(pixel_offsets_.begin(), pixel_offsets_.end() - 1);
        for (const auto& r : raw) {
            const double x = r.s * inv_sigma;
            // One exponential serves both the coverage and log(1 - coverage).
            const double e = std::exp(-std::abs(x));
            const double log1pe = std::log1p(e);
            Fragment& fr = fragments_[cursor[r.pixel]++];
            fr.face = r.face;
            fr.s = r.s;
            fr.coverage = x >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
            fr.log_q = x > 0.0 ? -x - log1pe : -log1pe;
        }
    }

    const Eigen::Vector3d bg = config_.background;
    Image image(w, h, bg);
    pixels_.assign(static_cast<std::size_t>(w) * h, PixelState{});
    const double inv_gamma = 1.0 / config_.gamma_agg;
    for (int p = 0; p < w * h; ++p) {
        const std::uint32_t begin = pixel_offsets_[p], end = pixel_offsets_[p + 1];
        if (begin == end) {
            continue;
        }
        PixelState& st = pixels_[p];
        double zmax = -std::numeric_limits<double>::infinity();
        double log_transmit = 0.0;
        for (std::uint32_t i = begin; i < end; ++i) {
            zmax = std::max(zmax, face_z_[fragments_[i].face]);
            log_transmit += fragments_[i].log_q;
        }
        double wsum = 0.0;
        Eigen::Vector3d acc = Eigen::Vector3d::Zero();
        for (std::uint32_t i = begin; i < end; ++i) {
            Fragment& fr = fragments_[i];
            fr.depth_weight = std::exp((face_z_[fr.face] - zmax) * inv_gamma);
            const double u = fr.coverage * fr.depth_weight;
            wsum += u;
            acc += u * face_colors_.row(fr.face).transpose();
        }
        st.zmax = zmax;
        st.log_transmit = log_transmit;
        st.alpha = -std::expm1(log_transmit);
        st.weight_sum = wsum;
        st.color = wsum > 0.0 ? Eigen::Vector3d(acc / wsum) : bg;
        const Eigen::Vector3d out = st.alpha * st.color + (1.0 - st.alpha) * bg;
        for (int c = 0; c < 3; ++c) {
            image.data[3 * static_cast<std::size_t>(p) + c] = out[c];
        }
    }
    return image;
}

ScreenGradient SoftRasterizer::backward(const Image& cotangent) const
{
    if (mesh_ == nullptr) {
        throw UsageError("SoftRasterizer::backward called before forward");
    }
    if (cotangent.width != camera_.width || cotangent.height != camera_.height) {
        throw ConfigError("cotangent image shape does not match the render");
    }
    const ScreenMesh& mesh = *mesh_;
    const Eigen::Index nv = mesh.xy.rows();
    const Eigen::Index nf = static_cast<Eigen::Index>(mesh.faces.size());
    // Accumulate per face first, then scatter to vertices.
    PointCloud g_face_color = PointCloud::Zero(nf, 3);
    Eigen::VectorXd g_face_z = Eigen::VectorXd::Zero(nf);
    Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor> g_xy =
        Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>::Zero(nv, 2);

    const int w = camera_.width, h = camera_.height;
    const double inv_sigma = 1.0 / config_.sigma;
    const double inv_gamma = 1.0 / config_.gamma_agg;
    const Eigen::Vector3d bg = config_.background;
    for (int p = 0; p < w * h; ++p) {
        const std::uint32_t begin = pixel_offsets_[p], end = pixel_offsets_[p + 1];
        if (begin == end) {
            continue;
        }
        const Eigen::Vector3d gpix(cotangent.data[3 * static_cast<std::size_t>(p)],
                                   cotangent.data[3 * static_cast<std::size_t>(p) + 1],
                                   cotangent.data[3 * static_cast<std::size_t>(p) + 2]);
        if (gpix.isZero(0.0)) {
            continue;
        }
        const PixelState& st = pixels_[p];
        const double galpha = gpix.dot(st.color - bg);
        const Eigen::Vector3d gcolor = st.alpha * gpix;
        const double inv_wsum = st.weight_sum > 0.0 ? 1.0 / st.weight_sum : 0.0;
        const double gcolor_dot_mean = gcolor.dot(st.color);
        const double px = (p % w) + 0.5, py = (p / w) + 0.5;
        for (std::uint32_t i = begin; i < end; ++i) {
            const Fragment& fr = fragments_[i];
            const double u = fr.coverage * fr.depth_weight;
            const double weight = u * inv_wsum;
            g_face_color.row(fr.face) += weight * gcolor.transpose();
            const double gu = (gcolor.dot(face_colors_.row(fr.face).transpose()) - gcolor_dot_mean) * inv_wsum;
            g_face_z[fr.face] += gu * u * inv_gamma;
            const double gcov = gu * fr.depth_weight + galpha * std::exp(st.log_transmit - fr.log_q);
            const double gs = gcov * fr.coverage * std::exp(fr.log_q) * inv_sigma;
            if (gs == 0.0) {
                continue;
            }
            const auto& face = mesh.faces[fr.face];
            double vx[3], vy[3];
            for (int k = 0; k < 3; ++k) {
                vx[k] = mesh.xy(face[k], 0);
                vy[k] = mesh.xy(face[k], 1);
            }
            bool inside = false;
            const EdgeHit hit = nearest_edge(vx, vy, px, py, inside);
            const int a = hit.edge, b = (hit.edge + 1) % 3;
            const double rx = px - (vx[a] + hit.t * (vx[b] - vx[a]));
            const double ry = py - (vy[a] + hit.t * (vy[b] - vy[a]));
            // ds/da = -2 (1 - t) r, ds/db = -2 t r, negated outside the face.
            const double scale = (inside ? -2.0 : 2.0) * gs;
            g_xy(face[a], 0) += scale * (1.0 - hit.t) * rx;
            g_xy(face[a], 1) += scale * (1.0 - hit.t) * ry;
            g_xy(face[b], 0) += scale * hit.t * rx;
            g_xy(face[b], 1) += scale * hit.t * ry;
        }
    }

    ScreenGradient g;
    g.xy = std::move(g_xy);
    g.znorm = Eigen::VectorXd::Zero(nv);
    g.colors = PointCloud::Zero(nv, 3);
    for (Eigen::Index f = 0; f < nf; ++f) {
        const auto& face = mesh.faces[f];
        for (int k = 0; k < 3; ++k) {
            g.colors.row(face[k]) += g_face_color.row(f) / 3.0;
            g.znorm[face[k]] += g_face_z[f] / 3.0;
        }
    }
    return g;
}

RenderTape::RenderTape(const BasisModel& basis, const Camera& camera, const SoftRasterConfig& config)
    : basis_(&basis), camera_(camera), config_(config), raster_(camera, config)
{
}

const Image& RenderTape::forward(const MorphParams& params)
{
    const BasisModel& basis = *basis_;
    params.check_dims(basis.dims);
    params_ = params;
    const int nv = basis.num_vertices();
    const Eigen::VectorXd shape = basis.mean_shape + basis.id_basis * params.alpha + basis.exp_basis * params.delta;
    shape_ = Eigen::Map<const PointCloud>(shape.data(), nv, 3);
    normal_acc_ = PointCloud::Zero(nv, 3);
    for (const auto& f : basis.faces) {
        const Eigen::Vector3d a = shape_.row(f[0]);
        const Eigen::Vector3d n = (Eigen::Vector3d(shape_.row(f[1])) - a).cross(Eigen::Vector3d(shape_.row(f[2])) - a);
        for (int k = 0; k < 3; ++k) {
            normal_acc_.row(f[k]) += n.transpose();
        }
    }
    normals_.resize(nv, 3);
    for (int v = 0; v < nv; ++v) {
        const double len = normal_acc_.row(v).norm();
        if (len > 0.0) {
            normals_.row(v) = normal_acc_.row(v) / len;
        } else {
            normals_.row(v) << 0.0, 0.0, 1.0;
        }
    }
    rotation_ = morph::rotation_matrix(params.phi);
    camera_vertices_ = (shape_ * rotation_.transpose()).rowwise() + params.t.transpose();
    normals_cam_ = normals_ * rotation_.transpose();
    const PointCloud& shade_normals = config_.shading == ShadingFrame::Head ? normals_ : normals_cam_;

    const Eigen::VectorXd tex = basis.mean_tex + basis.tex_basis * params.beta;
    albedo_pre_ = Eigen::Map<const PointCloud>(tex.data(), nv, 3);
    albedo_ = albedo_pre_.cwiseMax(0.0).cwiseMin(1.0);
    shade_.resize(nv, 3);
    PointCloud colors(nv, 3);
    for (int v = 0; v < nv; ++v) {
        const auto hb = morph::sh_basis(shade_normals.row(v).transpose());
        for (int c = 0; c < 3; ++c) {
            double s = 0.0;
            for (int b = 0; b < morph::kShBands; ++b) {
                s += params.gamma[3 * b + c] * hb[b];
            }
            shade_(v, c) = s;
            colors(v, c) = std::clamp(albedo_(v, c) * s, 0.0, 1.0);
        }
    }
    screen_ = project_mesh(camera_vertices_, colors, basis.faces, camera_);
    image_ = raster_.forward(screen_);
    return image_;
}

Eigen::VectorXd RenderTape::vjp(const Image& cotangent) const
{
    const BasisModel& basis = *basis_;
    const morph::ModelDims dims = basis.dims;
    const int nv = basis.num_vertices();
    const ScreenGradient sg = raster_.backward(cotangent);

    PointCloud g_cam = PointCloud::Zero(nv, 3);     // camera-space vertex positions
    PointCloud g_ncam = PointCloud::Zero(nv, 3);    // normals in the shading frame
    const bool head = config_.shading == ShadingFrame::Head;
    const PointCloud& shade_normals = head ? normals_ : normals_cam_;
    PointCloud g_albedo_pre = PointCloud::Zero(nv, 3);
    Eigen::VectorXd g_gamma = Eigen::VectorXd::Zero(morph::kLightingSize);
    const double inv_range = 1.0 / (camera_.zfar - camera_.znear);

    for (int v = 0; v < nv; ++v) {
        const double d = screen_.depth[v];
        if (d > kMinDepth) {
            const double x = camera_vertices_(v, 0), y = camera_vertices_(v, 1);
            const double gu = sg.xy(v, 0), gv = sg.xy(v, 1);
            const double f = camera_.focal;
            g_cam(v, 0) += gu * f / d;
            g_cam(v, 1) += -gv * f / d;
            g_cam(v, 2) += gu * f * x / (d * d) - gv * f * y / (d * d);
        }
        g_cam(v, 2) += sg.znorm[v] * inv_range;

        const Eigen::Vector3d n = shade_normals.row(v).transpose();
        std::array<double, morph::kShBands> hb{};
        std::array<Eigen::Vector3d, morph::kShBands> dh{};
        bool have_basis = false;
        for (int c = 0; c < 3; ++c) {
            const double prod = albedo_(v, c) * shade_(v, c);
            if (!(prod > 0.0 && prod < 1.0)) {
                continue;
            }
            const double gprod = sg.colors(v, c);
            if (gprod == 0.0) {
                continue;
            }
            if (!have_basis) {
                hb = morph::sh_basis(n);
                dh = morph::sh_basis_gradient(n);
                have_basis = true;
            }
            const double gshade = gprod * albedo_(v, c);
            const double pre = albedo_pre_(v, c);
            if (pre > 0.0 && pre < 1.0) {
                g_albedo_pre(v, c) += gprod * shade_(v, c);
            }
            Eigen::Vector3d gn = Eigen::Vector3d::Zero();
            for (int b = 0; b < morph::kShBands; ++b) {
                g_gamma[3 * b + c] += gshade * hb[b];
                gn += params_.gamma[3 * b + c] * dh[b];
            }
            g_ncam.row(v) += gshade * gn.transpose();
        }
    }

    // Rigid pose: P = R S + t, and N' = R N when shading in the camera frame.
    const Eigen::Vector3d g_t = g_cam.colwise().sum().transpose();
    Eigen::Matrix3d g_rot = g_cam.transpose() * shape_;
    PointCloud g_shape = g_cam * rotation_;
    PointCloud g_nmodel = g_ncam;
    if (!head) {
        g_rot += g_ncam.transpose() * normals_;
        g_nmodel = g_ncam * rotation_;
    }

    // Normalisation and face cross products back onto the model-space shape.
    PointCloud g_acc(nv, 3);
    for (int v = 0; v < nv; ++v) {
        const double len = normal_acc_.row(v).norm();
        if (len > 0.0) {
            const Eigen::RowVector3d n = normals_.row(v);
            const Eigen::RowVector3d gn = g_nmodel.row(v);
            g_acc.row(v) = (gn - n * n.dot(gn)) / len;
        } else {
            g_acc.row(v).setZero();
        }
    }
    for (const auto& f : basis.faces) {
        const Eigen::Vector3d gface =
            (g_acc.row(f[0]) + g_acc.row(f[1]) + g_acc.row(f[2])).transpose();
        const Eigen::Vector3d a = shape_.row(f[0]);
        const Eigen::Vector3d e1 = Eigen::Vector3d(shape_.row(f[1])) - a;
        const Eigen::Vector3d e2 = Eigen::Vector3d(shape_.row(f[2])) - a;
        const Eigen::Vector3d ge1 = e2.cross(gface);
        const Eigen::Vector3d ge2 = gface.cross(e1);
        g_shape.row(f[1]) += ge1.transpose();
        g_shape.row(f[2]) += ge2.transpose();
        g_shape.row(f[0]) -= (ge1 + ge2).transpose();
    }

    Eigen::VectorXd grad = Eigen::VectorXd::Zero(dims.param_size());
    const Eigen::Map<const Eigen::VectorXd> g_shape_flat(g_shape.data(), 3 * nv);
    const Eigen::Map<const Eigen::VectorXd> g_tex_flat(g_albedo_pre.data(), 3 * nv);
    const auto r_id = morph::block_range(dims, morph::Block::Identity);
    const auto r_tex = morph::block_range(dims, morph::Block::Texture);
    const auto r_exp = morph::block_range(dims, morph::Block::Expression);
    const auto r_light = morph::block_range(dims, morph::Block::Lighting);
    const auto r_rot = morph::block_range(dims, morph::Block::Rotation);
    const auto r_tr = morph::block_range(dims, morph::Block::Translation);
    grad.segment(r_id.offset, r_id.size) = basis.id_basis.transpose() * g_shape_flat;
    grad.segment(r_exp.offset, r_exp.size) = basis.exp_basis.transpose() * g_shape_flat;
    grad.segment(r_tex.offset, r_tex.size) = basis.tex_basis.transpose() * g_tex_flat;
    grad.segment(r_light.offset, r_light.size) = g_gamma;
    const auto dr = morph::rotation_jacobian(params_.phi);
    for (int k = 0; k < 3; ++k) {
        grad[r_rot.offset + k] = g_rot.cwiseProduct(dr[k]).sum();
    }
    grad.segment(r_tr.offset, 3) = g_t;
    return grad;
}

Image render(const MorphParams& params, const BasisModel& basis, const Camera& camera, const SoftRasterConfig& config)
{
    RenderTape tape(basis, camera, config);
    return tape.forward(params);
}

Eigen::VectorXd render_vjp(const MorphParams& params, const BasisModel& basis, const Camera& camera,
                           const SoftRasterConfig& config, const Image& cotangent)
{
    RenderTape tape(basis, camera, config);
    tape.forward(params);
    return tape.vjp(cotangent);
}

PosedGeometry posed_geometry(const MorphParams& params, const BasisModel& basis)
{
    const morph::Mesh mesh = morph::pose_transform(morph::build_mesh(params, basis), params.phi, params.t);
    return {mesh.vertices, mesh.normals};
}

Image render_with_colors(const MorphParams& params, const BasisModel& basis, const PointCloud& vertex_colors,
                         const Camera& camera, const SoftRasterConfig& config)
{
    if (vertex_colors.rows() != basis.num_vertices()) {
        throw ConfigError("vertex colour count does not match the model");
    }
    const PosedGeometry geo = posed_geometry(params, basis);
    SoftRasterizer raster(camera, config);
    const ScreenMesh screen = project_mesh(geo.vertices, vertex_colors, basis.faces, camera);
    return raster.forward(screen);
}

namespace {

Eigen::Matrix<double, morph::kNumLandmarks, 3, Eigen::RowMajor> landmark_model_points(const MorphParams& params,
                                                                                     const BasisModel& basis)
{
    Eigen::Matrix<double, morph::kNumLandmarks, 3, Eigen::RowMajor> pts;
    for (int i = 0; i < morph::kNumLandmarks; ++i) {
        const int v = basis.landmark_indices[i];
        for (int k = 0; k < 3; ++k) {
            const int row = 3 * v + k;
            pts(i, k) = basis.mean_shape[row] + basis.id_basis.row(row).dot(params.alpha) +
                        basis.exp_basis.row(row).dot(params.delta);
        }
    }
    return pts;
}

} // namespace

LandmarkProjection project_landmarks(const MorphParams& params, const BasisModel& basis, const Camera& camera)
{
    params.check_dims(basis.dims);
    const auto model = landmark_model_points(params, basis);
    const Eigen::Matrix3d r = morph::rotation_matrix(params.phi);
    LandmarkProjection out;
    for (int i = 0; i < morph::kNumLandmarks; ++i) {
        const Eigen::Vector3d p = r * model.row(i).transpose() + params.t;
        const double d = camera.distance - p[2];
        out.valid[i] = d > kMinDepth;
        if (out.valid[i]) {
            out.points(i, 0) = camera.cx + camera.focal * p[0] / d;
            out.points(i, 1) = camera.cy - camera.focal * p[1] / d;
        } else {
            out.points.row(i).setZero();
            ++out.num_invalid;
        }
    }
    return out;
}

Eigen::VectorXd project_landmarks_vjp(const MorphParams& params, const BasisModel& basis, const Camera& camera,
                                      const Eigen::Matrix<double, morph::kNumLandmarks, 2, Eigen::RowMajor>& cotangent)
{
    params.check_dims(basis.dims);
    const morph::ModelDims dims = basis.dims;
    const auto model = landmark_model_points(params, basis);
    const Eigen::Matrix3d r = morph::rotation_matrix(params.phi);
    Eigen::Matrix3d g_rot = Eigen::Matrix3d::Zero();
    Eigen::Vector3d g_t = Eigen::Vector3d::Zero();
    Eigen::VectorXd g_alpha = Eigen::VectorXd::Zero(dims.id);
    Eigen::VectorXd g_delta = Eigen::VectorXd::Zero(dims.exp);
    for (int i = 0; i < morph::kNumLandmarks; ++i) {
        const Eigen::Vector3d s = model.row(i).transpose();
        const Eigen::Vector3d p = r * s + params.t;
        const double d = camera.distance - p[2];
        if (d <= kMinDepth) {
            continue;
        }
        const double f = camera.focal, gu = cotangent(i, 0), gv = cotangent(i, 1);
        const Eigen::Vector3d gp(gu * f / d, -gv * f / d, gu * f * p[0] / (d * d) - gv * f * p[1] / (d * d));
        g_t += gp;
        g_rot += gp * s.transpose();
        const Eigen::Vector3d gs = r.transpose() * gp;
        const int v = basis.landmark_indices[i];
        for (int k = 0; k < 3; ++k) {
            g_alpha += gs[k] * basis.id_basis.row(3 * v + k).transpose();
            g_delta += gs[k] * basis.exp_basis.row(3 * v + k).transpose();
        }
    }
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(dims.param_size());
    grad.segment(morph::block_range(dims, morph::Block::Identity).offset, dims.id) = g_alpha;
    grad.segment(morph::block_range(dims, morph::Block::Expression).offset, dims.exp) = g_delta;
    const auto dr = morph::rotation_jacobian(params.phi);
    const int rot = morph::block_range(dims, morph::Block::Rotation).offset;
    for (int k = 0; k < 3; ++k) {
        grad[rot + k] = g_rot.cwiseProduct(dr[k]).sum();
    }
    grad.segment(morph::block_range(dims, morph::Block::Translation).offset, 3) = g_t;
    return grad;
}

Visibility visibility(const PointCloud& vertices, const PointCloud& normals, std::span<const morph::Face> faces,
                      const Camera& camera)
{
    const int w = camera.width, h = camera.height;
    const Eigen::Index nv = vertices.rows();
    const ScreenMesh screen = project_mesh(vertices, PointCloud::Zero(nv, 3), faces, camera);
    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> zbuf(static_cast<std::size_t>(w) * h, kInf);
    for (const auto& f : faces) {
        double vx[3], vy[3], vd[3];
        bool ok = true;
        for (int k = 0; k < 3; ++k) {
            vx[k] = screen.xy(f[k], 0);
            vy[k] = screen.xy(f[k], 1);
            vd[k] = screen.depth[f[k]];
            ok = ok && vd[k] > kMinDepth;
        }
        const double area = cross2(vx[1] - vx[0], vy[1] - vy[0], vx[2] - vx[0], vy[2] - vy[0]);
        if (!ok || area == 0.0) {
            continue;
        }
        const int x0 = std::max(0, static_cast<int>(std::floor(std::min({vx[0], vx[1], vx[2]}) - 0.5)));
        const int x1 = std::min(w - 1, static_cast<int>(std::ceil(std::max({vx[0], vx[1], vx[2]}) - 0.5)));
        const int y0 = std::max(0, static_cast<int>(std::floor(std::min({vy[0], vy[1], vy[2]}) - 0.5)));
        const int y1 = std::min(h - 1, static_cast<int>(std::ceil(std::max({vy[0], vy[1], vy[2]}) - 0.5)));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double px = x + 0.5, py = y + 0.5;
                const double b0 = cross2(vx[1] - px, vy[1] - py, vx[2] - px, vy[2] - py) / area;
                const double b1 = cross2(vx[2] - px, vy[2] - py, vx[0] - px, vy[0] - py) / area;
                const double b2 = 1.0 - b0 - b1;
                if (b0 < 0.0 || b1 < 0.0 || b2 < 0.0) {
                    continue;
                }
                const double depth = b0 * vd[0] + b1 * vd[1] + b2 * vd[2];
                double& z = zbuf[static_cast<std::size_t>(y) * w + x];
                z = std::min(z, depth);
            }
        }
    }

    constexpr double kDepthTolerance = 0.1;
    const Eigen::Vector3d eye(0.0, 0.0, camera.distance);
    Visibility vis;
    vis.score = Eigen::VectorXd::Zero(nv);
    vis.occluded.assign(nv, true);
    for (Eigen::Index v = 0; v < nv; ++v) {
        const double d = screen.depth[v];
        if (d <= kMinDepth) {
            continue;
        }
        const double u = screen.xy(v, 0), vv = screen.xy(v, 1);
        if (u < 0.0 || vv < 0.0 || u >= w || vv >= h) {
            continue;
        }
        // Depth test against the 2x2 pixel-centre footprint; an uncovered neighbour
        // means the vertex sits on the silhouette and is treated as unoccluded.
        const int xa = std::clamp(static_cast<int>(std::floor(u - 0.5)), 0, w - 1);
        const int ya = std::clamp(static_cast<int>(std::floor(vv - 0.5)), 0, h - 1);
        double front = -kInf;
        for (int dy = 0; dy <= 1; ++dy) {
            for (int dx = 0; dx <= 1; ++dx) {
                const int x = std::min(xa + dx, w - 1), y = std::min(ya + dy, h - 1);
                front = std::max(front, zbuf[static_cast<std::size_t>(y) * w + x]);
            }
        }
        vis.occluded[v] = d > front + kDepthTolerance;
        if (!vis.occluded[v]) {
            const Eigen::Vector3d p = vertices.row(v).transpose();
            const Eigen::Vector3d view = (eye - p).normalized();
            vis.score[v] = std::max(0.0, Eigen::Vector3d(normals.row(v).transpose()).dot(view));
        }
    }
    return vis;
}

Visibility visibility(const MorphParams& params, const BasisModel& basis, const Camera& camera)
{
    const PosedGeometry geo = posed_geometry(params, basis);
    return visibility(geo.vertices, geo.normals, basis.faces, camera);
}

} // namespace mapedit::render
