#include "mapedit/morphable_model.hpp"

#include <Eigen/QR>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>

namespace mapedit::morph {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

BlockRange block_range(const ModelDims& dims, Block block)
{
    switch (block) {
    case Block::Identity:
        return {0, dims.id};
    case Block::Texture:
        return {dims.id, dims.tex};
    case Block::Expression:
        return {dims.id + dims.tex, dims.exp};
    case Block::Lighting:
        return {dims.id + dims.tex + dims.exp, kLightingSize};
    case Block::Rotation:
        return {dims.id + dims.tex + dims.exp + kLightingSize, 3};
    case Block::Translation:
        return {dims.id + dims.tex + dims.exp + kLightingSize + 3, 3};
    }
    throw ConfigError("unknown parameter block");
}

const char* block_name(Block block)
{
    switch (block) {
    case Block::Identity:
        return "alpha";
    case Block::Texture:
        return "beta";
    case Block::Expression:
        return "delta";
    case Block::Lighting:
        return "gamma";
    case Block::Rotation:
        return "phi";
    case Block::Translation:
        return "t";
    }
    return "?";
}

MorphParams MorphParams::zeros(const ModelDims& dims)
{
    MorphParams p;
    p.alpha = Eigen::VectorXd::Zero(dims.id);
    p.beta = Eigen::VectorXd::Zero(dims.tex);
    p.delta = Eigen::VectorXd::Zero(dims.exp);
    p.gamma = Eigen::VectorXd::Zero(kLightingSize);
    return p;
}

MorphParams MorphParams::neutral(const ModelDims& dims)
{
    MorphParams p = zeros(dims);
    for (int c = 0; c < 3; ++c) {
        p.gamma[c] = 1.0 / kShC0;
    }
    return p;
}

MorphParams MorphParams::unflatten(const ModelDims& dims, std::span<const double> flat)
{
    if (static_cast<int>(flat.size()) != dims.param_size()) {
        throw ConfigError("parameter vector has length " + std::to_string(flat.size()) + ", expected " +
                          std::to_string(dims.param_size()));
    }
    auto take = [&](Block b) {
        const auto r = block_range(dims, b);
        return Eigen::Map<const Eigen::VectorXd>(flat.data() + r.offset, r.size).eval();
    };
    MorphParams p;
    p.alpha = take(Block::Identity);
    p.beta = take(Block::Texture);
    p.delta = take(Block::Expression);
    p.gamma = take(Block::Lighting);
    p.phi = take(Block::Rotation);
    p.t = take(Block::Translation);
    return p;
}

Eigen::VectorXd MorphParams::flatten() const
{
    Eigen::VectorXd flat(alpha.size() + beta.size() + delta.size() + gamma.size() + 6);
    flat << alpha, beta, delta, gamma, phi, t;
    return flat;
}

void MorphParams::check_dims(const ModelDims& dims) const
{
    if (alpha.size() != dims.id || beta.size() != dims.tex || delta.size() != dims.exp ||
        gamma.size() != kLightingSize) {
        throw ConfigError("MorphParams blocks do not match model dims (" + std::to_string(alpha.size()) + "," +
                          std::to_string(beta.size()) + "," + std::to_string(delta.size()) + "," +
                          std::to_string(gamma.size()) + ") vs (" + std::to_string(dims.id) + "," +
                          std::to_string(dims.tex) + "," + std::to_string(dims.exp) + ",27)");
    }
}

void BasisModel::validate() const
{
    const Eigen::Index n = 3 * static_cast<Eigen::Index>(dims.vertices);
    if (mean_shape.size() != n || mean_tex.size() != n || id_basis.rows() != n || id_basis.cols() != dims.id ||
        exp_basis.rows() != n || exp_basis.cols() != dims.exp || tex_basis.rows() != n ||
        tex_basis.cols() != dims.tex || uv_coords.rows() != dims.vertices) {
        throw ConfigError("basis matrices do not match declared dims");
    }
    for (const auto& f : faces) {
        for (int v : f) {
            if (v < 0 || v >= dims.vertices) {
                throw ConfigError("face index out of range");
            }
        }
    }
    std::vector<int> sorted(landmark_indices.begin(), landmark_indices.end());
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw ConfigError("landmark indices are not distinct");
    }
    if (sorted.front() < 0 || sorted.back() >= dims.vertices) {
        throw ConfigError("landmark index out of range");
    }
    if (uv_coords.minCoeff() < 0.0 || uv_coords.maxCoeff() > 1.0) {
        throw ConfigError("uv coordinates outside [0,1]^2");
    }
}

std::vector<int> BasisModel::uv_chart_faces() const
{
    std::vector<int> chart;
    for (int f = 0; f < static_cast<int>(faces.size()); ++f) {
        bool front = true;
        for (int v : faces[f]) {
            front = front && mean_shape[3 * v + 2] >= -1e-12;
        }
        if (front) {
            chart.push_back(f);
        }
    }
    return chart;
}

namespace {

constexpr char kMorphMagic[6] = {'M', 'O', 'R', 'P', 'H', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& value)
{
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is)
{
    T value{};
    is.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!is) {
        throw FormatError("truncated model file");
    }
    return value;
}

void write_doubles(std::ostream& os, const double* data, Eigen::Index count)
{
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
}

void read_doubles(std::istream& is, double* data, Eigen::Index count)
{
    is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
    if (!is) {
        throw FormatError("truncated model file");
    }
}

} // namespace

void BasisModel::save(const std::filesystem::path& path) const
{
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw ConfigError("cannot open " + path.string() + " for writing");
    }
    os.write(kMorphMagic, sizeof(kMorphMagic));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(dims.id));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(dims.tex));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(dims.exp));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(dims.vertices));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(faces.size()));
    write_pod<std::uint64_t>(os, seed);
    // Matrices are stored column-major, exactly as Eigen holds them.
    write_doubles(os, mean_shape.data(), mean_shape.size());
    write_doubles(os, id_basis.data(), id_basis.size());
    write_doubles(os, exp_basis.data(), exp_basis.size());
    write_doubles(os, mean_tex.data(), mean_tex.size());
    write_doubles(os, tex_basis.data(), tex_basis.size());
    write_doubles(os, uv_coords.data(), uv_coords.size());
    for (const auto& f : faces) {
        for (int v : f) {
            write_pod<std::int32_t>(os, v);
        }
    }
    for (int v : landmark_indices) {
        write_pod<std::int32_t>(os, v);
    }
}

BasisModel BasisModel::load(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw ConfigError("cannot open model file " + path.string());
    }
    char magic[sizeof(kMorphMagic)];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMorphMagic, sizeof(magic)) != 0) {
        throw FormatError("not a MORPH1 file: " + path.string());
    }
    BasisModel m;
    m.dims.id = static_cast<int>(read_pod<std::uint32_t>(is));
    m.dims.tex = static_cast<int>(read_pod<std::uint32_t>(is));
    m.dims.exp = static_cast<int>(read_pod<std::uint32_t>(is));
    m.dims.vertices = static_cast<int>(read_pod<std::uint32_t>(is));
    const auto num_faces = read_pod<std::uint32_t>(is);
    m.seed = read_pod<std::uint64_t>(is);
    const Eigen::Index n = 3 * static_cast<Eigen::Index>(m.dims.vertices);
    m.mean_shape.resize(n);
    m.id_basis.resize(n, m.dims.id);
    m.exp_basis.resize(n, m.dims.exp);
    m.mean_tex.resize(n);
    m.tex_basis.resize(n, m.dims.tex);
    m.uv_coords.resize(m.dims.vertices, 2);
    read_doubles(is, m.mean_shape.data(), m.mean_shape.size());
    read_doubles(is, m.id_basis.data(), m.id_basis.size());
    read_doubles(is, m.exp_basis.data(), m.exp_basis.size());
    read_doubles(is, m.mean_tex.data(), m.mean_tex.size());
    read_doubles(is, m.tex_basis.data(), m.tex_basis.size());
    read_doubles(is, m.uv_coords.data(), m.uv_coords.size());
    m.faces.resize(num_faces);
    for (auto& f : m.faces) {
        for (int& v : f) {
            v = read_pod<std::int32_t>(is);
        }
    }
    for (int& v : m.landmark_indices) {
        v = read_pod<std::int32_t>(is);
    }
    m.validate();
    return m;
}

void BasisModel::save_sidecar(const std::filesystem::path& path) const
{
    nlohmann::json j;
    j["format"] = "MORPH1";
    j["dims"] = {{"id", dims.id}, {"tex", dims.tex}, {"exp", dims.exp}, {"vertices", dims.vertices}};
    j["faces"] = faces.size();
    j["param_size"] = dims.param_size();
    j["seed"] = seed;
    std::ofstream os(path);
    os << j.dump(2) << "\n";
}

PointCloud vertex_normals(const PointCloud& vertices, std::span<const Face> faces)
{
    PointCloud acc = PointCloud::Zero(vertices.rows(), 3);
    for (const auto& f : faces) {
        const Eigen::Vector3d a = vertices.row(f[0]);
        const Eigen::Vector3d e1 = Eigen::Vector3d(vertices.row(f[1])) - a;
        const Eigen::Vector3d e2 = Eigen::Vector3d(vertices.row(f[2])) - a;
        const Eigen::RowVector3d n = e1.cross(e2).transpose();
        acc.row(f[0]) += n;
        acc.row(f[1]) += n;
        acc.row(f[2]) += n;
    }
    for (Eigen::Index v = 0; v < acc.rows(); ++v) {
        const double len = acc.row(v).norm();
        if (len > 0.0) {
            acc.row(v) /= len;
        } else {
            acc.row(v) << 0.0, 0.0, 1.0;
        }
    }
    return acc;
}

Mesh build_mesh(const MorphParams& params, const BasisModel& basis)
{
    params.check_dims(basis.dims);
    const Eigen::VectorXd shape = basis.mean_shape + basis.id_basis * params.alpha + basis.exp_basis * params.delta;
    const Eigen::VectorXd albedo = (basis.mean_tex + basis.tex_basis * params.beta).cwiseMax(0.0).cwiseMin(1.0);
    const int nv = basis.num_vertices();
    Mesh mesh;
    mesh.vertices = Eigen::Map<const PointCloud>(shape.data(), nv, 3);
    mesh.colors = Eigen::Map<const PointCloud>(albedo.data(), nv, 3);
    mesh.faces = basis.faces;
    mesh.normals = vertex_normals(mesh.vertices, mesh.faces);
    return mesh;
}

Eigen::Matrix3d rotation_matrix(const Eigen::Vector3d& phi)
{
    const double cx = std::cos(phi[0]), sx = std::sin(phi[0]);
    const double cy = std::cos(phi[1]), sy = std::sin(phi[1]);
    const double cz = std::cos(phi[2]), sz = std::sin(phi[2]);
    Eigen::Matrix3d rx, ry, rz;
    rx << 1, 0, 0, 0, cx, -sx, 0, sx, cx;
    ry << cy, 0, sy, 0, 1, 0, -sy, 0, cy;
    rz << cz, -sz, 0, sz, cz, 0, 0, 0, 1;
    return rz * ry * rx;
}

std::array<Eigen::Matrix3d, 3> rotation_jacobian(const Eigen::Vector3d& phi)
{
    const double cx = std::cos(phi[0]), sx = std::sin(phi[0]);
    const double cy = std::cos(phi[1]), sy = std::sin(phi[1]);
    const double cz = std::cos(phi[2]), sz = std::sin(phi[2]);
    Eigen::Matrix3d rx, ry, rz, drx, dry, drz;
    rx << 1, 0, 0, 0, cx, -sx, 0, sx, cx;
    ry << cy, 0, sy, 0, 1, 0, -sy, 0, cy;
    rz << cz, -sz, 0, sz, cz, 0, 0, 0, 1;
    drx << 0, 0, 0, 0, -sx, -cx, 0, cx, -sx;
    dry << -sy, 0, cy, 0, 0, 0, -cy, 0, -sy;
    drz << -sz, -cz, 0, cz, -sz, 0, 0, 0, 0;
    return {rz * ry * drx, rz * dry * rx, drz * ry * rx};
}

Mesh pose_transform(const Mesh& mesh, const Eigen::Vector3d& phi, const Eigen::Vector3d& t)
{
    const Eigen::Matrix3d r = rotation_matrix(phi);
    Mesh out = mesh;
    out.vertices = (mesh.vertices * r.transpose()).rowwise() + t.transpose();
    out.normals = mesh.normals * r.transpose();
    return out;
}

namespace {
constexpr double kShC1 = 0.48860251190291992; // sqrt(3 / (4 pi))
constexpr double kShC2 = 1.0925484305920792;  // sqrt(15 / (4 pi))
constexpr double kShC3 = 0.31539156525252005; // sqrt(5 / (16 pi))
constexpr double kShC4 = 0.54627421529603959; // sqrt(15 / (16 pi))
} // namespace

std::array<double, kShBands> sh_basis(const Eigen::Vector3d& n)
{
    const double x = n[0], y = n[1], z = n[2];
    return {kShC0,
            kShC1 * y,
            kShC1 * z,
            kShC1 * x,
            kShC2 * x * y,
            kShC2 * y * z,
            kShC3 * (3.0 * z * z - 1.0),
            kShC2 * x * z,
            kShC4 * (x * x - y * y)};
}

std::array<Eigen::Vector3d, kShBands> sh_basis_gradient(const Eigen::Vector3d& n)
{
    const double x = n[0], y = n[1], z = n[2];
    return {Eigen::Vector3d::Zero(),
            Eigen::Vector3d(0, kShC1, 0),
            Eigen::Vector3d(0, 0, kShC1),
            Eigen::Vector3d(kShC1, 0, 0),
            Eigen::Vector3d(kShC2 * y, kShC2 * x, 0),
            Eigen::Vector3d(0, kShC2 * z, kShC2 * y),
            Eigen::Vector3d(0, 0, 6.0 * kShC3 * z),
            Eigen::Vector3d(kShC2 * z, 0, kShC2 * x),
            Eigen::Vector3d(2.0 * kShC4 * x, -2.0 * kShC4 * y, 0)};
}

Mesh sh_shade(const Mesh& mesh, std::span<const double> gamma)
{
    if (gamma.size() != static_cast<std::size_t>(kLightingSize)) {
        throw ConfigError("lighting vector must have 27 entries");
    }
    Mesh out = mesh;
    for (int v = 0; v < mesh.num_vertices(); ++v) {
        const auto h = sh_basis(mesh.normals.row(v).transpose());
        for (int c = 0; c < 3; ++c) {
            double shade = 0.0;
            for (int b = 0; b < kShBands; ++b) {
                shade += gamma[3 * b + c] * h[b];
            }
            out.colors(v, c) = std::clamp(mesh.colors(v, c) * shade, 0.0, 1.0);
        }
    }
    return out;
}

PointCloud landmarks3d(const Mesh& mesh, const BasisModel& basis)
{
    PointCloud out(kNumLandmarks, 3);
    for (int i = 0; i < kNumLandmarks; ++i) {
        out.row(i) = mesh.vertices.row(basis.landmark_indices[i]);
    }
    return out;
}

namespace {

struct Icosphere {
    std::vector<Eigen::Vector3d> vertices;
    std::vector<Face> faces;
};

Icosphere make_icosphere(int levels)
{
    const double g = (1.0 + std::sqrt(5.0)) / 2.0;
    Icosphere s;
    s.vertices = {{-1, g, 0}, {1, g, 0}, {-1, -g, 0}, {1, -g, 0}, {0, -1, g}, {0, 1, g},
                  {0, -1, -g}, {0, 1, -g}, {g, 0, -1}, {g, 0, 1}, {-g, 0, -1}, {-g, 0, 1}};
    for (auto& v : s.vertices) {
        v.normalize();
    }
    s.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
               {11, 10, 2}, {10, 7, 6}, {7, 1, 8},   {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
               {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
    for (int level = 0; level < levels; ++level) {
        std::map<std::pair<int, int>, int> midpoints;
        auto midpoint = [&](int a, int b) {
            const auto key = std::minmax(a, b);
            const auto it = midpoints.find(key);
            if (it != midpoints.end()) {
                return it->second;
            }
            s.vertices.push_back((s.vertices[a] + s.vertices[b]).normalized());
            const int id = static_cast<int>(s.vertices.size()) - 1;
            midpoints.emplace(key, id);
            return id;
        };
        std::vector<Face> next;
        next.reserve(s.faces.size() * 4);
        for (const auto& f : s.faces) {
            const int ab = midpoint(f[0], f[1]);
            const int bc = midpoint(f[1], f[2]);
            const int ca = midpoint(f[2], f[0]);
            next.push_back({f[0], ab, ca});
            next.push_back({f[1], bc, ab});
            next.push_back({f[2], ca, bc});
            next.push_back({ab, bc, ca});
        }
        s.faces = std::move(next);
    }
    return s;
}

double smoothstep(double lo, double hi, double x)
{
    const double t = std::clamp((x - lo) / (hi - lo), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

double blob(double x, double y, double cx, double cy, double sx, double sy)
{
    const double dx = (x - cx) / sx, dy = (y - cy) / sy;
    return std::exp(-0.5 * (dx * dx + dy * dy));
}

Eigen::Vector3d lerp(const Eigen::Vector3d& a, const Eigen::Vector3d& b, double w) { return a + w * (b - a); }

// Mean albedo painted on the unit-sphere direction: skin, eyes, brows, mouth, hair.
Eigen::Vector3d face_albedo(const Eigen::Vector3d& d)
{
    const double x = d[0], y = d[1], z = d[2];
    const double front = smoothstep(0.2, 0.6, z);
    Eigen::Vector3d c(0.80, 0.62, 0.52);
    c = lerp(c, Eigen::Vector3d(0.86, 0.55, 0.50), 0.6 * front * (blob(x, y, 0.42, -0.15, 0.12, 0.12) + blob(x, y, -0.42, -0.15, 0.12, 0.12)));
    c = lerp(c, Eigen::Vector3d(0.32, 0.22, 0.16), front * std::min(1.0, blob(x, y, 0.32, 0.42, 0.13, 0.04) + blob(x, y, -0.32, 0.42, 0.13, 0.04)));
    c = lerp(c, Eigen::Vector3d(0.12, 0.10, 0.10), front * std::min(1.0, blob(x, y, 0.32, 0.22, 0.09, 0.06) + blob(x, y, -0.32, 0.22, 0.09, 0.06)));
    c = lerp(c, Eigen::Vector3d(0.66, 0.22, 0.24), front * blob(x, y, 0.0, -0.48, 0.18, 0.055));
    const double hair = std::max(smoothstep(0.55, 0.7, y), smoothstep(0.0, -0.3, z) * smoothstep(-0.6, -0.2, y));
    c = lerp(c, Eigen::Vector3d(0.22, 0.16, 0.10), hair);
    return c;
}

std::vector<std::vector<int>> vertex_neighbours(int nv, std::span<const Face> faces)
{
    std::vector<std::vector<int>> nbrs(nv);
    for (const auto& f : faces) {
        for (int k = 0; k < 3; ++k) {
            nbrs[f[k]].push_back(f[(k + 1) % 3]);
            nbrs[f[k]].push_back(f[(k + 2) % 3]);
        }
    }
    for (auto& n : nbrs) {
        std::sort(n.begin(), n.end());
        n.erase(std::unique(n.begin(), n.end()), n.end());
    }
    return nbrs;
}

// Gaussian columns, Laplacian-smoothed over the mesh graph, then orthonormalised.
Eigen::MatrixXd smooth_orthonormal_basis(Rng& rng, int nv, int cols, const std::vector<std::vector<int>>& nbrs,
                                         int smoothing_iters)
{
    Eigen::MatrixXd m(3 * nv, cols);
    for (int c = 0; c < cols; ++c) {
        for (int r = 0; r < 3 * nv; ++r) {
            m(r, c) = rng.normal();
        }
    }
    for (int it = 0; it < smoothing_iters; ++it) {
        Eigen::MatrixXd next(3 * nv, cols);
        for (int v = 0; v < nv; ++v) {
            const double w = 1.0 / static_cast<double>(nbrs[v].size() + 1);
            for (int k = 0; k < 3; ++k) {
                Eigen::RowVectorXd acc = m.row(3 * v + k);
                for (int u : nbrs[v]) {
                    acc += m.row(3 * u + k);
                }
                next.row(3 * v + k) = w * acc;
            }
        }
        m = std::move(next);
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(3 * nv, cols);
    // Fix the sign of each column so that the result depends only on the seed.
    for (int c = 0; c < cols; ++c) {
        if (q.col(c).dot(m.col(c)) < 0.0) {
            q.col(c) *= -1.0;
        }
    }
    return q;
}

} // namespace

BasisModel synth_basis(std::uint64_t seed, const ModelDims& dims)
{
    if (dims.id <= 0 || dims.tex <= 0 || dims.exp <= 0) {
        throw ConfigError("model dims must be positive");
    }
    if (dims.vertices < kNumLandmarks) {
        throw ConfigError("synthetic model needs at least 68 vertices, got " + std::to_string(dims.vertices));
    }
    int levels = -1;
    for (int k = 0; k < 8; ++k) {
        if (10 * (1 << (2 * k)) + 2 == dims.vertices) {
            levels = k;
        }
    }
    if (levels < 0) {
        throw ConfigError("vertex count " + std::to_string(dims.vertices) +
                          " is not an icosphere size (10*4^k + 2)");
    }
    const Icosphere sphere = make_icosphere(levels);
    const int nv = static_cast<int>(sphere.vertices.size());

    BasisModel m;
    m.dims = dims;
    m.seed = seed;
    m.faces = sphere.faces;
    m.mean_shape.resize(3 * nv);
    m.mean_tex.resize(3 * nv);
    m.uv_coords.resize(nv, 2);
    const Eigen::Vector3d scale(0.8, 1.0, 0.85);
    for (int v = 0; v < nv; ++v) {
        const Eigen::Vector3d& d = sphere.vertices[v];
        Eigen::Vector3d p = d.cwiseProduct(scale);
        // Nose ridge on the frontal side.
        p[2] += 0.22 * smoothstep(0.5, 0.9, d[2]) * blob(d[0], d[1], 0.0, 0.0, 0.1, 0.16);
        m.mean_shape.segment<3>(3 * v) = p;
        m.mean_tex.segment<3>(3 * v) = face_albedo(d);
        // Frontal spherical unwrap: azimuth and elevation mapped linearly; the
        // back half collapses onto the left/right borders and lies outside the chart.
        const double azimuth = std::clamp(std::atan2(d[0], d[2]), -kPi / 2.0, kPi / 2.0);
        const double elevation = std::asin(std::clamp(d[1], -1.0, 1.0));
        m.uv_coords(v, 0) = std::clamp(0.5 + azimuth / kPi, 0.0, 1.0);
        m.uv_coords(v, 1) = std::clamp(0.5 - elevation / kPi, 0.0, 1.0);
    }

    Rng rng(seed);
    const auto nbrs = vertex_neighbours(nv, m.faces);
    const int smoothing = std::max(2, nv / 32);
    m.id_basis = smooth_orthonormal_basis(rng, nv, dims.id, nbrs, smoothing);
    m.exp_basis = smooth_orthonormal_basis(rng, nv, dims.exp, nbrs, smoothing);
    m.tex_basis = smooth_orthonormal_basis(rng, nv, dims.tex, nbrs, smoothing);

    // Farthest-point sampling over the frontal half, seeded at the most frontal vertex.
    std::vector<int> candidates;
    for (int v = 0; v < nv; ++v) {
        if (m.mean_shape[3 * v + 2] > 0.0) {
            candidates.push_back(v);
        }
    }
    if (static_cast<int>(candidates.size()) < kNumLandmarks) {
        throw ConfigError("not enough frontal vertices for 68 landmarks");
    }
    auto position = [&](int v) { return Eigen::Vector3d(m.mean_shape.segment<3>(3 * v)); };
    int first = candidates.front();
    for (int v : candidates) {
        if (m.mean_shape[3 * v + 2] > m.mean_shape[3 * first + 2]) {
            first = v;
        }
    }
    std::vector<double> dist(candidates.size(), std::numeric_limits<double>::infinity());
    int current = first;
    for (int i = 0; i < kNumLandmarks; ++i) {
        m.landmark_indices[i] = current;
        int best = -1;
        double best_dist = -1.0;
        for (std::size_t c = 0; c < candidates.size(); ++c) {
            dist[c] = std::min(dist[c], (position(candidates[c]) - position(current)).squaredNorm());
            if (dist[c] > best_dist) {
                best_dist = dist[c];
                best = candidates[c];
            }
        }
        current = best;
    }
    m.validate();
    return m;
}

} // namespace mapedit::morph
