#pragma once

#include "mapedit/common.hpp"

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mapedit::morph {

/// Dense row-major point sets, one row per vertex.
using PointCloud = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Face = std::array<int, 3>;

constexpr int kLightingSize = 27; // 9 SH bands x 3 colour channels, band-major
constexpr int kShBands = 9;
constexpr int kNumLandmarks = 68;

/// Coefficient counts of the PCA blocks plus the vertex count of the topology.
struct ModelDims {
    int id = 12;
    int tex = 12;
    int exp = 10;
    int vertices = 642;

    /// Length of the flattened parameter vector.
    int param_size() const { return id + tex + exp + kLightingSize + 3 + 3; }

    bool operator==(const ModelDims&) const = default;
};

/// Parameter blocks in flattening order: (alpha, beta, delta, gamma, phi, t).
enum class Block { Identity, Texture, Expression, Lighting, Rotation, Translation };

struct BlockRange {
    int offset;
    int size;
};

/// Offset and length of a block inside the flat parameter vector.
BlockRange block_range(const ModelDims& dims, Block block);

const char* block_name(Block block);

/// Partitioned 3DMM coefficient vector.
///
/// `phi` holds (pitch, yaw, roll) in radians; `gamma` is band-major, so the
/// coefficient of SH band b for colour channel c lives at `gamma[3 * b + c]`.
struct MorphParams {
    Eigen::VectorXd alpha;
    Eigen::VectorXd beta;
    Eigen::VectorXd delta;
    Eigen::VectorXd gamma;
    Eigen::Vector3d phi = Eigen::Vector3d::Zero();
    Eigen::Vector3d t = Eigen::Vector3d::Zero();

    /// All-zero parameters sized for `dims`.
    static MorphParams zeros(const ModelDims& dims);

    /// Zero coefficients with neutral white lighting (band 0 = 1/c0), i.e. shaded colour == albedo.
    static MorphParams neutral(const ModelDims& dims);

    static MorphParams unflatten(const ModelDims& dims, std::span<const double> flat);
    static MorphParams unflatten(const ModelDims& dims, const Eigen::VectorXd& flat)
    {
        return unflatten(dims, std::span<const double>(flat.data(), static_cast<std::size_t>(flat.size())));
    }

    Eigen::VectorXd flatten() const;

    /// Throws ConfigError unless every block has the size implied by `dims`.
    void check_dims(const ModelDims& dims) const;

    double pitch() const { return phi[0]; }
    double yaw() const { return phi[1]; }
    double roll() const { return phi[2]; }
};

/// PCA face model: mean shape/albedo plus orthonormal bases, topology, landmarks and UVs.
struct BasisModel {
    ModelDims dims;
    std::uint64_t seed = 0;
    Eigen::VectorXd mean_shape; // 3V, xyz interleaved per vertex
    Eigen::MatrixXd id_basis;   // 3V x d_a
    Eigen::MatrixXd exp_basis;  // 3V x d_d
    Eigen::VectorXd mean_tex;   // 3V, rgb interleaved per vertex, in [0,1]
    Eigen::MatrixXd tex_basis;  // 3V x d_b
    std::vector<Face> faces;
    std::array<int, kNumLandmarks> landmark_indices{};
    Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor> uv_coords; // V x 2 in [0,1]^2

    int num_vertices() const { return dims.vertices; }

    /// Throws ConfigError if any structural invariant is broken.
    void validate() const;

    /// Faces that belong to the frontal UV chart (all three vertices on the +z half of the mean shape).
    std::vector<int> uv_chart_faces() const;

    void save(const std::filesystem::path& path) const;
    static BasisModel load(const std::filesystem::path& path);

    /// Writes the JSON sidecar (dims and seed) next to a saved model.
    void save_sidecar(const std::filesystem::path& path) const;
};

/// Vertices, colours and normals of one face instance. Colours are in [0,1].
struct Mesh {
    PointCloud vertices;
    PointCloud colors;
    PointCloud normals;
    std::vector<Face> faces;

    int num_vertices() const { return static_cast<int>(vertices.rows()); }
};

/// Area-weighted vertex normals from face cross products.
PointCloud vertex_normals(const PointCloud& vertices, std::span<const Face> faces);

/// Shape S = mean + id*alpha + exp*delta, albedo T = clamp(mean_tex + tex*beta).
Mesh build_mesh(const MorphParams& params, const BasisModel& basis);

/// R = Rz(roll) * Ry(yaw) * Rx(pitch) for phi = (pitch, yaw, roll).
Eigen::Matrix3d rotation_matrix(const Eigen::Vector3d& phi);

/// dR/dphi_k for k = pitch, yaw, roll.
std::array<Eigen::Matrix3d, 3> rotation_jacobian(const Eigen::Vector3d& phi);

/// v' = R v + t, n' = R n.
Mesh pose_transform(const Mesh& mesh, const Eigen::Vector3d& phi, const Eigen::Vector3d& t);

/// Real spherical harmonics for bands l <= 2 at unit direction n.
std::array<double, kShBands> sh_basis(const Eigen::Vector3d& n);

/// Gradient of each SH basis function with respect to the (unnormalised) direction.
std::array<Eigen::Vector3d, kShBands> sh_basis_gradient(const Eigen::Vector3d& n);

/// Band-0 SH constant 1/(2 sqrt(pi)).
constexpr double kShC0 = 0.28209479177387814;

/// Lambertian SH shading: c = clamp(albedo * sum_b gamma[b, ch] * H_b(n)).
Mesh sh_shade(const Mesh& mesh, std::span<const double> gamma);

/// Landmark vertices in fixed order.
PointCloud landmarks3d(const Mesh& mesh, const BasisModel& basis);

/// Deterministic synthetic face model on an anisotropically scaled icosphere.
/// `vertices` must be an icosphere vertex count (10 * 4^k + 2) with at least 68 vertices.
BasisModel synth_basis(std::uint64_t seed, const ModelDims& dims);

} // namespace mapedit::morph
