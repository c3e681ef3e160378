#pragma once

#include "mapedit/morphable_model.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <vector>

namespace mapedit::render {

using morph::BasisModel;
using morph::MorphParams;
using morph::PointCloud;

/// Pinhole camera on the +z axis looking towards the origin (along -z).
///
/// Image coordinates: u grows to the right, v grows downwards, pixel (x, y)
/// has its centre at (x + 0.5, y + 0.5).
struct Camera {
    double focal = 224.0;
    int width = 64;
    int height = 64;
    double cx = 32.0;
    double cy = 32.0;
    double distance = 10.0; // camera centre at (0, 0, distance)
    double znear = 5.0;     // depth range used to normalise the aggregation depth
    double zfar = 15.0;

    /// Default camera for a square image: focal 3.5 * size, principal point at the centre.
    static Camera square(int size);

    void validate() const;
};

/// H x W x 3 intensities in [0,1], row-major, channels interleaved.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> data;
    Eigen::Vector3d background = Eigen::Vector3d::Zero();

    Image() = default;
    Image(int w, int h, const Eigen::Vector3d& fill = Eigen::Vector3d::Zero());

    double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

    /// Bilinear sample at continuous pixel coordinates (u, v), pixel centres at +0.5; clamps at borders.
    Eigen::Vector3d sample_bilinear(double u, double v) const;

    bool same_shape(const Image& other) const { return width == other.width && height == other.height; }
};

/// Mean absolute difference over all pixels and channels.
double mean_abs_diff(const Image& a, const Image& b);

/// Frame of the normals fed to the SH lighting. Head: lighting moves with the face,
/// so a surface point looks the same from every pose. Camera: lighting stays fixed
/// while the head turns.
enum class ShadingFrame { Head, Camera };

struct SoftRasterConfig {
    double sigma = 0.8192;     // coverage sharpness, pixel^2
    double gamma_agg = 1e-2;   // depth softmax temperature on normalised depth
    Eigen::Vector3d background = Eigen::Vector3d::Zero();
    double cutoff = 20.0;      // (pixel, face) pairs with signed dist^2 < -cutoff * sigma are dropped
    ShadingFrame shading = ShadingFrame::Head;

    /// sigma = 1e-4 * (image diagonal)^2, gamma_agg = 1e-2.
    static SoftRasterConfig defaults_for(const Camera& camera);

    void validate() const;
};

/// Screen-space mesh handed to the rasteriser.
struct ScreenMesh {
    Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor> xy; // pixels
    Eigen::VectorXd depth;                                          // distance along the optical axis
    Eigen::VectorXd znorm;                                          // (zfar - depth) / (zfar - znear); larger is closer
    PointCloud colors;
    std::vector<morph::Face> faces;
};

/// Camera-space vertices -> screen mesh (colours copied through).
ScreenMesh project_mesh(const PointCloud& camera_vertices, const PointCloud& colors,
                        std::span<const morph::Face> faces, const Camera& camera);

/// Cotangents of a soft rasterisation with respect to its screen-space inputs.
struct ScreenGradient {
    Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor> xy;
    Eigen::VectorXd znorm;
    PointCloud colors;
};

/// Soft rasteriser: sigmoid coverage of the signed squared distance to each
/// face, softmax-over-depth colour aggregation, and alpha = 1 - prod(1 - coverage)
/// against the background. Faces carry the mean colour and depth of their vertices.
class SoftRasterizer {
public:
    SoftRasterizer(const Camera& camera, const SoftRasterConfig& config);

    Image forward(const ScreenMesh& mesh);

    /// Requires a preceding forward() on the same mesh.
    ScreenGradient backward(const Image& cotangent) const;

    /// Number of (pixel, face) pairs evaluated by the last forward pass.
    std::size_t num_fragments() const { return fragments_.size(); }

private:
    struct Fragment {
        int face;
        double s;            // signed squared distance (pixel^2), positive inside
        double coverage;     // sigmoid(s / sigma)
        double log_q;        // log(1 - coverage)
        double depth_weight; // exp((z - zmax) / gamma_agg)
    };
    struct PixelState {
        double alpha = 0.0;
        double weight_sum = 0.0;
        double zmax = 0.0;
        double log_transmit = 0.0;
        Eigen::Vector3d color = Eigen::Vector3d::Zero();
    };

    Camera camera_;
    SoftRasterConfig config_;
    const ScreenMesh* mesh_ = nullptr;
    std::vector<Fragment> fragments_;
    std::vector<std::uint32_t> pixel_offsets_; // CSR over pixels into fragments_
    std::vector<PixelState> pixels_;
    PointCloud face_colors_;
    Eigen::VectorXd face_z_;
};

/// Forward render with enough state retained to evaluate the vector-Jacobian
/// product with respect to every MorphParams entry.
class RenderTape {
public:
    RenderTape(const BasisModel& basis, const Camera& camera, const SoftRasterConfig& config);

    const Image& forward(const MorphParams& params);

    /// d<cotangent, render(params)>/d params, flattened in MorphParams order.
    Eigen::VectorXd vjp(const Image& cotangent) const;

    const Image& image() const { return image_; }

private:
    const BasisModel* basis_;
    Camera camera_;
    SoftRasterConfig config_;
    SoftRasterizer raster_;
    MorphParams params_;
    Eigen::Matrix3d rotation_;
    PointCloud shape_;          // model space
    PointCloud normal_acc_;     // unnormalised vertex normals, model space
    PointCloud normals_;        // unit normals, model space
    PointCloud normals_cam_;    // rotated
    PointCloud camera_vertices_;
    PointCloud albedo_pre_;     // before clamping
    PointCloud albedo_;
    PointCloud shade_;
    ScreenMesh screen_;
    Image image_;
};

Image render(const MorphParams& params, const BasisModel& basis, const Camera& camera, const SoftRasterConfig& config);

Eigen::VectorXd render_vjp(const MorphParams& params, const BasisModel& basis, const Camera& camera,
                           const SoftRasterConfig& config, const Image& cotangent);

/// Renders the posed geometry of `params` with explicit per-vertex colours (no shading).
Image render_with_colors(const MorphParams& params, const BasisModel& basis, const PointCloud& vertex_colors,
                         const Camera& camera, const SoftRasterConfig& config);

/// Camera-space vertices and unit normals of the posed mesh.
struct PosedGeometry {
    PointCloud vertices;
    PointCloud normals;
};
PosedGeometry posed_geometry(const MorphParams& params, const BasisModel& basis);

struct LandmarkProjection {
    Eigen::Matrix<double, morph::kNumLandmarks, 2, Eigen::RowMajor> points;
    std::array<bool, morph::kNumLandmarks> valid{};
    int num_invalid = 0;
};

/// Pinhole projection of the 68 posed landmarks; landmarks at or behind the camera plane are flagged invalid.
LandmarkProjection project_landmarks(const MorphParams& params, const BasisModel& basis, const Camera& camera);

/// Gradient of sum(cotangent .* points) with respect to the flat parameters; invalid rows are ignored.
Eigen::VectorXd project_landmarks_vjp(const MorphParams& params, const BasisModel& basis, const Camera& camera,
                                      const Eigen::Matrix<double, morph::kNumLandmarks, 2, Eigen::RowMajor>& cotangent);

struct Visibility {
    Eigen::VectorXd score;         // max(0, cos(normal, direction to camera)), 0 when occluded or off-screen
    std::vector<bool> occluded;    // hard depth test against the z-buffer
};

Visibility visibility(const MorphParams& params, const BasisModel& basis, const Camera& camera);

/// Same test on an explicit posed mesh (camera space).
Visibility visibility(const PointCloud& vertices, const PointCloud& normals, std::span<const morph::Face> faces,
                      const Camera& camera);

} // namespace mapedit::render
