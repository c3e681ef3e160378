#pragma once

#include "mapedit/map_edit.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mapedit::uv {

using morph::BasisModel;
using morph::MorphParams;
using render::Camera;
using render::Image;
using render::SoftRasterConfig;

struct View {
    double yaw_deg = 0.0;
    double pitch_deg = 0.0;

    bool operator==(const View&) const = default;
};

struct ViewSpec {
    std::vector<View> views;

    /// Six views: yaw -40, -20, 20, 40 at pitch 0, then pitch -20 and 20 at yaw 0.
    static ViewSpec defaults();
    /// "default" or a comma separated list of yaw:pitch pairs in degrees, e.g. "0:0,30:0".
    static ViewSpec parse(const std::string& text);

    /// At least one view and every angle inside the pose edit ranges.
    void validate(const map::EditRanges& ranges) const;
    nlohmann::json to_json() const;
};

struct ViewSample {
    View view;
    Image image;
    MorphParams params;   // estimated (fit) or generator-side (oracle) parameters of `image`
    double fit_l1 = 0.0;  // image residual of the fit; 0 for the oracle
};

/// One pose edit per view. The parameters that go with each image come from the
/// analysis-by-synthesis fit, or straight from the generator with the oracle backend.
std::vector<ViewSample> multiview(const map::ToyGenerator& gen, const map::MapEditNets& nets,
                                  const map::LatentCode& w, const ViewSpec& views, map::DirectionSign sign,
                                  map::EstimatorBackend backend, const map::FitConfig& fit = {});

/// Texel grid over the UV chart. Texel (x, y) has its centre at ((x + .5) / R, (y + .5) / R);
/// row 0 is v = 0.
class UvRaster {
public:
    struct Hit {
        int face = -1;
        Eigen::Vector3d bary = Eigen::Vector3d::Zero();
    };

    UvRaster(const BasisModel& basis, int resolution);

    int resolution() const { return resolution_; }
    int chart_texels() const { return chart_texels_; }
    /// Chart face and barycentrics under a texel centre, if any.
    const std::optional<Hit>& texel(int x, int y) const { return texels_[static_cast<std::size_t>(y) * resolution_ + x]; }
    /// Same lookup for an arbitrary uv point (linear scan over chart faces).
    std::optional<Hit> locate(const Eigen::Vector2d& uv) const;

private:
    const BasisModel* basis_;
    int resolution_;
    int chart_texels_ = 0;
    std::vector<int> chart_;
    std::vector<std::optional<Hit>> texels_;
};

struct ViewUnwrap {
    Image colors;                   // R x R
    std::vector<double> visibility; // R x R, row-major; 0 off the chart
};

/// Projects every chart texel's surface point into the image and samples it bilinearly.
ViewUnwrap unwrap(const Image& image, const MorphParams& params, const BasisModel& basis, const Camera& camera,
                  const UvRaster& raster);

/// Colour and visibility of a single surface point, as unwrap computes them per texel.
struct SurfaceSample {
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
    double visibility = 0.0;
};
SurfaceSample sample_surface(const Image& image, const MorphParams& params, const BasisModel& basis,
                             const Camera& camera, const UvRaster::Hit& hit);

struct UvAtlas {
    int resolution = 0;
    std::vector<View> views;
    std::vector<Image> maps;               // U_i
    std::vector<std::vector<double>> masks; // m_i, R x R row-major
    Image blended;                         // U_f
    std::vector<bool> covered;             // chart texels seen by at least one view
    int chart_texels = 0;
    int hole_texels = 0;

    double hole_fraction() const { return chart_texels > 0 ? static_cast<double>(hole_texels) / chart_texels : 0.0; }
    nlohmann::json metadata() const;
};

/// The most visible view owns each texel (lowest index on ties); each view's ownership
/// is then extended by a linear ramp `feather` texels wide wherever that view still
/// sees the texel, and the weights are renormalised. Weights are multiples of 2^-20,
/// so they sum to exactly 1 on covered texels.
UvAtlas blend(const std::vector<ViewUnwrap>& unwraps, const UvRaster& raster, const std::vector<View>& views = {},
              int feather = 3);

struct RerenderResult {
    Image image;
    int hole_vertices = 0; // visible vertices whose uv landed on uncovered texels
};

/// Renders `params` with per-vertex colours read from U_f at the vertex uv coordinates.
RerenderResult rerender_check(const UvAtlas& atlas, const MorphParams& params, const BasisModel& basis,
                              const Camera& camera, const SoftRasterConfig& raster);

/// view_<i>.png for the source images (when given), mask_<i>.png, uf.png and atlas.json.
void export_atlas(const std::filesystem::path& dir, const UvAtlas& atlas,
                  const std::vector<ViewSample>& samples = {});

} // namespace mapedit::uv
