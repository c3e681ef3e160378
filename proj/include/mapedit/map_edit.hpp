#pragma once

#include "mapedit/morphable_model.hpp"
#include "mapedit/neural.hpp"
#include "mapedit/renderer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace mapedit::map {

using morph::BasisModel;
using morph::ModelDims;
using morph::MorphParams;
using render::Camera;
using render::Image;
using render::SoftRasterConfig;

/// More than half of the landmarks fell behind the camera.
class DegeneratePoseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training hit a non-finite loss; what() carries the diagnostic summary.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Latent codes

/// L x D latent, one style vector per row. Flattened row-major.
using LatentCode = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct LatentShape {
    int rows = 4;
    int cols = 32;

    int size() const { return rows * cols; }
    bool operator==(const LatentShape&) const = default;
};

Eigen::RowVectorXd flatten_latent(const LatentCode& w);
LatentCode unflatten_latent(const Eigen::RowVectorXd& flat, const LatentShape& shape);

/// n codes with i.i.d. standard normal entries.
std::vector<LatentCode> sample_latent(Rng& rng, int n, const LatentShape& shape);

/// Stacks codes as batch rows (n x L*D).
nn::Matrix stack_latents(const std::vector<LatentCode>& codes);

/// Which latent rows drive each attribute. Identity rows drive both alpha and beta.
/// The same layout is used as the channel mask when extracting directions.
struct ChannelLayout {
    std::vector<int> pose;
    std::vector<int> expression;
    std::vector<int> lighting;
    std::vector<int> identity;

    /// L = 4: pose {0}, expression {1}, lighting {2}, identity {3}.
    static ChannelLayout desk();
    /// L = 18: pose 0-3, expression 4-6, lighting 8-9, identity the remaining rows.
    static ChannelLayout paper();
    /// desk() for 4 rows, paper() for 18; other row counts are rejected.
    static ChannelLayout for_rows(int rows);

    void validate(int rows) const;
};

enum class Attribute { Pose, Lighting, Expression };

const char* attribute_name(Attribute a);
Attribute parse_attribute(const std::string& name);

const std::vector<int>& rows_for(const ChannelLayout& layout, Attribute a);

// ---------------------------------------------------------------------------
// Toy generator

struct GeneratorConfig {
    LatentShape latent;
    std::uint64_t seed = 7;
    double preact_gain = 0.8;      // std of each pre-activation over the latent prior
    double bias_std = 0.1;         // coefficient-block biases; pose biases are zero
    double yaw_max_deg = 40.0;
    double pitch_max_deg = 30.0;
    double roll_max_deg = 8.0;
    double translation_max = 0.1;
    double alpha_scale = 1.5;
    double beta_scale = 1.0;
    double delta_scale = 1.5;
    double light_level = 0.6;      // band-0 irradiance, i.e. band-0 coefficient light_level / c0
    double light_scale = 0.4;

    nlohmann::json to_json() const;
    static GeneratorConfig from_json(const nlohmann::json& j);
};

/// Frozen stand-in for a pretrained image generator: G(w) = render(T(w)) with
/// T(w) = squash(W_g * flatten(w) + b_g). W_g is block structured so each group of
/// latent rows controls one group of parameters.
class ToyGenerator {
public:
    ToyGenerator(const BasisModel& basis, const Camera& camera, const SoftRasterConfig& raster,
                 const GeneratorConfig& config);

    /// T(w). Only the oracle estimator, evaluation code and tests look at this.
    MorphParams params_for(const LatentCode& w) const;

    /// Gradient of <grad_params, T(w)> with respect to the flattened latent.
    Eigen::RowVectorXd params_vjp(const LatentCode& w, const Eigen::VectorXd& grad_params) const;

    Image generate(const LatentCode& w) const;

    const BasisModel& basis() const { return *basis_; }
    const Camera& camera() const { return camera_; }
    const SoftRasterConfig& raster() const { return raster_; }
    const GeneratorConfig& config() const { return config_; }
    const ChannelLayout& layout() const { return layout_; }
    const Eigen::MatrixXd& weight() const { return weight_; }
    const Eigen::VectorXd& bias() const { return bias_; }

private:
    Eigen::VectorXd preactivation(const LatentCode& w) const;

    const BasisModel* basis_;
    Camera camera_;
    SoftRasterConfig raster_;
    GeneratorConfig config_;
    ChannelLayout layout_;
    Eigen::MatrixXd weight_; // param_size x L*D
    Eigen::VectorXd bias_;
    Eigen::VectorXd center_; // squash(z) = center + scale * tanh(z)
    Eigen::VectorXd scale_;
};

// ---------------------------------------------------------------------------
// Parameter estimation

enum class EstimatorBackend { Oracle, Fit };

const char* backend_name(EstimatorBackend b);
EstimatorBackend parse_backend(const std::string& name);

struct FitConfig {
    int coarse_size = 32;        // resolution of the grid search and first Adam stage
    int starts = 10;             // best separated grid cells refined briefly before committing
    int probe_size = 16;         // resolution of those short probes
    int probe_steps = 50;
    int coarse_steps = 170;
    int fine_steps = 80;         // full-resolution steps; all stages together stay within 500
    double grid_yaw_deg = 45.0;  // grid covers [-grid_yaw, grid_yaw] x [-grid_pitch, grid_pitch]
    double grid_pitch_deg = 30.0;
    double grid_step_deg = 7.5;
    double lr_rotation = 0.02;
    double lr_translation = 0.004;
    double lr_coeff = 0.08;
    double lr_lighting = 0.08;
    int restarts = 3;            // extra full runs from the next-ranked candidates
    double restart_l1 = 0.003;   // a run that ends above this tries the next candidate
    double converged_l1 = 0.02;  // final mean-L1 above this flags the result
    double coeff_prior = 0.0;    // weight of mean(c^2) over the alpha/beta/delta coefficients
    int regrid = 0;              // re-run the pose grid with the fitted coefficients this many times

    nlohmann::json to_json() const;
    static FitConfig from_json(const nlohmann::json& j);
};

struct FitResult {
    MorphParams params;
    double image_l1 = 0.0;
    int steps = 0;
    bool converged = true;
};

/// Analysis-by-synthesis: coarse yaw/pitch grid from the mean face, short probes from
/// the best grid cells, then Adam on the mean-L1 image difference at coarse and full
/// resolution. A run that ends poorly is retried from the next-ranked probe.
FitResult fit_params(const Image& target, const BasisModel& basis, const Camera& camera,
                     const SoftRasterConfig& raster, const FitConfig& config = {},
                     const MorphParams* init = nullptr);

// ---------------------------------------------------------------------------
// Losses (mean-reduced L1 unless noted)

/// Mean absolute difference of R(p) and R(p_hat).
double loss_rendered(const MorphParams& p, const MorphParams& p_hat, const BasisModel& basis, const Camera& camera,
                     const SoftRasterConfig& raster);
double loss_param(const MorphParams& p, const MorphParams& p_hat);
double loss_latent(const LatentCode& w, const LatentCode& w_hat);

struct LandmarkLoss {
    double value = 0.0;
    int invalid = 0; // landmark pairs excluded because either side was behind the camera
};

/// Mean over the 68 landmarks of the per-landmark 2-D L1, summed over the (w) and
/// (edit) pairs. Throws DegeneratePoseError when more than half of a pair is invalid.
LandmarkLoss loss_landmark(const MorphParams& p_w, const MorphParams& p_hat_w, const MorphParams& p_edit,
                           const MorphParams& p_hat_edit, const BasisModel& basis, const Camera& camera);

struct RegWeights {
    double alpha = 1e-3;
    double beta = 1e-3;
    double delta = 1e-3;
};

double loss_reg(const MorphParams& p, const RegWeights& weights);

struct LossWeights {
    double ren = 1.0;
    double p = 1.0;
    double lat = 1.0;
    double lm = 0.01;
    bool reg = true;

    nlohmann::json to_json() const;
    static LossWeights from_json(const nlohmann::json& j);
};

struct LossComponents {
    double ren = 0.0;
    double p = 0.0;
    double lat = 0.0;
    double lm = 0.0;
    double reg = 0.0; // already includes its lambdas
};

/// L_ren + lambda_p L_p + lambda_lat L_lat + lambda_lm L_lm + L_reg.
double loss_total(const LossComponents& c, const LossWeights& w);

// ---------------------------------------------------------------------------
// Edits

struct EditRanges {
    double yaw_max_deg = 40.0;
    double pitch_max_deg = 30.0;
    double light_half_width = 0.5;
    double light_band0_offset = 0.6; // band-0 irradiance added to every channel
    int expression_first = 30;
    int expression_picks = 2;
    double expression_max = 1.5;

    nlohmann::json to_json() const;
    static EditRanges from_json(const nlohmann::json& j);
};

struct EditRequest {
    Attribute attribute = Attribute::Pose;
    std::optional<double> yaw;   // radians
    std::optional<double> pitch; // radians
    std::vector<double> lighting;                    // 27 SH coefficients, band-major
    std::vector<std::pair<int, double>> expression; // (index, value)

    static EditRequest pose(std::optional<double> yaw_rad, std::optional<double> pitch_rad);
    static EditRequest light(std::vector<double> gamma);
    static EditRequest expr(std::vector<std::pair<int, double>> entries);
};

/// Throws ConfigError naming the offending field.
void validate_edit(const EditRequest& edit, const ModelDims& dims, const EditRanges& ranges);

/// Copy of p with the edited block replaced. Other blocks are untouched.
MorphParams apply_edit(const MorphParams& p, const EditRequest& edit);

struct SampledEdit {
    Attribute attribute;
    MorphParams params;
};

/// Uniform attribute choice, then sample_request for it.
SampledEdit sample_edit(const MorphParams& p, Rng& rng, const EditRanges& ranges);

/// Random targets for one attribute: pose angles, a full lighting vector, or two
/// expression entries among the first `expression_first`.
EditRequest sample_request(Attribute attr, const MorphParams& p, Rng& rng, const EditRanges& ranges);

// ---------------------------------------------------------------------------
// Networks and training

struct MapEditNets {
    nn::Mlp mf; // latent -> params
    nn::Mlp mi; // params -> latent
    LatentShape latent;
    ModelDims dims;
    long iterations = 0;

    /// Both MLPs Kaiming-initialised from `seed`.
    static MapEditNets init(const LatentShape& latent, const ModelDims& dims, int hidden, std::uint64_t seed);

    MorphParams forward_params(const LatentCode& w) const;
    LatentCode inverse_latent(const MorphParams& p) const;
    /// M_i(M_f(w)).
    LatentCode reconstruct(const LatentCode& w) const;
};

struct TrainConfig {
    LossWeights weights;
    RegWeights reg;
    nn::AdamConfig adam;
    int batch = 2;
    int iterations = 2000;
    int hidden = 256;
    bool cosine_lr = true; // decay lr to zero over `iterations` along a half cosine
    EstimatorBackend estimator = EstimatorBackend::Oracle;
    FitConfig fit;
    EditRanges ranges;
    std::uint64_t seed = 1;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainLogRow {
    long iter = 0;
    LossComponents components;
    double total = 0.0;
    std::string attr;
};

struct TrainResult {
    MapEditNets nets;
    std::vector<TrainLogRow> log;
};

/// Per iteration: sample w, I_w = G(w), P_hat_w = E(I_w), P_w = M_f(w), w_hat = M_i(P_w),
/// (attr, P_edit) = sample_edit(P_w), w_hat_edit = M_i(P_edit), P_hat_edit = M_f(w_hat_edit),
/// then one joint Adam step on the total loss. The callback sees every log row.
TrainResult train(const ToyGenerator& gen, const TrainConfig& config,
                  const std::function<void(const TrainLogRow&)>& on_row = {});

void write_train_log_csv(std::ostream& os, const std::vector<TrainLogRow>& rows);

// ---------------------------------------------------------------------------
// Directions and editing

enum class DirectionSign { Paper, Reversed };

const char* sign_name(DirectionSign s);
DirectionSign parse_sign(const std::string& name);

/// Zeroes every row not listed in `rows`.
LatentCode apply_channel_mask(const LatentCode& d, const std::vector<int>& rows);

/// d_att = w_hat - w_hat_edit (Paper) or w_hat_edit - w_hat (Reversed), masked to the
/// attribute's rows. Refuses nets that were never trained.
LatentCode extract_direction(const MapEditNets& nets, const LatentCode& w, const EditRequest& edit,
                             const ChannelLayout& layout, DirectionSign sign);

struct EditResult {
    LatentCode direction;
    LatentCode w_edited;
    MorphParams params_before; // M_f(w)
    MorphParams params_edit;   // requested, M_f(w) with the edit applied
    Image image;
    std::optional<FitResult> achieved;
};

/// I_f = G(w + d_att); refits the result when `refit` is set.
EditResult edit_image(const ToyGenerator& gen, const MapEditNets& nets, const LatentCode& w, const EditRequest& edit,
                      DirectionSign sign, bool refit, const FitConfig& fit = {});

struct InvertConfig {
    int steps = 300;
    double lr = 0.05;
};

/// Latent-space Adam descent on the mean-L1 between G(w) and `image`, from w = 0.
LatentCode invert(const ToyGenerator& gen, const Image& image, const InvertConfig& config = {});

} // namespace mapedit::map
