#pragma once

#include "mapedit/map_edit.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace mapedit::eval {

using map::LatentCode;
using map::MapEditNets;
using map::ToyGenerator;
using morph::MorphParams;

enum class Axis { Yaw, Pitch };

struct SweepAngle {
    Axis axis = Axis::Yaw;
    double deg = 0.0;
};

/// Yaw +-10/20/30/40 and pitch +-10/20/30, negative first within each axis.
std::vector<SweepAngle> default_angles();
/// Comma separated entries such as "yaw:20,pitch:-10".
std::vector<SweepAngle> parse_angles(const std::string& text);
const char* axis_name(Axis a);

struct EvalConfig {
    std::vector<SweepAngle> angles = default_angles();
    int seeds = 50;
    std::uint64_t seed = 1000; // sample s uses Rng(seed + s)
    map::EstimatorBackend estimator = map::EstimatorBackend::Fit;
    map::FitConfig fit;
    map::DirectionSign sign = map::DirectionSign::Reversed;
    map::EditRanges ranges; // used for the sampled edits of the disentanglement matrix
    /// When set, every rendered source/edited image gets its texture block redrawn from
    /// this seed; nothing else changes.
    std::optional<std::uint64_t> texture_seed;

    nlohmann::json to_json() const;
};

/// The latent codes an evaluation with `config` looks at.
std::vector<LatentCode> eval_latents(const ToyGenerator& gen, const EvalConfig& config);

/// Cosine between the alpha blocks; 1 when both are zero.
double identity_similarity(const MorphParams& a, const MorphParams& b);

struct PoseErrorRow {
    Axis axis = Axis::Yaw;
    double requested_deg = 0.0;
    double mean_error_deg = 0.0;        // |requested - achieved|
    double mean_achieved_deg = 0.0;
    double mean_displacement_deg = 0.0; // achieved - source estimate on the same axis
    double identity_cosine = 0.0;       // alpha cosine of source and edited estimates
    int samples = 0;
    int failures = 0;                   // fits flagged as not converged, left out of the means
};

struct PoseSweep {
    std::vector<PoseErrorRow> rows;
    double mean_error_deg = 0.0; // over all rows' kept samples
    int failures = 0;
};

/// Requests each angle on each sample, edits, estimates the result and tabulates the error.
PoseSweep pose_error_sweep(const ToyGenerator& gen, const MapEditNets& nets, const EvalConfig& config);

/// Columns: alpha, beta, delta, gamma, phi.
inline constexpr std::array<const char*, 5> kBlockNames = {"alpha", "beta", "delta", "gamma", "phi"};

struct Disentanglement {
    // Rows pose, lighting, expression. Each entry is the mean absolute change of the
    // estimated block, divided by that block's mean absolute deviation over the sources.
    std::array<std::array<double, 5>, 3> matrix{};
    std::array<double, 5> spread{};
    int samples = 0;
    int failures = 0;

    /// Smallest ratio of the on-target entry to each listed off-target entry in `row`.
    double dominance(map::Attribute row, const std::vector<int>& off_columns) const;
};

/// One sampled edit per attribute per sample.
Disentanglement disentanglement_matrix(const ToyGenerator& gen, const MapEditNets& nets, const EvalConfig& config);

struct MappingMetrics {
    double forward_l1 = 0.0; // mean |M_f(w) - T(w)|
    double cycle_l1 = 0.0;   // mean |M_f(M_i(p)) - p|, p = T(w)
    double latent_l1 = 0.0;  // mean |M_i(M_f(w)) - w|
    int samples = 0;
};

MappingMetrics mapping_metrics(const ToyGenerator& gen, const MapEditNets& nets, int samples, std::uint64_t seed);

struct AblationVariant {
    std::string name;
    map::LossWeights weights;
};

/// full, then each of L_ren, L_p, L_lat, L_lm, L_reg switched off.
std::vector<AblationVariant> default_ablation(const map::LossWeights& base);

struct AblationResult {
    std::string name;
    map::LossWeights weights;
    std::vector<map::TrainLogRow> log;
    MappingMetrics mapping;
    PoseSweep pose;
    MapEditNets nets;
};

AblationResult run_variant(const ToyGenerator& gen, const map::TrainConfig& base, const AblationVariant& variant,
                           const EvalConfig& eval, int metric_samples = 200, std::uint64_t metric_seed = 999);
std::vector<AblationResult> run_ablation(const ToyGenerator& gen, const map::TrainConfig& base,
                                         const std::vector<AblationVariant>& variants, const EvalConfig& eval,
                                         int metric_samples = 200, std::uint64_t metric_seed = 999);

struct EvalReport {
    nlohmann::json metadata;
    std::optional<PoseSweep> pose;
    std::optional<Disentanglement> disentanglement;
    std::optional<MappingMetrics> mapping;
    std::vector<AblationResult> ablation;

    nlohmann::json to_json() const;
};

void write_pose_csv(std::ostream& os, const PoseSweep& sweep);
void write_disentanglement_csv(std::ostream& os, const Disentanglement& d);
/// report.json, pose_error.csv, disentanglement.csv and ablation.csv / ablation_<name>_log.csv when present.
void write_report(const std::filesystem::path& dir, const EvalReport& report);

} // namespace mapedit::eval
