#pragma once

#include "mapedit/map_edit.hpp"
#include "mapedit/uv_completion.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace mapedit::app {

using map::LatentCode;
using map::MapEditNets;
using morph::MorphParams;
using render::Image;

/// A ConfigError that knows which request field was at fault.
class FieldError : public ConfigError {
public:
    FieldError(std::string field, const std::string& what) : ConfigError(field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

struct PipelineConfig {
    std::uint64_t model_seed = 1;
    morph::ModelDims dims;
    std::optional<std::filesystem::path> model_path; // load a saved BasisModel instead of synthesising one
    int image_size = 64;
    map::GeneratorConfig generator;
    map::DirectionSign sign = map::DirectionSign::Reversed;

    nlohmann::json to_json() const;
    static PipelineConfig from_json(const nlohmann::json& j);
};

/// Basis, camera and frozen generator; everything the CLI and the HTTP service share.
class Pipeline {
public:
    explicit Pipeline(const PipelineConfig& config);
    Pipeline(const Pipeline&) = delete;
    Pipeline& operator=(const Pipeline&) = delete;

    const PipelineConfig& config() const { return config_; }
    const morph::BasisModel& basis() const { return *basis_; }
    const map::ToyGenerator& generator() const { return *gen_; }

    /// The latent code behind seed `seed`: one standard normal draw from Rng(seed).
    LatentCode latent_for_seed(std::uint64_t seed) const;

    /// G(w), re-rendered with a square camera of `size` pixels when it differs from the generator's.
    Image render_source(const LatentCode& w, std::optional<int> size = std::nullopt) const;

    struct Edit {
        map::EditResult result;
        std::optional<MorphParams> achieved; // estimate of the edited image, if one was asked for
        double fit_l1 = 0.0;
        bool converged = true;
    };

    /// Applies `request` to `w`. `estimator` picks how the achieved parameters are read
    /// back from the edited image; nullopt skips that step.
    Edit edit(const MapEditNets& nets, const LatentCode& w, const map::EditRequest& request,
              std::optional<map::EstimatorBackend> estimator, const map::FitConfig& fit) const;

    struct Uv {
        std::vector<uv::ViewSample> samples;
        uv::UvAtlas atlas;
    };

    Uv complete_uv(const MapEditNets& nets, const LatentCode& w, const uv::ViewSpec& views,
                   map::EstimatorBackend estimator, const map::FitConfig& fit, int resolution, int feather = 3) const;

private:
    PipelineConfig config_;
    std::unique_ptr<morph::BasisModel> basis_;
    std::unique_ptr<map::ToyGenerator> gen_;
};

/// A trained checkpoint with the pipeline it was trained against.
struct Model {
    std::unique_ptr<Pipeline> pipeline;
    MapEditNets nets;
    map::TrainConfig train;
};

/// Checkpoint bytes are a pure function of the arguments; nothing time- or host-dependent goes in.
void save_model(const std::filesystem::path& path, const Pipeline& pipeline, const map::TrainConfig& train,
                const MapEditNets& nets);
Model load_model(const std::filesystem::path& path);

nlohmann::json params_to_json(const MorphParams& p);

/// Edit targets as the HTTP API and the CLI spell them:
///   pose        {"yaw": deg, "pitch": deg}, either may be left out
///   lighting    {"gamma": [27 numbers]}
///   expression  {"coefficients": {"<index>": value, ...}}
/// Field names in errors are prefixed with "targets.".
map::EditRequest parse_edit(const std::string& attribute, const nlohmann::json& targets, const morph::ModelDims& dims,
                            const map::EditRanges& ranges);

/// result.json / HTTP edit payload.
nlohmann::json edit_to_json(const Pipeline::Edit& edit);

/// Dims, configs, edit ranges and training metadata.
nlohmann::json model_info(const Model& model);

} // namespace mapedit::app
