#include "mapedit/pipeline.hpp"

#include <array>
#include <cmath>
#include <map>

namespace mapedit::app {

namespace {

constexpr const char* kFormat = "mapedit-nets/1";

nlohmann::json dims_json(const morph::ModelDims& d)
{
    return {{"id", d.id}, {"tex", d.tex}, {"exp", d.exp}, {"vertices", d.vertices}};
}

morph::ModelDims dims_from(const nlohmann::json& j)
{
    morph::ModelDims d;
    d.id = j.value("id", d.id);
    d.tex = j.value("tex", d.tex);
    d.exp = j.value("exp", d.exp);
    d.vertices = j.value("vertices", d.vertices);
    return d;
}

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

} // namespace

nlohmann::json PipelineConfig::to_json() const
{
    return {{"model_seed", model_seed},
            {"dims", dims_json(dims)},
            {"model", model_path ? nlohmann::json(model_path->string()) : nlohmann::json(nullptr)},
            {"image_size", image_size},
            {"generator", generator.to_json()},
            {"direction_sign", map::sign_name(sign)}};
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j)
{
    PipelineConfig c;
    try {
        c.model_seed = j.value("model_seed", c.model_seed);
        if (j.contains("dims")) {
            c.dims = dims_from(j["dims"]);
        }
        if (j.contains("model") && !j["model"].is_null()) {
            c.model_path = j["model"].get<std::string>();
        }
        c.image_size = j.value("image_size", c.image_size);
        if (j.contains("generator")) {
            c.generator = map::GeneratorConfig::from_json(j["generator"]);
        }
        c.sign = map::parse_sign(j.value("direction_sign", std::string(map::sign_name(c.sign))));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("pipeline config: ") + e.what());
    }
    if (c.image_size < 8 || c.image_size > 1024) {
        throw ConfigError("image_size must be in [8, 1024]");
    }
    return c;
}

Pipeline::Pipeline(const PipelineConfig& config) : config_(config)
{
    if (config_.model_path) {
        basis_ = std::make_unique<morph::BasisModel>(morph::BasisModel::load(*config_.model_path));
        config_.dims = basis_->dims;
        config_.model_seed = basis_->seed;
    } else {
        basis_ = std::make_unique<morph::BasisModel>(morph::synth_basis(config_.model_seed, config_.dims));
    }
    const render::Camera camera = render::Camera::square(config_.image_size);
    gen_ = std::make_unique<map::ToyGenerator>(*basis_, camera, render::SoftRasterConfig::defaults_for(camera),
                                               config_.generator);
}

LatentCode Pipeline::latent_for_seed(std::uint64_t seed) const
{
    Rng rng(seed);
    return map::sample_latent(rng, 1, config_.generator.latent).front();
}

Image Pipeline::render_source(const LatentCode& w, std::optional<int> size) const
{
    if (!size || *size == config_.image_size) {
        return gen_->generate(w);
    }
    if (*size < 8 || *size > 1024) {
        throw FieldError("size", "must be in [8, 1024]");
    }
    const render::Camera camera = render::Camera::square(*size);
    return render::render(gen_->params_for(w), *basis_, camera, render::SoftRasterConfig::defaults_for(camera));
}

Pipeline::Edit Pipeline::edit(const MapEditNets& nets, const LatentCode& w, const map::EditRequest& request,
                              std::optional<map::EstimatorBackend> estimator, const map::FitConfig& fit) const
{
    Edit out;
    const bool refit = estimator == map::EstimatorBackend::Fit;
    out.result = map::edit_image(*gen_, nets, w, request, config_.sign, refit, fit);
    if (refit) {
        out.achieved = out.result.achieved->params;
        out.fit_l1 = out.result.achieved->image_l1;
        out.converged = out.result.achieved->converged;
    } else if (estimator == map::EstimatorBackend::Oracle) {
        out.achieved = gen_->params_for(out.result.w_edited);
    }
    return out;
}

Pipeline::Uv Pipeline::complete_uv(const MapEditNets& nets, const LatentCode& w, const uv::ViewSpec& views,
                                   map::EstimatorBackend estimator, const map::FitConfig& fit, int resolution,
                                   int feather) const
{
    views.validate(map::EditRanges{});
    if (resolution < 16 || resolution > 2048) {
        throw FieldError("resolution", "must be in [16, 2048]");
    }
    Uv out;
    out.samples = uv::multiview(*gen_, nets, w, views, config_.sign, estimator, fit);
    const uv::UvRaster raster(*basis_, resolution);
    std::vector<uv::ViewUnwrap> unwraps;
    for (const auto& s : out.samples) {
        unwraps.push_back(uv::unwrap(s.image, s.params, *basis_, gen_->camera(), raster));
    }
    out.atlas = uv::blend(unwraps, raster, views.views, feather);
    return out;
}

void save_model(const std::filesystem::path& path, const Pipeline& pipeline, const map::TrainConfig& train,
                const MapEditNets& nets)
{
    const nlohmann::json header = {{"format", kFormat},
                                   {"pipeline", pipeline.config().to_json()},
                                   {"train", train.to_json()},
                                   {"latent_rows", nets.latent.rows},
                                   {"latent_cols", nets.latent.cols},
                                   {"dims", dims_json(nets.dims)},
                                   {"iterations", nets.iterations}};
    const std::array<const nn::Mlp*, 2> list = {&nets.mf, &nets.mi};
    nn::save_checkpoint(path, header, list);
}

Model load_model(const std::filesystem::path& path)
{
    nn::Checkpoint ck = nn::load_checkpoint(path);
    const auto& h = ck.header;
    if (h.value("format", std::string()) != kFormat || ck.nets.size() != 2) {
        throw FormatError(path.string() + " is not a map-and-edit checkpoint");
    }
    Model m;
    try {
        m.pipeline = std::make_unique<Pipeline>(PipelineConfig::from_json(h.at("pipeline")));
        m.train = map::TrainConfig::from_json(h.at("train"));
        m.nets.latent = {h.at("latent_rows").get<int>(), h.at("latent_cols").get<int>()};
        m.nets.dims = dims_from(h.at("dims"));
        m.nets.iterations = h.at("iterations").get<long>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint header: " + std::string(e.what()));
    }
    if (!(m.nets.dims == m.pipeline->basis().dims) || !(m.nets.latent == m.pipeline->config().generator.latent)) {
        throw FormatError("checkpoint networks do not match the model they name");
    }
    m.nets.mf = std::move(ck.nets[0]);
    m.nets.mi = std::move(ck.nets[1]);
    const int latent = m.nets.latent.size(), params = m.nets.dims.param_size();
    if (m.nets.mf.input_dim() != latent || m.nets.mf.output_dim() != params || m.nets.mi.input_dim() != params ||
        m.nets.mi.output_dim() != latent) {
        throw FormatError("checkpoint network shapes do not match the latent and parameter sizes");
    }
    return m;
}

nlohmann::json params_to_json(const MorphParams& p)
{
    return {{"alpha", to_vec(p.alpha)},
            {"beta", to_vec(p.beta)},
            {"delta", to_vec(p.delta)},
            {"gamma", to_vec(p.gamma)},
            {"phi", to_vec(p.phi)},
            {"t", to_vec(p.t)},
            {"yaw_deg", rad2deg(p.yaw())},
            {"pitch_deg", rad2deg(p.pitch())},
            {"roll_deg", rad2deg(p.roll())}};
}

namespace {

double number(const nlohmann::json& v, const std::string& field)
{
    if (!v.is_number()) {
        throw FieldError(field, "expected a number");
    }
    const double x = v.get<double>();
    if (!std::isfinite(x)) {
        throw FieldError(field, "must be finite");
    }
    return x;
}

} // namespace

map::EditRequest parse_edit(const std::string& attribute, const nlohmann::json& targets, const morph::ModelDims& dims,
                            const map::EditRanges& ranges)
{
    map::Attribute attr;
    try {
        attr = map::parse_attribute(attribute);
    } catch (const ConfigError& e) {
        throw FieldError("attribute", e.what());
    }
    if (!targets.is_object() || targets.empty()) {
        throw FieldError("targets", "must be a non-empty object");
    }
    map::EditRequest req;
    switch (attr) {
    case map::Attribute::Pose: {
        std::optional<double> yaw, pitch;
        for (const auto& [key, value] : targets.items()) {
            if (key == "yaw") {
                yaw = deg2rad(number(value, "targets.yaw"));
            } else if (key == "pitch") {
                pitch = deg2rad(number(value, "targets.pitch"));
            } else {
                throw FieldError("targets." + key, "unknown pose target (use yaw, pitch)");
            }
        }
        req = map::EditRequest::pose(yaw, pitch);
        break;
    }
    case map::Attribute::Lighting: {
        if (targets.size() != 1 || !targets.contains("gamma")) {
            throw FieldError("targets", "lighting expects exactly {\"gamma\": [...]}");
        }
        const auto& g = targets["gamma"];
        if (!g.is_array() || static_cast<int>(g.size()) != morph::kLightingSize) {
            throw FieldError("targets.gamma", "expected " + std::to_string(morph::kLightingSize) + " numbers");
        }
        std::vector<double> gamma;
        for (std::size_t i = 0; i < g.size(); ++i) {
            gamma.push_back(number(g[i], "targets.gamma[" + std::to_string(i) + "]"));
        }
        req = map::EditRequest::light(std::move(gamma));
        break;
    }
    case map::Attribute::Expression: {
        if (targets.size() != 1 || !targets.contains("coefficients") || !targets["coefficients"].is_object() ||
            targets["coefficients"].empty()) {
            throw FieldError("targets", "expression expects {\"coefficients\": {\"<index>\": value}}");
        }
        std::vector<std::pair<int, double>> entries;
        for (const auto& [key, value] : targets["coefficients"].items()) {
            const std::string field = "targets.coefficients." + key;
            std::size_t used = 0;
            int index = -1;
            try {
                index = std::stoi(key, &used);
            } catch (const std::logic_error&) {
                used = 0;
            }
            if (used == 0 || used != key.size()) {
                throw FieldError(field, "index must be an integer");
            }
            entries.emplace_back(index, number(value, field));
        }
        req = map::EditRequest::expr(std::move(entries));
        break;
    }
    }
    try {
        map::validate_edit(req, dims, ranges);
    } catch (const FieldError&) {
        throw;
    } catch (const ConfigError& e) {
        // validate_edit prefixes its messages with the offending name; map it onto the request body.
        const std::string msg = e.what();
        const auto colon = msg.find(": ");
        const std::string name = colon == std::string::npos ? "" : msg.substr(0, colon);
        static const std::map<std::string, std::string> fields = {{"yaw", "targets.yaw"},
                                                                  {"pitch", "targets.pitch"},
                                                                  {"lighting", "targets.gamma"},
                                                                  {"expression", "targets.coefficients"}};
        const auto it = fields.find(name);
        if (it == fields.end()) {
            throw FieldError("targets", colon == std::string::npos ? msg : msg.substr(colon + 2));
        }
        throw FieldError(it->second, msg.substr(colon + 2));
    }
    return req;
}

nlohmann::json edit_to_json(const Pipeline::Edit& edit)
{
    const auto& r = edit.result;
    nlohmann::json j = {{"params_before", params_to_json(r.params_before)},
                        {"params_requested", params_to_json(r.params_edit)},
                        {"d_att_norm", r.direction.norm()},
                        {"requested_yaw_deg", rad2deg(r.params_edit.yaw())},
                        {"requested_pitch_deg", rad2deg(r.params_edit.pitch())}};
    if (edit.achieved) {
        j["params_after"] = params_to_json(*edit.achieved);
        j["achieved_yaw_deg"] = rad2deg(edit.achieved->yaw());
        j["achieved_pitch_deg"] = rad2deg(edit.achieved->pitch());
        j["fit_l1"] = edit.fit_l1;
        j["fit_converged"] = edit.converged;
    }
    return j;
}

nlohmann::json model_info(const Model& model)
{
    const Pipeline& p = *model.pipeline;
    const map::ChannelLayout& layout = p.generator().layout();
    return {{"dims", dims_json(p.basis().dims)},
            {"param_size", p.basis().dims.param_size()},
            {"model_seed", p.basis().seed},
            {"latent", {{"rows", model.nets.latent.rows}, {"cols", model.nets.latent.cols}}},
            {"image_size", p.config().image_size},
            {"pipeline", p.config().to_json()},
            {"train", model.train.to_json()},
            {"iterations", model.nets.iterations},
            {"edit_ranges", model.train.ranges.to_json()},
            {"channel_layout",
             {{"pose", layout.pose},
              {"expression", layout.expression},
              {"lighting", layout.lighting},
              {"identity", layout.identity}}}};
}

} // namespace mapedit::app
