#include "mapedit/evalsuite.hpp"

#include "mapedit/png_io.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace mapedit::eval {

using map::EstimatorBackend;
using morph::Block;
using morph::block_range;
using render::Image;

std::vector<SweepAngle> default_angles()
{
    std::vector<SweepAngle> out;
    for (double d : {-40.0, -30.0, -20.0, -10.0, 10.0, 20.0, 30.0, 40.0}) {
        out.push_back({Axis::Yaw, d});
    }
    for (double d : {-30.0, -20.0, -10.0, 10.0, 20.0, 30.0}) {
        out.push_back({Axis::Pitch, d});
    }
    return out;
}

const char* axis_name(Axis a) { return a == Axis::Yaw ? "yaw" : "pitch"; }

std::vector<SweepAngle> parse_angles(const std::string& text)
{
    if (text == "default") {
        return default_angles();
    }
    std::vector<SweepAngle> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto colon = item.find(':');
        const std::string axis = item.substr(0, colon);
        if (colon == std::string::npos || (axis != "yaw" && axis != "pitch")) {
            throw ConfigError("angles: expected yaw:<deg> or pitch:<deg>, got '" + item + "'");
        }
        SweepAngle a;
        a.axis = axis == "yaw" ? Axis::Yaw : Axis::Pitch;
        try {
            std::size_t used = 0;
            const std::string num = item.substr(colon + 1);
            a.deg = std::stod(num, &used);
            if (used != num.size()) {
                throw std::invalid_argument(num);
            }
        } catch (const std::logic_error&) {
            throw ConfigError("angles: cannot parse '" + item + "'");
        }
        out.push_back(a);
    }
    if (out.empty()) {
        throw ConfigError("angles: empty list");
    }
    return out;
}

nlohmann::json EvalConfig::to_json() const
{
    nlohmann::json a = nlohmann::json::array();
    for (const auto& x : angles) {
        a.push_back({{"axis", axis_name(x.axis)}, {"deg", x.deg}});
    }
    nlohmann::json j = {{"angles", a},
                        {"seeds", seeds},
                        {"seed", seed},
                        {"estimator", map::backend_name(estimator)},
                        {"direction_sign", map::sign_name(sign)},
                        {"fit", fit.to_json()},
                        {"edit_ranges", ranges.to_json()}};
    if (texture_seed) {
        j["texture_seed"] = *texture_seed;
    }
    return j;
}

std::vector<LatentCode> eval_latents(const ToyGenerator& gen, const EvalConfig& config)
{
    std::vector<LatentCode> out;
    for (int s = 0; s < config.seeds; ++s) {
        Rng rng(config.seed + static_cast<std::uint64_t>(s));
        out.push_back(map::sample_latent(rng, 1, gen.config().latent).front());
    }
    return out;
}

double identity_similarity(const MorphParams& a, const MorphParams& b)
{
    const double na = a.alpha.norm(), nb = b.alpha.norm();
    if (na == 0.0 && nb == 0.0) {
        return 1.0;
    }
    if (na == 0.0 || nb == 0.0) {
        return 0.0;
    }
    return std::clamp(a.alpha.dot(b.alpha) / (na * nb), -1.0, 1.0);
}

namespace {

struct Sample {
    LatentCode w;
    std::optional<Eigen::VectorXd> texture; // replacement beta for this sample
};

std::vector<Sample> make_samples(const ToyGenerator& gen, const EvalConfig& config)
{
    std::vector<Sample> out;
    for (auto& w : eval_latents(gen, config)) {
        out.push_back({std::move(w), std::nullopt});
    }
    if (config.texture_seed) {
        const auto& gc = gen.config();
        Rng rng(*config.texture_seed);
        for (auto& s : out) {
            Eigen::VectorXd beta(gen.basis().dims.tex);
            for (Eigen::Index i = 0; i < beta.size(); ++i) {
                beta[i] = gc.beta_scale * std::tanh(gc.preact_gain * rng.normal());
            }
            s.texture = std::move(beta);
        }
    }
    return out;
}

// Generator-side parameters of a latent, with the sample's texture override.
MorphParams true_params(const ToyGenerator& gen, const Sample& s, const LatentCode& w)
{
    MorphParams p = gen.params_for(w);
    if (s.texture) {
        p.beta = *s.texture;
    }
    return p;
}

// Estimated parameters of the image of `p`; nullopt for a flagged fit.
std::optional<MorphParams> estimate(const ToyGenerator& gen, const MorphParams& p, const EvalConfig& config)
{
    if (config.estimator == EstimatorBackend::Oracle) {
        return p;
    }
    const Image image = render::render(p, gen.basis(), gen.camera(), gen.raster());
    const map::FitResult r = map::fit_params(image, gen.basis(), gen.camera(), gen.raster(), config.fit);
    if (!r.converged) {
        return std::nullopt;
    }
    return r.params;
}

double axis_angle(const MorphParams& p, Axis a) { return a == Axis::Yaw ? p.yaw() : p.pitch(); }

double block_change(const MorphParams& a, const MorphParams& b, int column)
{
    switch (column) {
    case 0: return (a.alpha - b.alpha).cwiseAbs().mean();
    case 1: return (a.beta - b.beta).cwiseAbs().mean();
    case 2: return (a.delta - b.delta).cwiseAbs().mean();
    case 3: return (a.gamma - b.gamma).cwiseAbs().mean();
    default: return (a.phi - b.phi).cwiseAbs().mean();
    }
}

Eigen::VectorXd block_values(const MorphParams& p, int column)
{
    switch (column) {
    case 0: return p.alpha;
    case 1: return p.beta;
    case 2: return p.delta;
    case 3: return p.gamma;
    default: return p.phi;
    }
}

} // namespace

PoseSweep pose_error_sweep(const ToyGenerator& gen, const MapEditNets& nets, const EvalConfig& config)
{
    if (config.angles.empty()) {
        throw ConfigError("pose_error_sweep: no angles");
    }
    const std::vector<Sample> samples = make_samples(gen, config);
    PoseSweep sweep;
    sweep.rows.resize(config.angles.size());
    for (std::size_t a = 0; a < config.angles.size(); ++a) {
        sweep.rows[a].axis = config.angles[a].axis;
        sweep.rows[a].requested_deg = config.angles[a].deg;
    }
    double total = 0.0;
    int kept = 0;
    for (const Sample& s : samples) {
        const auto source = estimate(gen, true_params(gen, s, s.w), config);
        for (std::size_t a = 0; a < config.angles.size(); ++a) {
            const SweepAngle& ang = config.angles[a];
            PoseErrorRow& row = sweep.rows[a];
            const double rad = deg2rad(ang.deg);
            const auto edit = ang.axis == Axis::Yaw ? map::EditRequest::pose(rad, std::nullopt)
                                                    : map::EditRequest::pose(std::nullopt, rad);
            const LatentCode d = map::extract_direction(nets, s.w, edit, gen.layout(), config.sign);
            const auto achieved = estimate(gen, true_params(gen, s, s.w + d), config);
            if (!achieved || !source) {
                ++row.failures;
                ++sweep.failures;
                continue;
            }
            const double got = rad2deg(axis_angle(*achieved, ang.axis));
            const double err = std::abs(got - ang.deg);
            row.mean_error_deg += err;
            row.mean_achieved_deg += got;
            row.mean_displacement_deg += got - rad2deg(axis_angle(*source, ang.axis));
            row.identity_cosine += identity_similarity(*source, *achieved);
            ++row.samples;
            total += err;
            ++kept;
        }
    }
    for (auto& row : sweep.rows) {
        if (row.samples > 0) {
            const double n = row.samples;
            row.mean_error_deg /= n;
            row.mean_achieved_deg /= n;
            row.mean_displacement_deg /= n;
            row.identity_cosine /= n;
        } else {
            row.mean_error_deg = row.mean_achieved_deg = row.mean_displacement_deg = row.identity_cosine =
                std::numeric_limits<double>::quiet_NaN();
        }
    }
    sweep.mean_error_deg = kept > 0 ? total / kept : std::numeric_limits<double>::quiet_NaN();
    return sweep;
}

double Disentanglement::dominance(map::Attribute row, const std::vector<int>& off_columns) const
{
    const int r = static_cast<int>(row);
    const int on = row == map::Attribute::Pose ? 4 : (row == map::Attribute::Lighting ? 3 : 2);
    double worst = std::numeric_limits<double>::infinity();
    for (int c : off_columns) {
        const double off = matrix[r][c];
        worst = std::min(worst, off > 0.0 ? matrix[r][on] / off : std::numeric_limits<double>::infinity());
    }
    return worst;
}

Disentanglement disentanglement_matrix(const ToyGenerator& gen, const MapEditNets& nets, const EvalConfig& config)
{
    const std::vector<Sample> samples = make_samples(gen, config);
    Disentanglement out;
    std::vector<MorphParams> sources;
    std::array<std::array<double, 5>, 3> sums{};
    std::array<int, 3> counts{};
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Sample& s = samples[i];
        const auto source = estimate(gen, true_params(gen, s, s.w), config);
        if (!source) {
            ++out.failures;
            continue;
        }
        sources.push_back(*source);
        Rng rng(config.seed ^ (0xD15EA5EULL + i));
        const MorphParams mapped = nets.forward_params(s.w);
        for (int a = 0; a < 3; ++a) {
            const auto attr = static_cast<map::Attribute>(a);
            const map::EditRequest edit = map::sample_request(attr, mapped, rng, config.ranges);
            const LatentCode d = map::extract_direction(nets, s.w, edit, gen.layout(), config.sign);
            const auto edited = estimate(gen, true_params(gen, s, s.w + d), config);
            if (!edited) {
                ++out.failures;
                continue;
            }
            for (int c = 0; c < 5; ++c) {
                sums[a][c] += block_change(*edited, *source, c);
            }
            ++counts[a];
        }
    }
    out.samples = static_cast<int>(sources.size());
    for (int c = 0; c < 5; ++c) {
        double spread = 0.0;
        if (!sources.empty()) {
            Eigen::VectorXd mean = Eigen::VectorXd::Zero(block_values(sources.front(), c).size());
            for (const auto& p : sources) {
                mean += block_values(p, c);
            }
            mean /= static_cast<double>(sources.size());
            for (const auto& p : sources) {
                spread += (block_values(p, c) - mean).cwiseAbs().mean();
            }
            spread /= static_cast<double>(sources.size());
        }
        out.spread[c] = spread;
    }
    for (int a = 0; a < 3; ++a) {
        for (int c = 0; c < 5; ++c) {
            const double mean = counts[a] > 0 ? sums[a][c] / counts[a] : 0.0;
            out.matrix[a][c] = out.spread[c] > 0.0 ? mean / out.spread[c] : mean;
        }
    }
    return out;
}

MappingMetrics mapping_metrics(const ToyGenerator& gen, const MapEditNets& nets, int samples, std::uint64_t seed)
{
    if (samples < 1) {
        throw ConfigError("mapping_metrics needs at least one sample");
    }
    Rng rng(seed);
    MappingMetrics m;
    m.samples = samples;
    for (const LatentCode& w : map::sample_latent(rng, samples, gen.config().latent)) {
        const Eigen::VectorXd p = gen.params_for(w).flatten();
        m.forward_l1 += (nets.forward_params(w).flatten() - p).cwiseAbs().mean();
        const LatentCode wi = nets.inverse_latent(gen.params_for(w));
        m.cycle_l1 += (nets.forward_params(wi).flatten() - p).cwiseAbs().mean();
        m.latent_l1 += (nets.reconstruct(w) - w).cwiseAbs().mean();
    }
    m.forward_l1 /= samples;
    m.cycle_l1 /= samples;
    m.latent_l1 /= samples;
    return m;
}

std::vector<AblationVariant> default_ablation(const map::LossWeights& base)
{
    std::vector<AblationVariant> out;
    out.push_back({"full", base});
    auto off = [&](const char* name, auto&& edit) {
        map::LossWeights w = base;
        edit(w);
        out.push_back({name, w});
    };
    off("no_ren", [](map::LossWeights& w) { w.ren = 0.0; });
    off("no_p", [](map::LossWeights& w) { w.p = 0.0; });
    off("no_lat", [](map::LossWeights& w) { w.lat = 0.0; });
    off("no_lm", [](map::LossWeights& w) { w.lm = 0.0; });
    off("no_reg", [](map::LossWeights& w) { w.reg = false; });
    return out;
}

AblationResult run_variant(const ToyGenerator& gen, const map::TrainConfig& base, const AblationVariant& variant,
                           const EvalConfig& eval, int metric_samples, std::uint64_t metric_seed)
{
    map::TrainConfig cfg = base;
    cfg.weights = variant.weights;
    map::TrainResult tr = map::train(gen, cfg);
    AblationResult r;
    r.name = variant.name;
    r.weights = variant.weights;
    r.log = std::move(tr.log);
    r.nets = std::move(tr.nets);
    r.mapping = mapping_metrics(gen, r.nets, metric_samples, metric_seed);
    if (eval.seeds > 0 && !eval.angles.empty()) {
        r.pose = pose_error_sweep(gen, r.nets, eval);
    }
    return r;
}

std::vector<AblationResult> run_ablation(const ToyGenerator& gen, const map::TrainConfig& base,
                                         const std::vector<AblationVariant>& variants, const EvalConfig& eval,
                                         int metric_samples, std::uint64_t metric_seed)
{
    std::vector<AblationResult> out;
    for (const auto& v : variants) {
        out.push_back(run_variant(gen, base, v, eval, metric_samples, metric_seed));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

// JSON has no NaN; missing means are written as null.
nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

nlohmann::json sweep_json(const PoseSweep& s)
{
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : s.rows) {
        rows.push_back({{"axis", axis_name(r.axis)},
                        {"requested_deg", r.requested_deg},
                        {"mean_error_deg", num(r.mean_error_deg)},
                        {"mean_achieved_deg", num(r.mean_achieved_deg)},
                        {"mean_displacement_deg", num(r.mean_displacement_deg)},
                        {"identity_cosine", num(r.identity_cosine)},
                        {"samples", r.samples},
                        {"failures", r.failures}});
    }
    return {{"rows", rows}, {"mean_error_deg", num(s.mean_error_deg)}, {"failures", s.failures}};
}

nlohmann::json mapping_json(const MappingMetrics& m)
{
    return {{"forward_l1", m.forward_l1}, {"cycle_l1", m.cycle_l1}, {"latent_l1", m.latent_l1}, {"samples", m.samples}};
}

} // namespace

nlohmann::json EvalReport::to_json() const
{
    nlohmann::json j;
    j["metadata"] = metadata;
    if (pose) {
        j["pose_error"] = sweep_json(*pose);
    }
    if (disentanglement) {
        const auto& d = *disentanglement;
        nlohmann::json rows = nlohmann::json::object();
        for (int a = 0; a < 3; ++a) {
            nlohmann::json row = nlohmann::json::object();
            for (int c = 0; c < 5; ++c) {
                row[kBlockNames[c]] = d.matrix[a][c];
            }
            rows[map::attribute_name(static_cast<map::Attribute>(a))] = row;
        }
        nlohmann::json spread = nlohmann::json::object();
        for (int c = 0; c < 5; ++c) {
            spread[kBlockNames[c]] = d.spread[c];
        }
        j["disentanglement"] = {{"matrix", rows}, {"spread", spread}, {"samples", d.samples}, {"failures", d.failures}};
    }
    if (mapping) {
        j["mapping"] = mapping_json(*mapping);
    }
    if (!ablation.empty()) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& r : ablation) {
            nlohmann::json e = {{"name", r.name},
                                {"weights", r.weights.to_json()},
                                {"mapping", mapping_json(r.mapping)},
                                {"final_total", r.log.empty() ? 0.0 : r.log.back().total}};
            if (!r.pose.rows.empty()) {
                e["pose_error"] = sweep_json(r.pose);
            }
            arr.push_back(e);
        }
        j["ablation"] = arr;
    }
    return j;
}

void write_pose_csv(std::ostream& os, const PoseSweep& sweep)
{
    os << "axis,requested_deg,mean_error_deg,mean_achieved_deg,mean_displacement_deg,identity_cosine,samples,failures\n";
    os << std::setprecision(10);
    for (const auto& r : sweep.rows) {
        os << axis_name(r.axis) << ',' << r.requested_deg << ',' << r.mean_error_deg << ',' << r.mean_achieved_deg << ','
           << r.mean_displacement_deg << ',' << r.identity_cosine << ',' << r.samples << ',' << r.failures << '\n';
    }
}

void write_disentanglement_csv(std::ostream& os, const Disentanglement& d)
{
    os << "edited";
    for (const char* n : kBlockNames) {
        os << ',' << n;
    }
    os << '\n' << std::setprecision(10);
    for (int a = 0; a < 3; ++a) {
        os << map::attribute_name(static_cast<map::Attribute>(a));
        for (int c = 0; c < 5; ++c) {
            os << ',' << d.matrix[a][c];
        }
        os << '\n';
    }
}

void write_report(const std::filesystem::path& dir, const EvalReport& report)
{
    std::filesystem::create_directories(dir);
    io::write_file(dir / "report.json", report.to_json().dump(2) + "\n");
    if (report.pose) {
        std::ostringstream os;
        write_pose_csv(os, *report.pose);
        io::write_file(dir / "pose_error.csv", os.str());
    }
    if (report.disentanglement) {
        std::ostringstream os;
        write_disentanglement_csv(os, *report.disentanglement);
        io::write_file(dir / "disentanglement.csv", os.str());
    }
    if (!report.ablation.empty()) {
        std::ostringstream os;
        os << "name,lambda_ren,lambda_p,lambda_lat,lambda_lm,reg,forward_l1,cycle_l1,latent_l1,pose_error_deg,final_total\n";
        os << std::setprecision(10);
        for (const auto& r : report.ablation) {
            os << r.name << ',' << r.weights.ren << ',' << r.weights.p << ',' << r.weights.lat << ',' << r.weights.lm
               << ',' << (r.weights.reg ? 1 : 0) << ',' << r.mapping.forward_l1 << ',' << r.mapping.cycle_l1 << ','
               << r.mapping.latent_l1 << ',' << (r.pose.rows.empty() ? std::nan("") : r.pose.mean_error_deg) << ','
               << (r.log.empty() ? 0.0 : r.log.back().total) << '\n';
            std::ostringstream log;
            map::write_train_log_csv(log, r.log);
            io::write_file(dir / ("ablation_" + r.name + "_log.csv"), log.str());
        }
        io::write_file(dir / "ablation.csv", os.str());
    }
}

} // namespace mapedit::eval
