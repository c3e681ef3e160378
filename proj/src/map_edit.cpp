#include "mapedit/map_edit.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <memory>
#include <set>
#include <sstream>

namespace mapedit::map {

using morph::Block;
using morph::block_range;
using morph::BlockRange;
using nn::Matrix;
using nn::Tensor;

// ---------------------------------------------------------------------------
// Latent codes and layouts

Eigen::RowVectorXd flatten_latent(const LatentCode& w)
{
    return Eigen::Map<const Eigen::RowVectorXd>(w.data(), w.size());
}

LatentCode unflatten_latent(const Eigen::RowVectorXd& flat, const LatentShape& shape)
{
    if (flat.size() != shape.size()) {
        throw ConfigError("latent has " + std::to_string(flat.size()) + " entries, expected " +
                          std::to_string(shape.size()));
    }
    return Eigen::Map<const LatentCode>(flat.data(), shape.rows, shape.cols);
}

std::vector<LatentCode> sample_latent(Rng& rng, int n, const LatentShape& shape)
{
    if (n < 1) {
        throw ConfigError("sample_latent needs n >= 1");
    }
    std::vector<LatentCode> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        LatentCode w(shape.rows, shape.cols);
        for (Eigen::Index k = 0; k < w.size(); ++k) {
            w.data()[k] = rng.normal();
        }
        out.push_back(std::move(w));
    }
    return out;
}

Matrix stack_latents(const std::vector<LatentCode>& codes)
{
    if (codes.empty()) {
        return Matrix();
    }
    Matrix m(static_cast<Eigen::Index>(codes.size()), codes.front().size());
    for (std::size_t i = 0; i < codes.size(); ++i) {
        m.row(static_cast<Eigen::Index>(i)) = flatten_latent(codes[i]);
    }
    return m;
}

ChannelLayout ChannelLayout::desk() { return {{0}, {1}, {2}, {3}}; }

ChannelLayout ChannelLayout::paper()
{
    ChannelLayout l{{0, 1, 2, 3}, {4, 5, 6}, {8, 9}, {}};
    l.identity = {7};
    for (int r = 10; r < 18; ++r) {
        l.identity.push_back(r);
    }
    return l;
}

ChannelLayout ChannelLayout::for_rows(int rows)
{
    if (rows == 4) {
        return desk();
    }
    if (rows == 18) {
        return paper();
    }
    throw ConfigError("no default channel layout for " + std::to_string(rows) + " latent rows");
}

void ChannelLayout::validate(int rows) const
{
    std::set<int> seen;
    for (const auto* group : {&pose, &expression, &lighting, &identity}) {
        if (group->empty()) {
            throw ConfigError("channel layout groups must be non-empty");
        }
        for (int r : *group) {
            if (r < 0 || r >= rows) {
                throw ConfigError("channel layout row " + std::to_string(r) + " out of range");
            }
            if (!seen.insert(r).second) {
                throw ConfigError("channel layout row " + std::to_string(r) + " assigned twice");
            }
        }
    }
}

const char* attribute_name(Attribute a)
{
    switch (a) {
    case Attribute::Pose:
        return "pose";
    case Attribute::Lighting:
        return "lighting";
    case Attribute::Expression:
        return "expression";
    }
    return "?";
}

Attribute parse_attribute(const std::string& name)
{
    if (name == "pose") {
        return Attribute::Pose;
    }
    if (name == "lighting") {
        return Attribute::Lighting;
    }
    if (name == "expression") {
        return Attribute::Expression;
    }
    throw ConfigError("unknown attribute '" + name + "' (expected pose, lighting or expression)");
}

const std::vector<int>& rows_for(const ChannelLayout& layout, Attribute a)
{
    switch (a) {
    case Attribute::Pose:
        return layout.pose;
    case Attribute::Lighting:
        return layout.lighting;
    case Attribute::Expression:
        return layout.expression;
    }
    return layout.pose;
}

// ---------------------------------------------------------------------------
// Generator

nlohmann::json GeneratorConfig::to_json() const
{
    return {{"latent_rows", latent.rows},       {"latent_cols", latent.cols},
            {"seed", seed},                     {"preact_gain", preact_gain},
            {"bias_std", bias_std},             {"yaw_max_deg", yaw_max_deg},
            {"pitch_max_deg", pitch_max_deg},   {"roll_max_deg", roll_max_deg},
            {"translation_max", translation_max}, {"alpha_scale", alpha_scale},
            {"beta_scale", beta_scale},         {"delta_scale", delta_scale},
            {"light_level", light_level},       {"light_scale", light_scale}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j)
{
    GeneratorConfig c;
    c.latent.rows = j.value("latent_rows", c.latent.rows);
    c.latent.cols = j.value("latent_cols", c.latent.cols);
    c.seed = j.value("seed", c.seed);
    c.preact_gain = j.value("preact_gain", c.preact_gain);
    c.bias_std = j.value("bias_std", c.bias_std);
    c.yaw_max_deg = j.value("yaw_max_deg", c.yaw_max_deg);
    c.pitch_max_deg = j.value("pitch_max_deg", c.pitch_max_deg);
    c.roll_max_deg = j.value("roll_max_deg", c.roll_max_deg);
    c.translation_max = j.value("translation_max", c.translation_max);
    c.alpha_scale = j.value("alpha_scale", c.alpha_scale);
    c.beta_scale = j.value("beta_scale", c.beta_scale);
    c.delta_scale = j.value("delta_scale", c.delta_scale);
    c.light_level = j.value("light_level", c.light_level);
    c.light_scale = j.value("light_scale", c.light_scale);
    return c;
}

ToyGenerator::ToyGenerator(const BasisModel& basis, const Camera& camera, const SoftRasterConfig& raster,
                           const GeneratorConfig& config)
    : basis_(&basis), camera_(camera), raster_(raster), config_(config),
      layout_(ChannelLayout::for_rows(config.latent.rows))
{
    camera.validate();
    raster.validate();
    layout_.validate(config.latent.rows);
    const ModelDims& dims = basis.dims;
    const int np = dims.param_size();
    const int cols = config.latent.cols;
    weight_ = Eigen::MatrixXd::Zero(np, config.latent.size());
    bias_ = Eigen::VectorXd::Zero(np);
    center_ = Eigen::VectorXd::Zero(np);
    scale_ = Eigen::VectorXd::Zero(np);

    Rng rng(config.seed);
    auto fill = [&](Block block, const std::vector<int>& rows, double scale, bool with_bias) {
        const BlockRange r = block_range(dims, block);
        const double std = config.preact_gain / std::sqrt(static_cast<double>(rows.size() * cols));
        for (int k = r.offset; k < r.offset + r.size; ++k) {
            for (int row : rows) {
                for (int c = 0; c < cols; ++c) {
                    weight_(k, row * cols + c) = std * rng.normal();
                }
            }
            bias_[k] = with_bias ? config.bias_std * rng.normal() : 0.0;
            scale_[k] = scale;
        }
    };
    fill(Block::Identity, layout_.identity, config.alpha_scale, true);
    fill(Block::Texture, layout_.identity, config.beta_scale, true);
    fill(Block::Expression, layout_.expression, config.delta_scale, true);
    fill(Block::Lighting, layout_.lighting, config.light_scale, true);
    fill(Block::Rotation, layout_.pose, 1.0, false);
    fill(Block::Translation, layout_.pose, config.translation_max, false);
    const int rot = block_range(dims, Block::Rotation).offset;
    scale_[rot + 0] = deg2rad(config.pitch_max_deg);
    scale_[rot + 1] = deg2rad(config.yaw_max_deg);
    scale_[rot + 2] = deg2rad(config.roll_max_deg);
    const int light = block_range(dims, Block::Lighting).offset;
    for (int c = 0; c < 3; ++c) {
        center_[light + c] = config.light_level / morph::kShC0;
    }
}

Eigen::VectorXd ToyGenerator::preactivation(const LatentCode& w) const
{
    if (w.rows() != config_.latent.rows || w.cols() != config_.latent.cols) {
        throw ConfigError("latent code shape does not match the generator");
    }
    return weight_ * flatten_latent(w).transpose() + bias_;
}

MorphParams ToyGenerator::params_for(const LatentCode& w) const
{
    const Eigen::VectorXd z = preactivation(w);
    const Eigen::VectorXd p = center_.array() + scale_.array() * z.array().tanh();
    return MorphParams::unflatten(basis_->dims, p);
}

Eigen::RowVectorXd ToyGenerator::params_vjp(const LatentCode& w, const Eigen::VectorXd& grad_params) const
{
    const Eigen::VectorXd z = preactivation(w);
    const Eigen::VectorXd gz = grad_params.array() * scale_.array() * (1.0 - z.array().tanh().square());
    return (weight_.transpose() * gz).transpose();
}

Image ToyGenerator::generate(const LatentCode& w) const
{
    return render::render(params_for(w), *basis_, camera_, raster_);
}

// ---------------------------------------------------------------------------
// Fitting

const char* backend_name(EstimatorBackend b) { return b == EstimatorBackend::Oracle ? "oracle" : "fit"; }

EstimatorBackend parse_backend(const std::string& name)
{
    if (name == "oracle") {
        return EstimatorBackend::Oracle;
    }
    if (name == "fit") {
        return EstimatorBackend::Fit;
    }
    throw ConfigError("unknown estimator backend '" + name + "' (expected oracle or fit)");
}

nlohmann::json FitConfig::to_json() const
{
    return {{"coarse_size", coarse_size},       {"coarse_steps", coarse_steps}, {"fine_steps", fine_steps},
            {"grid_yaw_deg", grid_yaw_deg},     {"grid_pitch_deg", grid_pitch_deg},
            {"grid_step_deg", grid_step_deg},   {"starts", starts},
            {"probe_steps", probe_steps},       {"probe_size", probe_size},       {"restarts", restarts},
            {"restart_l1", restart_l1},         {"coeff_prior", coeff_prior},
            {"regrid", regrid},         {"lr_rotation", lr_rotation},
            {"lr_translation", lr_translation}, {"lr_coeff", lr_coeff},
            {"lr_lighting", lr_lighting},       {"converged_l1", converged_l1}};
}

FitConfig FitConfig::from_json(const nlohmann::json& j)
{
    FitConfig c;
    c.coarse_size = j.value("coarse_size", c.coarse_size);
    c.coarse_steps = j.value("coarse_steps", c.coarse_steps);
    c.fine_steps = j.value("fine_steps", c.fine_steps);
    c.grid_yaw_deg = j.value("grid_yaw_deg", c.grid_yaw_deg);
    c.grid_pitch_deg = j.value("grid_pitch_deg", c.grid_pitch_deg);
    c.grid_step_deg = j.value("grid_step_deg", c.grid_step_deg);
    c.starts = j.value("starts", c.starts);
    c.probe_steps = j.value("probe_steps", c.probe_steps);
    c.probe_size = j.value("probe_size", c.probe_size);
    c.restarts = j.value("restarts", c.restarts);
    c.restart_l1 = j.value("restart_l1", c.restart_l1);
    c.coeff_prior = j.value("coeff_prior", c.coeff_prior);
    c.regrid = j.value("regrid", c.regrid);
    c.lr_rotation = j.value("lr_rotation", c.lr_rotation);
    c.lr_translation = j.value("lr_translation", c.lr_translation);
    c.lr_coeff = j.value("lr_coeff", c.lr_coeff);
    c.lr_lighting = j.value("lr_lighting", c.lr_lighting);
    c.converged_l1 = j.value("converged_l1", c.converged_l1);
    if (c.coarse_steps < 0 || c.fine_steps < 0 || c.probe_steps < 0 || c.starts < 1 || c.restarts < 0) {
        throw ConfigError("fit step counts must be non-negative and starts at least 1");
    }
    return c;
}

namespace {

/// Box-filter downsample by an integer factor.
Image downsample(const Image& src, int factor)
{
    Image out(src.width / factor, src.height / factor, src.background);
    const double inv = 1.0 / (factor * factor);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int dy = 0; dy < factor; ++dy) {
                    for (int dx = 0; dx < factor; ++dx) {
                        acc += src.at(y * factor + dy, x * factor + dx, c);
                    }
                }
                out.at(y, x, c) = acc * inv;
            }
        }
    }
    return out;
}

Camera scaled_camera(const Camera& cam, int factor)
{
    Camera c = cam;
    c.width = cam.width / factor;
    c.height = cam.height / factor;
    c.focal = cam.focal / factor;
    c.cx = cam.cx / factor;
    c.cy = cam.cy / factor;
    return c;
}

/// Mean-L1 residual image sign scaled so that it is the gradient of the loss.
Image l1_cotangent(const Image& rendered, const Image& target, double& loss)
{
    Image cot(rendered.width, rendered.height);
    const double n = static_cast<double>(rendered.data.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < rendered.data.size(); ++i) {
        const double d = rendered.data[i] - target.data[i];
        acc += std::abs(d);
        cot.data[i] = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / n;
    }
    loss = acc / n;
    return cot;
}

struct BlockAdam {
    std::vector<Matrix> buffers; // one column vector per parameter block
    std::vector<double> lr_scale;
};

void run_adam_stage(Eigen::VectorXd& flat, const ModelDims& dims, const Image& target, const BasisModel& basis,
                    const Camera& camera, const SoftRasterConfig& raster, int steps, double lr_mult,
                    const FitConfig& cfg, double& last_loss)
{
    if (steps <= 0) {
        return;
    }
    const std::array<Block, 6> blocks = {Block::Identity, Block::Texture,  Block::Expression,
                                         Block::Lighting, Block::Rotation, Block::Translation};
    const std::array<double, 6> lrs = {cfg.lr_coeff,    cfg.lr_coeff,    cfg.lr_coeff,
                                       cfg.lr_lighting, cfg.lr_rotation, cfg.lr_translation};
    nn::AdamState state(nn::AdamConfig{1.0, 0.9, 0.999, 1e-8});
    render::RenderTape tape(basis, camera, raster);
    std::vector<Matrix> values(blocks.size()), grads(blocks.size());
    for (int step = 0; step < steps; ++step) {
        const MorphParams p = MorphParams::unflatten(dims, flat);
        const Image& img = tape.forward(p);
        const Image cot = l1_cotangent(img, target, last_loss);
        Eigen::VectorXd g = tape.vjp(cot);
        if (cfg.coeff_prior > 0.0) {
            const int n = dims.id + dims.tex + dims.exp;
            g.head(n) += (2.0 * cfg.coeff_prior / n) * flat.head(n);
        }
        // Cosine decay to 10% of the stage learning rate.
        const double progress = steps > 1 ? static_cast<double>(step) / (steps - 1) : 0.0;
        const double decay = 0.1 + 0.45 * (1.0 + std::cos(kPi * progress));
        std::vector<double> scale(blocks.size());
        std::vector<Matrix*> pv;
        std::vector<const Matrix*> gv;
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            const BlockRange r = block_range(dims, blocks[b]);
            values[b] = flat.segment(r.offset, r.size);
            grads[b] = g.segment(r.offset, r.size);
            scale[b] = lrs[b] * lr_mult * decay;
            pv.push_back(&values[b]);
            gv.push_back(&grads[b]);
        }
        nn::adam_step(state, pv, gv, scale);
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            const BlockRange r = block_range(dims, blocks[b]);
            flat.segment(r.offset, r.size) = values[b];
        }
        for (int k = 0; k < 3; ++k) {
            const int i = block_range(dims, Block::Rotation).offset + k;
            flat[i] = std::clamp(flat[i], -kPi, kPi);
        }
    }
}

} // namespace

FitResult fit_params(const Image& target, const BasisModel& basis, const Camera& camera,
                     const SoftRasterConfig& raster, const FitConfig& config, const MorphParams* init)
{
    if (target.width != camera.width || target.height != camera.height) {
        throw ConfigError("fit target does not match the camera resolution");
    }
    const ModelDims& dims = basis.dims;
    int factor = 1;
    if (config.coarse_size > 0 && config.coarse_size < camera.width && camera.width % config.coarse_size == 0 &&
        camera.height % config.coarse_size == 0 && camera.width == camera.height) {
        factor = camera.width / config.coarse_size;
    }
    const Camera coarse_cam = scaled_camera(camera, factor);
    SoftRasterConfig coarse_raster = SoftRasterConfig::defaults_for(coarse_cam);
    coarse_raster.background = raster.background;
    coarse_raster.cutoff = raster.cutoff;
    const Image coarse_target = factor > 1 ? downsample(target, factor) : target;
    int probe_factor = factor;
    if (config.probe_size > 0 && config.probe_size < camera.width && camera.width % config.probe_size == 0 &&
        camera.width == camera.height) {
        probe_factor = camera.width / config.probe_size;
    }
    const Camera probe_cam = scaled_camera(camera, probe_factor);
    SoftRasterConfig probe_raster = SoftRasterConfig::defaults_for(probe_cam);
    probe_raster.background = raster.background;
    probe_raster.cutoff = raster.cutoff;
    const Image probe_target = probe_factor > 1 ? downsample(target, probe_factor) : target;

    MorphParams start = init ? *init : MorphParams::neutral(dims);
    start.check_dims(dims);

    // Grid over yaw/pitch with a per-channel least-squares gain on the band-0 light.
    // Cells closer than min_sep to an avoided pose are skipped.
    const double min_sep = deg2rad(1.5 * config.grid_step_deg);
    auto grid_search = [&](const MorphParams& base, const std::vector<Eigen::Vector3d>& avoid, int keep) {
        std::vector<std::pair<double, MorphParams>> cells;
        const int ny = static_cast<int>(std::floor(config.grid_yaw_deg / config.grid_step_deg + 1e-9));
        const int np = static_cast<int>(std::floor(config.grid_pitch_deg / config.grid_step_deg + 1e-9));
        for (int iy = -ny; iy <= ny; ++iy) {
            for (int ip = -np; ip <= np; ++ip) {
                MorphParams p = base;
                p.phi = Eigen::Vector3d(deg2rad(ip * config.grid_step_deg), deg2rad(iy * config.grid_step_deg), 0.0);
                p.t = base.t;
                bool skip = false;
                for (const auto& a : avoid) {
                    if ((p.phi - a).head<2>().cwiseAbs().maxCoeff() < min_sep) {
                        skip = true;
                    }
                }
                if (skip) {
                    continue;
                }
                const Image img = render::render(p, basis, coarse_cam, coarse_raster);
                Eigen::Vector3d num = Eigen::Vector3d::Zero(), den = Eigen::Vector3d::Zero();
                for (std::size_t i = 0; i < img.data.size(); ++i) {
                    const int c = static_cast<int>(i % 3);
                    const double r = img.data[i] - raster.background[c];
                    num[c] += r * (coarse_target.data[i] - raster.background[c]);
                    den[c] += r * r;
                }
                Eigen::Vector3d gain;
                for (int c = 0; c < 3; ++c) {
                    gain[c] = den[c] > 0.0 ? std::clamp(num[c] / den[c], 0.05, 4.0) : 1.0;
                }
                double l1 = 0.0;
                for (std::size_t i = 0; i < img.data.size(); ++i) {
                    const int c = static_cast<int>(i % 3);
                    const double pred = raster.background[c] + gain[c] * (img.data[i] - raster.background[c]);
                    l1 += std::abs(pred - coarse_target.data[i]);
                }
                for (int c = 0; c < 3; ++c) {
                    p.gamma[c] *= gain[c];
                }
                cells.emplace_back(l1, p);
            }
        }
        std::stable_sort(cells.begin(), cells.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        // Keep the best few that are mutually separated in angle.
        std::vector<std::pair<double, MorphParams>> picked;
        for (const auto& c : cells) {
            if (static_cast<int>(picked.size()) >= std::max(1, keep)) {
                break;
            }
            bool far = true;
            for (const auto& q : picked) {
                if ((c.second.phi - q.second.phi).cwiseAbs().maxCoeff() < min_sep) {
                    far = false;
                }
            }
            if (far) {
                picked.push_back(c);
            }
        }
        return picked;
    };

    std::vector<std::pair<double, MorphParams>> candidates;
    if (init) {
        candidates.emplace_back(0.0, start);
    } else {
        candidates = grid_search(start, {}, config.starts);
    }

    const Image& stage_target = factor > 1 ? coarse_target : target;
    const Camera& stage_cam = factor > 1 ? coarse_cam : camera;
    const SoftRasterConfig& stage_raster = factor > 1 ? coarse_raster : raster;
    int steps = 0;
    double loss = 0.0;

    // Short probes rank the candidates; the full schedule then runs from the best,
    // falling back to the next candidate while the result stays above restart_l1.
    std::vector<std::pair<double, Eigen::VectorXd>> ranked;
    for (const auto& c : candidates) {
        Eigen::VectorXd probe = c.second.flatten();
        if (candidates.size() > 1) {
            run_adam_stage(probe, dims, probe_target, basis, probe_cam, probe_raster, config.probe_steps, 1.0, config,
                           loss);
            steps += config.probe_steps;
        }
        ranked.emplace_back(candidates.size() > 1 ? loss : 0.0, std::move(probe));
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

    FitResult out;
    out.image_l1 = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < ranked.size() && k <= static_cast<std::size_t>(config.restarts); ++k) {
        Eigen::VectorXd flat = ranked[k].second;
        run_adam_stage(flat, dims, stage_target, basis, stage_cam, stage_raster, config.coarse_steps, 1.0, config,
                       loss);
        steps += config.coarse_steps;
        if (factor > 1) {
            run_adam_stage(flat, dims, target, basis, camera, raster, config.fine_steps, 0.3, config, loss);
            steps += config.fine_steps;
        }
        const MorphParams p = MorphParams::unflatten(dims, flat);
        const double l1 = render::mean_abs_diff(render::render(p, basis, camera, raster), target);
        if (l1 < out.image_l1) {
            out.params = p;
            out.image_l1 = l1;
        }
        if (out.image_l1 <= config.restart_l1) {
            break;
        }
    }
    // Still poor: the coefficients may have compensated for a wrong pose. Search the
    // pose grid again with them, away from the poses already tried.
    std::vector<Eigen::Vector3d> tried;
    for (const auto& r : ranked) {
        tried.push_back(MorphParams::unflatten(dims, r.second).phi);
    }
    for (int g = 0; g < config.regrid && !init && out.image_l1 > config.restart_l1; ++g) {
        MorphParams base = out.params;
        tried.push_back(base.phi);
        const auto cells = grid_search(base, tried, 1);
        if (cells.empty()) {
            break;
        }
        Eigen::VectorXd flat = cells.front().second.flatten();
        tried.push_back(cells.front().second.phi);
        run_adam_stage(flat, dims, stage_target, basis, stage_cam, stage_raster, config.coarse_steps, 1.0, config,
                       loss);
        steps += config.coarse_steps;
        if (factor > 1) {
            run_adam_stage(flat, dims, target, basis, camera, raster, config.fine_steps, 0.3, config, loss);
            steps += config.fine_steps;
        }
        const MorphParams p = MorphParams::unflatten(dims, flat);
        const double l1 = render::mean_abs_diff(render::render(p, basis, camera, raster), target);
        if (l1 < out.image_l1) {
            out.params = p;
            out.image_l1 = l1;
        }
    }
    out.steps = steps;
    out.converged = out.image_l1 <= config.converged_l1;
    return out;
}

// ---------------------------------------------------------------------------
// Losses

double loss_rendered(const MorphParams& p, const MorphParams& p_hat, const BasisModel& basis, const Camera& camera,
                     const SoftRasterConfig& raster)
{
    return render::mean_abs_diff(render::render(p, basis, camera, raster), render::render(p_hat, basis, camera, raster));
}

double loss_param(const MorphParams& p, const MorphParams& p_hat)
{
    const Eigen::VectorXd a = p.flatten(), b = p_hat.flatten();
    if (a.size() != b.size()) {
        throw ConfigError("loss_param: parameter vectors differ in length");
    }
    return (a - b).cwiseAbs().mean();
}

double loss_latent(const LatentCode& w, const LatentCode& w_hat)
{
    if (w.rows() != w_hat.rows() || w.cols() != w_hat.cols()) {
        throw ConfigError("loss_latent: latent shapes differ");
    }
    return (w - w_hat).cwiseAbs().mean();
}

namespace {

struct LandmarkPair {
    double value = 0.0;
    int invalid = 0;
    Eigen::Matrix<double, morph::kNumLandmarks, 2, Eigen::RowMajor> grad_a; // d value / d points of `a`
};

LandmarkPair landmark_pair(const render::LandmarkProjection& a, const render::LandmarkProjection& b)
{
    LandmarkPair out;
    out.grad_a.setZero();
    double acc = 0.0;
    for (int i = 0; i < morph::kNumLandmarks; ++i) {
        if (!a.valid[i] || !b.valid[i]) {
            ++out.invalid;
            continue;
        }
        for (int k = 0; k < 2; ++k) {
            const double d = a.points(i, k) - b.points(i, k);
            acc += std::abs(d);
            out.grad_a(i, k) = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / morph::kNumLandmarks;
        }
    }
    if (2 * out.invalid > morph::kNumLandmarks) {
        throw DegeneratePoseError("more than half of the landmarks are behind the camera (" +
                                  std::to_string(out.invalid) + " of 68)");
    }
    out.value = acc / morph::kNumLandmarks;
    return out;
}

} // namespace

LandmarkLoss loss_landmark(const MorphParams& p_w, const MorphParams& p_hat_w, const MorphParams& p_edit,
                           const MorphParams& p_hat_edit, const BasisModel& basis, const Camera& camera)
{
    const LandmarkPair first = landmark_pair(render::project_landmarks(p_w, basis, camera),
                                             render::project_landmarks(p_hat_w, basis, camera));
    const LandmarkPair second = landmark_pair(render::project_landmarks(p_edit, basis, camera),
                                              render::project_landmarks(p_hat_edit, basis, camera));
    return {first.value + second.value, first.invalid + second.invalid};
}

double loss_reg(const MorphParams& p, const RegWeights& weights)
{
    if (weights.alpha < 0.0 || weights.beta < 0.0 || weights.delta < 0.0) {
        throw ConfigError("regularisation weights must be non-negative");
    }
    return weights.alpha * p.alpha.squaredNorm() + weights.beta * p.beta.squaredNorm() +
           weights.delta * p.delta.squaredNorm();
}

nlohmann::json LossWeights::to_json() const
{
    return {{"lambda_ren", ren}, {"lambda_p", p}, {"lambda_lat", lat}, {"lambda_lm", lm}, {"reg", reg}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j)
{
    LossWeights w;
    w.ren = j.value("lambda_ren", w.ren);
    w.p = j.value("lambda_p", w.p);
    w.lat = j.value("lambda_lat", w.lat);
    w.lm = j.value("lambda_lm", w.lm);
    w.reg = j.value("reg", w.reg);
    return w;
}

double loss_total(const LossComponents& c, const LossWeights& w)
{
    return w.ren * c.ren + w.p * c.p + w.lat * c.lat + w.lm * c.lm + (w.reg ? c.reg : 0.0);
}

// ---------------------------------------------------------------------------
// Edits

nlohmann::json EditRanges::to_json() const
{
    return {{"yaw_max_deg", yaw_max_deg},
            {"pitch_max_deg", pitch_max_deg},
            {"light_half_width", light_half_width},
            {"light_band0_offset", light_band0_offset},
            {"expression_first", expression_first},
            {"expression_picks", expression_picks},
            {"expression_max", expression_max}};
}

EditRanges EditRanges::from_json(const nlohmann::json& j)
{
    EditRanges r;
    r.yaw_max_deg = j.value("yaw_max_deg", r.yaw_max_deg);
    r.pitch_max_deg = j.value("pitch_max_deg", r.pitch_max_deg);
    r.light_half_width = j.value("light_half_width", r.light_half_width);
    r.light_band0_offset = j.value("light_band0_offset", r.light_band0_offset);
    r.expression_first = j.value("expression_first", r.expression_first);
    r.expression_picks = j.value("expression_picks", r.expression_picks);
    r.expression_max = j.value("expression_max", r.expression_max);
    return r;
}

EditRequest EditRequest::pose(std::optional<double> yaw_rad, std::optional<double> pitch_rad)
{
    EditRequest e;
    e.attribute = Attribute::Pose;
    e.yaw = yaw_rad;
    e.pitch = pitch_rad;
    return e;
}

EditRequest EditRequest::light(std::vector<double> gamma)
{
    EditRequest e;
    e.attribute = Attribute::Lighting;
    e.lighting = std::move(gamma);
    return e;
}

EditRequest EditRequest::expr(std::vector<std::pair<int, double>> entries)
{
    EditRequest e;
    e.attribute = Attribute::Expression;
    e.expression = std::move(entries);
    return e;
}

void validate_edit(const EditRequest& edit, const ModelDims& dims, const EditRanges& ranges)
{
    constexpr double slack = 1e-9;
    switch (edit.attribute) {
    case Attribute::Pose:
        if (!edit.yaw && !edit.pitch) {
            throw ConfigError("targets: a pose edit needs yaw and/or pitch");
        }
        if (edit.yaw && !(std::abs(*edit.yaw) <= deg2rad(ranges.yaw_max_deg) + slack)) {
            throw ConfigError("yaw: outside +/-" + std::to_string(ranges.yaw_max_deg) + " degrees");
        }
        if (edit.pitch && !(std::abs(*edit.pitch) <= deg2rad(ranges.pitch_max_deg) + slack)) {
            throw ConfigError("pitch: outside +/-" + std::to_string(ranges.pitch_max_deg) + " degrees");
        }
        break;
    case Attribute::Lighting:
        if (edit.lighting.size() != static_cast<std::size_t>(morph::kLightingSize)) {
            throw ConfigError("lighting: expected 27 SH coefficients, got " + std::to_string(edit.lighting.size()));
        }
        for (double v : edit.lighting) {
            if (!std::isfinite(v)) {
                throw ConfigError("lighting: coefficients must be finite");
            }
        }
        break;
    case Attribute::Expression: {
        if (edit.expression.empty()) {
            throw ConfigError("expression: at least one (index, value) pair is required");
        }
        if (static_cast<int>(edit.expression.size()) > ranges.expression_picks) {
            throw ConfigError("expression: at most " + std::to_string(ranges.expression_picks) +
                              " coefficients per edit");
        }
        const int limit = std::min(ranges.expression_first, dims.exp);
        std::set<int> seen;
        for (const auto& [idx, value] : edit.expression) {
            if (idx < 0 || idx >= limit) {
                throw ConfigError("expression: index " + std::to_string(idx) + " outside [0, " +
                                  std::to_string(limit) + ")");
            }
            if (!seen.insert(idx).second) {
                throw ConfigError("expression: index " + std::to_string(idx) + " repeated");
            }
            if (!std::isfinite(value)) {
                throw ConfigError("expression: values must be finite");
            }
        }
        break;
    }
    }
}

MorphParams apply_edit(const MorphParams& p, const EditRequest& edit)
{
    MorphParams out = p;
    switch (edit.attribute) {
    case Attribute::Pose:
        if (edit.pitch) {
            out.phi[0] = *edit.pitch;
        }
        if (edit.yaw) {
            out.phi[1] = *edit.yaw;
        }
        break;
    case Attribute::Lighting:
        if (edit.lighting.size() != static_cast<std::size_t>(out.gamma.size())) {
            throw ConfigError("lighting: expected 27 SH coefficients");
        }
        out.gamma = Eigen::Map<const Eigen::VectorXd>(edit.lighting.data(), morph::kLightingSize);
        break;
    case Attribute::Expression:
        for (const auto& [idx, value] : edit.expression) {
            if (idx < 0 || idx >= out.delta.size()) {
                throw ConfigError("expression: index out of range");
            }
            out.delta[idx] = value;
        }
        break;
    }
    return out;
}

EditRequest sample_request(Attribute attr, const MorphParams& p, Rng& rng, const EditRanges& ranges)
{
    EditRequest e;
    e.attribute = attr;
    switch (attr) {
    case Attribute::Pose:
        e.yaw = deg2rad(rng.uniform(-ranges.yaw_max_deg, ranges.yaw_max_deg));
        e.pitch = deg2rad(rng.uniform(-ranges.pitch_max_deg, ranges.pitch_max_deg));
        break;
    case Attribute::Lighting:
        e.lighting.resize(morph::kLightingSize);
        for (double& v : e.lighting) {
            v = rng.uniform(-ranges.light_half_width, ranges.light_half_width);
        }
        for (int c = 0; c < 3; ++c) {
            e.lighting[c] += ranges.light_band0_offset / morph::kShC0;
        }
        break;
    case Attribute::Expression: {
        const int limit = std::min(ranges.expression_first, static_cast<int>(p.delta.size()));
        const int picks = std::min(ranges.expression_picks, limit);
        std::vector<int> pool(limit);
        for (int i = 0; i < limit; ++i) {
            pool[i] = i;
        }
        // Partial Fisher-Yates.
        for (int i = 0; i < picks; ++i) {
            const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(limit - i)));
            std::swap(pool[i], pool[j]);
            e.expression.emplace_back(pool[i], rng.uniform(-ranges.expression_max, ranges.expression_max));
        }
        break;
    }
    }
    return e;
}

SampledEdit sample_edit(const MorphParams& p, Rng& rng, const EditRanges& ranges)
{
    const auto attr = static_cast<Attribute>(rng.below(3));
    return {attr, apply_edit(p, sample_request(attr, p, rng, ranges))};
}

// ---------------------------------------------------------------------------
// Networks

MapEditNets MapEditNets::init(const LatentShape& latent, const ModelDims& dims, int hidden, std::uint64_t seed)
{
    Rng rng(seed);
    MapEditNets nets;
    nets.latent = latent;
    nets.dims = dims;
    nets.mf = nn::Mlp(latent.size(), hidden, dims.param_size(), rng);
    nets.mi = nn::Mlp(dims.param_size(), hidden, latent.size(), rng);
    return nets;
}

MorphParams MapEditNets::forward_params(const LatentCode& w) const
{
    const Matrix x = flatten_latent(w);
    const Matrix y = mf.forward(x);
    return MorphParams::unflatten(dims, Eigen::VectorXd(y.row(0).transpose()));
}

LatentCode MapEditNets::inverse_latent(const MorphParams& p) const
{
    const Matrix x = p.flatten().transpose();
    const Matrix y = mi.forward(x);
    return unflatten_latent(y.row(0), latent);
}

LatentCode MapEditNets::reconstruct(const LatentCode& w) const { return inverse_latent(forward_params(w)); }

void TrainConfig::validate() const
{
    if (weights.ren < 0 || weights.p < 0 || weights.lat < 0 || weights.lm < 0 || reg.alpha < 0 || reg.beta < 0 ||
        reg.delta < 0) {
        throw ConfigError("loss weights must be non-negative");
    }
    if (batch < 1) {
        throw ConfigError("batch must be at least 1");
    }
    if (iterations < 0) {
        throw ConfigError("iterations must be non-negative");
    }
    if (hidden < 1) {
        throw ConfigError("hidden width must be positive");
    }
    if (!(adam.lr > 0.0)) {
        throw ConfigError("learning rate must be positive");
    }
}

nlohmann::json TrainConfig::to_json() const
{
    nlohmann::json j = weights.to_json();
    j["lambda_alpha"] = reg.alpha;
    j["lambda_beta"] = reg.beta;
    j["lambda_delta"] = reg.delta;
    j["lr"] = adam.lr;
    j["beta1"] = adam.beta1;
    j["beta2"] = adam.beta2;
    j["eps"] = adam.eps;
    j["batch"] = batch;
    j["iters"] = iterations;
    j["hidden"] = hidden;
    j["lr_schedule"] = cosine_lr ? "cosine" : "constant";
    j["estimator"] = backend_name(estimator);
    j["fit"] = fit.to_json();
    j["edit_ranges"] = ranges.to_json();
    j["seed"] = seed;
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j)
{
    TrainConfig c;
    c.weights = LossWeights::from_json(j);
    c.reg.alpha = j.value("lambda_alpha", c.reg.alpha);
    c.reg.beta = j.value("lambda_beta", c.reg.beta);
    c.reg.delta = j.value("lambda_delta", c.reg.delta);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.eps = j.value("eps", c.adam.eps);
    c.batch = j.value("batch", c.batch);
    c.iterations = j.value("iters", c.iterations);
    c.hidden = j.value("hidden", c.hidden);
    const std::string schedule = j.value("lr_schedule", std::string(c.cosine_lr ? "cosine" : "constant"));
    if (schedule != "cosine" && schedule != "constant") {
        throw ConfigError("lr_schedule must be cosine or constant");
    }
    c.cosine_lr = schedule == "cosine";
    c.estimator = parse_backend(j.value("estimator", std::string(backend_name(c.estimator))));
    if (j.contains("fit")) {
        c.fit = FitConfig::from_json(j["fit"]);
    }
    if (j.contains("edit_ranges")) {
        c.ranges = EditRanges::from_json(j["edit_ranges"]);
    }
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

namespace {

/// Mean over batch rows of the mean-L1 between R(row) and the row's target image.
Tensor rendered_loss_op(const Tensor& params, const std::vector<Image>& targets, const ToyGenerator& gen)
{
    const ModelDims& dims = gen.basis().dims;
    const Eigen::Index batch = params.rows();
    auto tapes = std::make_shared<std::vector<std::unique_ptr<render::RenderTape>>>();
    auto cotangents = std::make_shared<std::vector<Image>>();
    double total = 0.0;
    for (Eigen::Index b = 0; b < batch; ++b) {
        auto tape = std::make_unique<render::RenderTape>(gen.basis(), gen.camera(), gen.raster());
        const Image& img = tape->forward(MorphParams::unflatten(dims, Eigen::VectorXd(params.value().row(b).transpose())));
        double l = 0.0;
        cotangents->push_back(l1_cotangent(img, targets[b], l));
        total += l;
        tapes->push_back(std::move(tape));
    }
    Matrix value(1, 1);
    value(0, 0) = total / static_cast<double>(batch);
    return nn::custom(params, std::move(value), [tapes, cotangents, batch, np = params.cols()](const Matrix& g) {
        Matrix grad(batch, np);
        for (Eigen::Index b = 0; b < batch; ++b) {
            Image cot = (*cotangents)[b];
            const double s = g(0, 0) / static_cast<double>(batch);
            for (double& v : cot.data) {
                v *= s;
            }
            grad.row(b) = (*tapes)[b]->vjp(cot).transpose();
        }
        return grad;
    });
}

/// Mean over batch rows of the landmark term between the rows of `params` and the
/// corresponding rows of the constant `reference`. `invalid` collects excluded pairs.
Tensor landmark_loss_op(const Tensor& params, const Matrix& reference, const ToyGenerator& gen, int& invalid)
{
    const ModelDims& dims = gen.basis().dims;
    const Eigen::Index batch = params.rows();
    Matrix grad(batch, params.cols());
    double total = 0.0;
    for (Eigen::Index b = 0; b < batch; ++b) {
        const MorphParams p = MorphParams::unflatten(dims, Eigen::VectorXd(params.value().row(b).transpose()));
        const MorphParams r = MorphParams::unflatten(dims, Eigen::VectorXd(reference.row(b).transpose()));
        const LandmarkPair pair = landmark_pair(render::project_landmarks(p, gen.basis(), gen.camera()),
                                                render::project_landmarks(r, gen.basis(), gen.camera()));
        total += pair.value;
        invalid += pair.invalid;
        grad.row(b) = render::project_landmarks_vjp(p, gen.basis(), gen.camera(), pair.grad_a).transpose();
    }
    Matrix value(1, 1);
    value(0, 0) = total / static_cast<double>(batch);
    return nn::custom(params, std::move(value), [grad = std::move(grad), batch](const Matrix& g) {
        return Matrix(grad * (g(0, 0) / static_cast<double>(batch)));
    });
}

std::string diagnostic_dump(long iter, const LossComponents& c, double total, const Matrix& w, const Matrix& p)
{
    nlohmann::json j;
    j["iter"] = iter;
    j["L_ren"] = c.ren;
    j["L_p"] = c.p;
    j["L_lat"] = c.lat;
    j["L_lm"] = c.lm;
    j["L_reg"] = c.reg;
    j["L_total"] = total;
    auto rows = [](const Matrix& m) {
        nlohmann::json out = nlohmann::json::array();
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            std::vector<double> r(m.cols());
            for (Eigen::Index k = 0; k < m.cols(); ++k) {
                r[k] = m(i, k);
            }
            out.push_back(r);
        }
        return out;
    };
    j["w"] = rows(w);
    j["P_w"] = rows(p);
    // nlohmann writes non-finite numbers as null; keep the message readable.
    return j.dump();
}

} // namespace

TrainResult train(const ToyGenerator& gen, const TrainConfig& config,
                  const std::function<void(const TrainLogRow&)>& on_row)
{
    config.validate();
    const ModelDims& dims = gen.basis().dims;
    const LatentShape shape = gen.config().latent;
    TrainResult result;
    result.nets = MapEditNets::init(shape, dims, config.hidden, config.seed);
    MapEditNets& nets = result.nets;
    Rng rng(config.seed ^ 0x5DEECE66DULL);
    nn::AdamState adam(config.adam);
    const BlockRange ra = block_range(dims, Block::Identity);
    const BlockRange rb = block_range(dims, Block::Texture);
    const BlockRange rd = block_range(dims, Block::Expression);
    const LossWeights& lw = config.weights;

    for (int it = 1; it <= config.iterations; ++it) {
        const std::vector<LatentCode> ws = sample_latent(rng, config.batch, shape);
        const Matrix w = stack_latents(ws);
        Matrix p_hat(config.batch, dims.param_size());
        std::vector<Image> targets;
        for (int b = 0; b < config.batch; ++b) {
            MorphParams est;
            if (config.estimator == EstimatorBackend::Oracle) {
                est = gen.params_for(ws[b]);
                if (lw.ren > 0.0) {
                    targets.push_back(render::render(est, gen.basis(), gen.camera(), gen.raster()));
                }
            } else {
                Image iw = gen.generate(ws[b]);
                est = fit_params(iw, gen.basis(), gen.camera(), gen.raster(), config.fit).params;
                targets.push_back(std::move(iw));
            }
            p_hat.row(b) = est.flatten().transpose();
        }

        nets.mf.zero_grad();
        nets.mi.zero_grad();
        const Tensor w_t = Tensor::constant(w);
        const Tensor p_w = nets.mf.forward(w_t);
        const Tensor w_hat = nets.mi.forward(p_w);

        Matrix p_edit(config.batch, dims.param_size());
        std::string attrs;
        for (int b = 0; b < config.batch; ++b) {
            const MorphParams pw = MorphParams::unflatten(dims, Eigen::VectorXd(p_w.value().row(b).transpose()));
            const SampledEdit e = sample_edit(pw, rng, config.ranges);
            p_edit.row(b) = e.params.flatten().transpose();
            attrs += (b ? "|" : "") + std::string(attribute_name(e.attribute));
        }
        const Tensor p_edit_t = Tensor::constant(p_edit);
        const Tensor w_hat_edit = nets.mi.forward(p_edit_t);
        const Tensor p_hat_edit = nets.mf.forward(w_hat_edit);

        LossComponents comp;
        std::vector<std::pair<double, Tensor>> terms;
        if (lw.ren > 0.0) {
            Tensor t = rendered_loss_op(p_w, targets, gen);
            comp.ren = t.item();
            terms.emplace_back(lw.ren, t);
        }
        {
            Tensor t = nn::abs_mean(nn::sub(p_w, Tensor::constant(p_hat)));
            comp.p = t.item();
            if (lw.p > 0.0) {
                terms.emplace_back(lw.p, t);
            }
        }
        {
            Tensor t = nn::abs_mean(nn::sub(w_t, w_hat));
            comp.lat = t.item();
            if (lw.lat > 0.0) {
                terms.emplace_back(lw.lat, t);
            }
        }
        {
            int invalid = 0;
            Tensor t = nn::add(landmark_loss_op(p_w, p_hat, gen, invalid),
                               landmark_loss_op(p_hat_edit, p_edit, gen, invalid));
            comp.lm = t.item();
            if (lw.lm > 0.0) {
                terms.emplace_back(lw.lm, t);
            }
        }
        {
            const double inv_b = 1.0 / config.batch;
            Tensor t = nn::add(nn::add(nn::scale(nn::sum_squares(nn::slice_cols(p_w, ra.offset, ra.size)),
                                                 config.reg.alpha * inv_b),
                                       nn::scale(nn::sum_squares(nn::slice_cols(p_w, rb.offset, rb.size)),
                                                 config.reg.beta * inv_b)),
                               nn::scale(nn::sum_squares(nn::slice_cols(p_w, rd.offset, rd.size)),
                                         config.reg.delta * inv_b));
            comp.reg = t.item();
            if (lw.reg) {
                terms.emplace_back(1.0, t);
            }
        }
        const double total = loss_total(comp, lw);
        if (!std::isfinite(total)) {
            throw TrainingError("non-finite loss at iteration " + std::to_string(it) + ": " +
                                diagnostic_dump(it, comp, total, w, p_w.value()));
        }
        if (!terms.empty()) {
            Tensor root = nn::scale(terms[0].second, terms[0].first);
            for (std::size_t i = 1; i < terms.size(); ++i) {
                root = nn::add(root, nn::scale(terms[i].second, terms[i].first));
            }
            nn::backward(root);
            if (config.cosine_lr) {
                adam.config.lr = config.adam.lr * 0.5 * (1.0 + std::cos(kPi * (it - 1) / config.iterations));
            }
            std::array<nn::Mlp*, 2> both = {&nets.mf, &nets.mi};
            nn::adam_step(adam, both);
        }
        nets.iterations = it;

        TrainLogRow row{it, comp, total, attrs};
        if (on_row) {
            on_row(row);
        }
        result.log.push_back(std::move(row));
    }
    return result;
}

void write_train_log_csv(std::ostream& os, const std::vector<TrainLogRow>& rows)
{
    os << "iter,L_ren,L_p,L_lat,L_lm,L_reg,L_total,attr\n";
    std::ostringstream line;
    for (const auto& r : rows) {
        os << r.iter << std::setprecision(17) << ',' << r.components.ren << ',' << r.components.p << ','
           << r.components.lat << ',' << r.components.lm << ',' << r.components.reg << ',' << r.total << ','
           << r.attr << '\n';
    }
}

// ---------------------------------------------------------------------------
// Directions

const char* sign_name(DirectionSign s) { return s == DirectionSign::Paper ? "paper" : "reversed"; }

DirectionSign parse_sign(const std::string& name)
{
    if (name == "paper") {
        return DirectionSign::Paper;
    }
    if (name == "reversed") {
        return DirectionSign::Reversed;
    }
    throw ConfigError("unknown direction_sign '" + name + "' (expected paper or reversed)");
}

LatentCode apply_channel_mask(const LatentCode& d, const std::vector<int>& rows)
{
    LatentCode out = LatentCode::Zero(d.rows(), d.cols());
    for (int r : rows) {
        if (r < 0 || r >= d.rows()) {
            throw ConfigError("channel mask row out of range");
        }
        out.row(r) = d.row(r);
    }
    return out;
}

LatentCode extract_direction(const MapEditNets& nets, const LatentCode& w, const EditRequest& edit,
                             const ChannelLayout& layout, DirectionSign sign)
{
    if (nets.iterations <= 0) {
        throw UsageError("networks are untrained; refusing to extract a direction");
    }
    const MorphParams p = nets.forward_params(w);
    const LatentCode w_hat = nets.inverse_latent(p);
    const LatentCode w_hat_edit = nets.inverse_latent(apply_edit(p, edit));
    const LatentCode d = sign == DirectionSign::Paper ? LatentCode(w_hat - w_hat_edit) : LatentCode(w_hat_edit - w_hat);
    return apply_channel_mask(d, rows_for(layout, edit.attribute));
}

EditResult edit_image(const ToyGenerator& gen, const MapEditNets& nets, const LatentCode& w, const EditRequest& edit,
                      DirectionSign sign, bool refit, const FitConfig& fit)
{
    EditResult r;
    r.direction = extract_direction(nets, w, edit, gen.layout(), sign);
    r.w_edited = w + r.direction;
    r.params_before = nets.forward_params(w);
    r.params_edit = apply_edit(r.params_before, edit);
    r.image = gen.generate(r.w_edited);
    if (refit) {
        r.achieved = fit_params(r.image, gen.basis(), gen.camera(), gen.raster(), fit);
    }
    return r;
}

LatentCode invert(const ToyGenerator& gen, const Image& image, const InvertConfig& config)
{
    const LatentShape shape = gen.config().latent;
    LatentCode w = LatentCode::Zero(shape.rows, shape.cols);
    Matrix flat = Matrix::Zero(1, shape.size());
    nn::AdamState state(nn::AdamConfig{config.lr, 0.9, 0.999, 1e-8});
    render::RenderTape tape(gen.basis(), gen.camera(), gen.raster());
    for (int step = 0; step < config.steps; ++step) {
        w = unflatten_latent(flat.row(0), shape);
        const Image& img = tape.forward(gen.params_for(w));
        double loss = 0.0;
        const Image cot = l1_cotangent(img, image, loss);
        const Matrix g = gen.params_vjp(w, tape.vjp(cot));
        std::array<Matrix*, 1> pv = {&flat};
        std::array<const Matrix*, 1> gv = {&g};
        nn::adam_step(state, pv, gv);
    }
    return unflatten_latent(flat.row(0), shape);
}

} // namespace mapedit::map
