#include "mapedit/cli.hpp"

#include "mapedit/evalsuite.hpp"
#include "mapedit/pipeline.hpp"
#include "mapedit/png_io.hpp"
#include "mapedit/service.hpp"

#include <CLI11.hpp>
#include <httplib.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

namespace mapedit::app {

namespace {

/// Flags of one subcommand, declared by their JSON defaults. A null default means
/// "unset unless given".
class KeyedOptions {
public:
    KeyedOptions(CLI::App* sub, nlohmann::json defaults, const std::map<std::string, std::string>& help)
        : defaults_(std::move(defaults))
    {
        sub->add_option("--config", config_path_, "JSON file whose keys mirror these flags");
        for (const auto& [key, value] : defaults_.items()) {
            auto it = help.find(key);
            CLI::Option* opt = sub->add_option("--" + key, given_[key], it == help.end() ? "" : it->second);
            if (!value.is_null()) {
                opt->default_str(value.is_string() ? value.get<std::string>() : value.dump());
            }
            options_[key] = opt;
        }
    }

    /// Defaults, then the config file, then explicit flags.
    nlohmann::json resolve() const
    {
        nlohmann::json j = defaults_;
        if (!config_path_.empty()) {
            nlohmann::json file;
            try {
                file = nlohmann::json::parse(io::read_file(config_path_));
            } catch (const nlohmann::json::parse_error& e) {
                throw ConfigError("config " + config_path_ + ": " + e.what());
            }
            if (!file.is_object()) {
                throw ConfigError("config " + config_path_ + " must hold a JSON object");
            }
            for (const auto& [key, value] : file.items()) {
                if (!defaults_.contains(key)) {
                    throw ConfigError("config " + config_path_ + ": unknown key '" + key + "'");
                }
                assign(j, key, value);
            }
        }
        for (const auto& [key, opt] : options_) {
            if (opt->count() > 0) {
                assign(j, key, parse_value(given_.at(key)));
            }
        }
        return j;
    }

private:
    static nlohmann::json parse_value(const std::string& text)
    {
        try {
            return nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error&) {
            return text; // bare words such as `oracle` or a path
        }
    }

    static void assign(nlohmann::json& j, const std::string& key, const nlohmann::json& value)
    {
        if (j[key].is_object() && value.is_object()) {
            j[key].merge_patch(value);
        } else {
            j[key] = value;
        }
    }

    nlohmann::json defaults_;
    std::string config_path_;
    std::map<std::string, std::string> given_;
    std::map<std::string, CLI::Option*> options_;
};

template <typename T>
T get(const nlohmann::json& j, const std::string& key)
{
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("--" + key + ": expected " + (std::is_same_v<T, std::string> ? "a string" : "a number"));
    }
}

std::optional<std::string> get_opt(const nlohmann::json& j, const std::string& key)
{
    if (j.at(key).is_null()) {
        return std::nullopt;
    }
    return j.at(key).is_string() ? j.at(key).get<std::string>() : j.at(key).dump();
}

std::string checkpoint_path(const nlohmann::json& j)
{
    if (auto p = get_opt(j, "checkpoint")) {
        return *p;
    }
    if (const char* env = std::getenv("MAPEDIT_CHECKPOINT"); env && *env) {
        return env;
    }
    throw ConfigError("no checkpoint: pass --checkpoint or set MAPEDIT_CHECKPOINT");
}

map::FitConfig fit_for(const nlohmann::json& j, const Model& model)
{
    if (j.at("fit").is_null()) {
        return model.train.fit;
    }
    nlohmann::json f = model.train.fit.to_json();
    f.merge_patch(j.at("fit"));
    return map::FitConfig::from_json(f);
}

std::optional<map::EstimatorBackend> estimator_or_none(const nlohmann::json& j, const std::string& key)
{
    const std::string name = get<std::string>(j, key);
    if (name == "none") {
        return std::nullopt;
    }
    return map::parse_backend(name);
}

nlohmann::json pipeline_defaults()
{
    nlohmann::json j = PipelineConfig{}.to_json();
    return j;
}

const std::map<std::string, std::string> kPipelineHelp = {
    {"model_seed", "seed of the synthetic face model"},
    {"dims", "model dims as JSON {id, tex, exp, vertices}"},
    {"model", "load a saved face model instead of synthesising one"},
    {"image_size", "generator image size in pixels"},
    {"generator", "toy generator config as JSON (partial objects are merged)"},
    {"direction_sign", "reversed or paper"},
};

// ---------------------------------------------------------------------------

int cmd_synth(const nlohmann::json& j, std::ostream& out)
{
    morph::ModelDims dims;
    const auto& d = j.at("dims");
    dims.id = d.value("id", dims.id);
    dims.tex = d.value("tex", dims.tex);
    dims.exp = d.value("exp", dims.exp);
    dims.vertices = d.value("vertices", dims.vertices);
    const std::filesystem::path path = get<std::string>(j, "out");
    const morph::BasisModel basis = morph::synth_basis(get<std::uint64_t>(j, "seed"), dims);
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    basis.save(path);
    basis.save_sidecar(std::filesystem::path(path.string() + ".json"));
    out << nlohmann::json{{"model", path.string()}, {"seed", basis.seed}, {"vertices", dims.vertices}}.dump() << "\n";
    return 0;
}

int cmd_train(const nlohmann::json& j, std::ostream& out, std::ostream& err)
{
    const PipelineConfig pc = PipelineConfig::from_json(j);
    map::TrainConfig tc;
    try {
        tc = map::TrainConfig::from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    const Pipeline pipe(pc);
    const std::filesystem::path ck = get<std::string>(j, "out");
    const std::filesystem::path log =
        get_opt(j, "log") ? std::filesystem::path(*get_opt(j, "log")) : ck.parent_path() / "loss.csv";
    const long every = std::max(1, tc.iterations / 20);
    map::TrainResult r = map::train(pipe.generator(), tc, [&](const map::TrainLogRow& row) {
        if (row.iter % every == 0) {
            err << "iter " << row.iter << " total " << row.total << "\n";
        }
    });
    if (ck.has_parent_path()) {
        std::filesystem::create_directories(ck.parent_path());
    }
    save_model(ck, pipe, tc, r.nets);
    std::ostringstream csv;
    map::write_train_log_csv(csv, r.log);
    io::write_file(log, csv.str());
    out << nlohmann::json{{"checkpoint", ck.string()},
                          {"loss_csv", log.string()},
                          {"iterations", r.nets.iterations},
                          {"final_total", r.log.empty() ? 0.0 : r.log.back().total}}
               .dump()
        << "\n";
    return 0;
}

int cmd_edit(const nlohmann::json& j, std::ostream& out)
{
    const Model model = load_model(checkpoint_path(j));
    const Pipeline& pipe = *model.pipeline;

    nlohmann::json targets = nlohmann::json::object();
    std::string attribute;
    auto pick = [&](const std::string& attr) {
        if (!attribute.empty() && attribute != attr) {
            throw ConfigError("edit one attribute at a time (got " + attribute + " and " + attr + ")");
        }
        attribute = attr;
    };
    for (const char* key : {"yaw", "pitch"}) {
        if (!j.at(key).is_null()) {
            pick("pose");
            targets[key] = j.at(key);
        }
    }
    if (!j.at("gamma").is_null()) {
        pick("lighting");
        targets["gamma"] = j.at("gamma");
    }
    if (!j.at("coefficients").is_null()) {
        pick("expression");
        targets["coefficients"] = j.at("coefficients");
    }
    if (attribute.empty()) {
        throw ConfigError("nothing to edit: give --yaw/--pitch, --gamma or --coefficients");
    }
    const map::EditRequest request = parse_edit(attribute, targets, pipe.basis().dims, model.train.ranges);
    const std::uint64_t seed = get<std::uint64_t>(j, "seed");
    const LatentCode w = pipe.latent_for_seed(seed);
    const auto estimator = estimator_or_none(j, "estimator");
    const Pipeline::Edit edit = pipe.edit(model.nets, w, request, estimator, fit_for(j, model));

    const std::filesystem::path dir = get<std::string>(j, "out");
    std::filesystem::create_directories(dir);
    io::write_file(dir / "before.png", io::encode_png(pipe.render_source(w)));
    io::write_file(dir / "after.png", io::encode_png(edit.result.image));
    nlohmann::json result = edit_to_json(edit);
    result["seed"] = seed;
    result["attribute"] = attribute;
    result["targets"] = targets;
    result["estimator"] = estimator ? map::backend_name(*estimator) : "none";
    io::write_file(dir / "result.json", result.dump(2) + "\n");
    out << nlohmann::json{{"out", dir.string()},
                          {"achieved_yaw_deg", result.value("achieved_yaw_deg", nlohmann::json(nullptr))},
                          {"d_att_norm", result["d_att_norm"]}}
               .dump()
        << "\n";
    return 0;
}

int cmd_uv(const nlohmann::json& j, std::ostream& out)
{
    const Model model = load_model(checkpoint_path(j));
    const Pipeline& pipe = *model.pipeline;
    const uv::ViewSpec views = uv::ViewSpec::parse(get<std::string>(j, "views"));
    const LatentCode w = pipe.latent_for_seed(get<std::uint64_t>(j, "seed"));
    const Pipeline::Uv uv = pipe.complete_uv(model.nets, w, views, map::parse_backend(get<std::string>(j, "estimator")),
                                             fit_for(j, model), get<int>(j, "resolution"), get<int>(j, "feather"));
    const std::filesystem::path dir = get<std::string>(j, "out");
    uv::export_atlas(dir, uv.atlas, uv.samples);
    out << nlohmann::json{{"out", dir.string()},
                          {"views", uv.samples.size()},
                          {"hole_fraction", uv.atlas.hole_fraction()}}
               .dump()
        << "\n";
    return 0;
}

int cmd_eval(const nlohmann::json& j, std::ostream& out, std::ostream& err)
{
    const std::string ck = checkpoint_path(j);
    const Model model = load_model(ck);
    const Pipeline& pipe = *model.pipeline;

    eval::EvalConfig ec;
    ec.angles = eval::parse_angles(get<std::string>(j, "angles"));
    ec.seeds = get<int>(j, "seeds");
    ec.seed = get<std::uint64_t>(j, "seed");
    ec.estimator = map::parse_backend(get<std::string>(j, "estimator"));
    ec.fit = fit_for(j, model);
    ec.sign = pipe.config().sign;
    ec.ranges = model.train.ranges;
    if (!j.at("texture_seed").is_null()) {
        ec.texture_seed = get<std::uint64_t>(j, "texture_seed");
    }
    if (ec.seeds < 1) {
        throw ConfigError("--seeds must be at least 1");
    }
    const int metric_samples = get<int>(j, "metric_samples");
    const auto metric_seed = get<std::uint64_t>(j, "metric_seed");

    std::vector<std::string> reports;
    {
        std::stringstream ss(get<std::string>(j, "reports"));
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (item != "pose" && item != "disentanglement" && item != "mapping" && item != "ablation") {
                throw ConfigError("--reports: unknown report '" + item + "'");
            }
            reports.push_back(item);
        }
    }
    auto wants = [&](const char* name) { return std::find(reports.begin(), reports.end(), name) != reports.end(); };

    eval::EvalReport report;
    report.metadata = {{"checkpoint", ck},
                       {"eval", ec.to_json()},
                       {"train", model.train.to_json()},
                       {"pipeline", pipe.config().to_json()},
                       {"iterations", model.nets.iterations}};
    if (wants("pose")) {
        err << "pose error sweep\n";
        report.pose = eval::pose_error_sweep(pipe.generator(), model.nets, ec);
    }
    if (wants("disentanglement")) {
        err << "disentanglement matrix\n";
        report.disentanglement = eval::disentanglement_matrix(pipe.generator(), model.nets, ec);
    }
    if (wants("mapping")) {
        report.mapping = eval::mapping_metrics(pipe.generator(), model.nets, metric_samples, metric_seed);
    }
    if (wants("ablation")) {
        map::TrainConfig base = model.train;
        if (!j.at("ablation_iters").is_null()) {
            base.iterations = get<int>(j, "ablation_iters");
        }
        for (const auto& v : eval::default_ablation(base.weights)) {
            err << "ablation variant " << v.name << "\n";
            report.ablation.push_back(eval::run_variant(pipe.generator(), base, v, ec, metric_samples, metric_seed));
        }
    }
    const std::filesystem::path dir = get<std::string>(j, "out");
    eval::write_report(dir, report);
    nlohmann::json summary = {{"out", dir.string()}};
    if (report.pose) {
        summary["mean_pose_error_deg"] = report.pose->mean_error_deg;
    }
    out << summary.dump() << "\n";
    return 0;
}

int cmd_serve(const nlohmann::json& j, std::ostream& out)
{
    const Model model = load_model(checkpoint_path(j));
    ServiceConfig sc;
    sc.max_sessions = get<std::size_t>(j, "max_sessions");
    sc.uv_estimator = map::parse_backend(get<std::string>(j, "uv_estimator"));
    sc.uv_resolution = get<int>(j, "uv_resolution");
    sc.edit_estimator = estimator_or_none(j, "edit_estimator");
    sc.static_dir = get_opt(j, "static_dir");
    Service service(model, sc);
    httplib::Server server;
    service.mount(server);
    const std::string host = get<std::string>(j, "host");
    const int port = get<int>(j, "port");
    out << "listening on " << host << ":" << port << std::endl;
    if (!server.listen(host, port)) {
        throw ConfigError("cannot listen on " + host + ":" + std::to_string(port));
    }
    return 0;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Map-and-edit face editing on a toy generator"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    auto* synth = app.add_subcommand("synth-model", "write a synthetic face model");
    KeyedOptions synth_opts(synth,
                            {{"seed", 1}, {"dims", PipelineConfig{}.to_json()["dims"]}, {"out", "model.bin"}},
                            {{"seed", "model seed"}, {"dims", "JSON {id, tex, exp, vertices}"}, {"out", "model path"}});

    nlohmann::json train_defaults = map::TrainConfig{}.to_json();
    train_defaults.update(pipeline_defaults());
    train_defaults["out"] = "checkpoint.bin";
    train_defaults["log"] = nullptr;
    std::map<std::string, std::string> train_help = kPipelineHelp;
    train_help.insert({{"iters", "training iterations"},
                       {"seed", "training seed"},
                       {"lr", "Adam learning rate"},
                       {"batch", "latents per iteration"},
                       {"estimator", "oracle or fit"},
                       {"reg", "true/false: include the coefficient regulariser"},
                       {"out", "checkpoint path"},
                       {"log", "loss CSV path (default: loss.csv beside the checkpoint)"}});
    auto* train = app.add_subcommand("train", "train the forward and inverse mappers");
    KeyedOptions train_opts(train, train_defaults, train_help);

    auto* edit = app.add_subcommand("edit", "edit one generated face");
    KeyedOptions edit_opts(edit,
                           {{"checkpoint", nullptr},
                            {"seed", 0},
                            {"yaw", nullptr},
                            {"pitch", nullptr},
                            {"gamma", nullptr},
                            {"coefficients", nullptr},
                            {"estimator", "fit"},
                            {"fit", nullptr},
                            {"out", "."}},
                           {{"checkpoint", "checkpoint path (default $MAPEDIT_CHECKPOINT)"},
                            {"seed", "latent seed"},
                            {"yaw", "target yaw in degrees"},
                            {"pitch", "target pitch in degrees"},
                            {"gamma", "27 SH lighting coefficients as a JSON array"},
                            {"coefficients", "expression targets as JSON {\"index\": value}"},
                            {"estimator", "fit, oracle or none: how achieved parameters are read back"},
                            {"fit", "fit config overrides as JSON"},
                            {"out", "output directory"}});

    auto* uvc = app.add_subcommand("uv", "complete a UV texture from edited views");
    KeyedOptions uv_opts(uvc,
                         {{"checkpoint", nullptr},
                          {"seed", 0},
                          {"views", "default"},
                          {"estimator", "fit"},
                          {"resolution", 256},
                          {"feather", 3},
                          {"fit", nullptr},
                          {"out", "uv"}},
                         {{"checkpoint", "checkpoint path (default $MAPEDIT_CHECKPOINT)"},
                          {"views", "default or yaw:pitch pairs in degrees, e.g. 0:0,30:0"},
                          {"estimator", "fit or oracle"},
                          {"resolution", "atlas size in texels"},
                          {"feather", "mask ramp width in texels"},
                          {"out", "output directory"}});

    auto* evc = app.add_subcommand("eval", "pose error, disentanglement, mapping and ablation reports");
    KeyedOptions eval_opts(evc,
                           {{"checkpoint", nullptr},
                            {"seeds", 50},
                            {"seed", 1000},
                            {"angles", "default"},
                            {"estimator", "fit"},
                            {"texture_seed", nullptr},
                            {"reports", "pose,disentanglement,mapping"},
                            {"metric_samples", 200},
                            {"metric_seed", 999},
                            {"ablation_iters", nullptr},
                            {"fit", nullptr},
                            {"out", "eval"}},
                           {{"checkpoint", "checkpoint path (default $MAPEDIT_CHECKPOINT)"},
                            {"seeds", "samples per angle"},
                            {"angles", "default or e.g. yaw:20,pitch:-10"},
                            {"estimator", "fit or oracle"},
                            {"texture_seed", "redraw every sample's texture block from this seed"},
                            {"reports", "comma list of pose, disentanglement, mapping, ablation"},
                            {"ablation_iters", "training iterations per ablation variant"},
                            {"out", "report directory"}});

    auto* serve = app.add_subcommand("serve", "HTTP API over a checkpoint");
    KeyedOptions serve_opts(serve,
                            {{"checkpoint", nullptr},
                             {"host", "127.0.0.1"},
                             {"port", 8080},
                             {"max_sessions", 256},
                             {"uv_estimator", "oracle"},
                             {"uv_resolution", 256},
                             {"edit_estimator", "none"},
                             {"static_dir", nullptr}},
                            {{"checkpoint", "checkpoint path (default $MAPEDIT_CHECKPOINT)"},
                             {"uv_estimator", "oracle or fit for GET /session/{id}/uv"},
                             {"edit_estimator", "none, oracle or fit for POST /session/{id}/edit"},
                             {"static_dir", "directory served at /"}});

    std::vector<const char*> argv;
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        if (synth->parsed()) {
            return cmd_synth(synth_opts.resolve(), out);
        }
        if (train->parsed()) {
            return cmd_train(train_opts.resolve(), out, err);
        }
        if (edit->parsed()) {
            return cmd_edit(edit_opts.resolve(), out);
        }
        if (uvc->parsed()) {
            return cmd_uv(uv_opts.resolve(), out);
        }
        if (evc->parsed()) {
            return cmd_eval(eval_opts.resolve(), out, err);
        }
        return cmd_serve(serve_opts.resolve(), out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace mapedit::app
