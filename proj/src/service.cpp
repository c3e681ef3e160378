#include "mapedit/service.hpp"

#include "mapedit/png_io.hpp"

#include <httplib.h>

#include <cstdio>

namespace mapedit::app {

SessionStore::SessionStore(std::size_t capacity) : capacity_(capacity)
{
    if (capacity_ == 0) {
        throw ConfigError("max_sessions must be positive");
    }
}

std::shared_ptr<Session> SessionStore::create(std::uint64_t seed, LatentCode w)
{
    auto s = std::make_shared<Session>();
    s->seed = seed;
    s->w = std::move(w);
    std::lock_guard lock(mutex_);
    char id[24];
    std::snprintf(id, sizeof id, "s%08llx", static_cast<unsigned long long>(next_++));
    s->id = id;
    order_.push_front(s->id);
    sessions_.emplace(s->id, Entry{s, order_.begin()});
    while (sessions_.size() > capacity_) {
        sessions_.erase(order_.back());
        order_.pop_back();
    }
    return s;
}

std::shared_ptr<Session> SessionStore::find(const std::string& id)
{
    std::lock_guard lock(mutex_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) {
        return nullptr;
    }
    order_.splice(order_.begin(), order_, it->second.second);
    return it->second.first;
}

std::size_t SessionStore::size() const
{
    std::lock_guard lock(mutex_);
    return sessions_.size();
}

Service::Service(const Model& model, ServiceConfig config)
    : model_(model), config_(std::move(config)), sessions_(config_.max_sessions)
{
}

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body)
{
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& error, const std::string& detail,
                const std::string& field = {})
{
    nlohmann::json body = {{"error", error}, {"detail", detail}};
    if (!field.empty()) {
        body["field"] = field;
    }
    send_json(res, status, body);
}

void send_png(httplib::Response& res, std::string bytes)
{
    res.status = 200;
    res.set_content(std::move(bytes), "image/png");
}

nlohmann::json parse_body(const httplib::Request& req)
{
    if (req.body.empty()) {
        return nlohmann::json::object();
    }
    try {
        nlohmann::json j = nlohmann::json::parse(req.body);
        if (!j.is_object()) {
            throw FieldError("body", "must be a JSON object");
        }
        return j;
    } catch (const nlohmann::json::parse_error&) {
        throw FieldError("body", "is not valid JSON");
    }
}

} // namespace

void Service::mount(httplib::Server& server)
{
    const Pipeline& pipe = *model_.pipeline;
    using Req = httplib::Request;
    using Res = httplib::Response;

    // Without a session in hand, the handler wrapper turns exceptions into error bodies.
    auto guarded = [](auto fn) {
        return [fn](const httplib::Request& req, httplib::Response& res) {
            try {
                fn(req, res);
            } catch (const FieldError& e) {
                send_error(res, 400, "bad_request", e.what(), e.field());
            } catch (const ConfigError& e) {
                send_error(res, 400, "bad_request", e.what());
            } catch (const std::exception& e) {
                send_error(res, 500, "internal", e.what());
            }
        };
    };
    auto session_or_404 = [this](const httplib::Request& req, httplib::Response& res) -> std::shared_ptr<Session> {
        auto s = sessions_.find(req.matches[1]);
        if (!s) {
            send_error(res, 404, "unknown_session", "no session '" + std::string(req.matches[1]) + "'");
        }
        return s;
    };

    server.Post("/session", guarded([this, &pipe](const Req& req, Res& res) {
        const nlohmann::json body = parse_body(req);
        std::uint64_t seed = 0;
        if (body.contains("seed") && !body["seed"].is_null()) {
            if (!body["seed"].is_number_unsigned()) {
                throw FieldError("seed", "must be a non-negative integer");
            }
            seed = body["seed"].get<std::uint64_t>();
        } else {
            seed = sessions_.size() + 1;
        }
        auto s = sessions_.create(seed, pipe.latent_for_seed(seed));
        send_json(res, 200,
                  {{"session_id", s->id},
                   {"seed", seed},
                   {"params", params_to_json(model_.nets.forward_params(s->w))}});
    }));

    server.Get(R"(/session/([^/]+)/render)", guarded([this, &pipe, session_or_404](const Req& req, Res& res) {
        auto s = session_or_404(req, res);
        if (!s) {
            return;
        }
        std::optional<int> size;
        if (req.has_param("size")) {
            const std::string text = req.get_param_value("size");
            std::size_t used = 0;
            int v = 0;
            try {
                v = std::stoi(text, &used);
            } catch (const std::logic_error&) {
                used = 0;
            }
            if (used == 0 || used != text.size()) {
                throw FieldError("size", "must be an integer");
            }
            size = v;
        }
        std::lock_guard lock(s->mutex);
        send_png(res, io::encode_png(pipe.render_source(s->w, size)));
    }));

    server.Post(R"(/session/([^/]+)/edit)", guarded([this, &pipe, session_or_404](const Req& req, Res& res) {
        auto s = session_or_404(req, res);
        if (!s) {
            return;
        }
        const nlohmann::json body = parse_body(req);
        if (!body.contains("attribute") || !body["attribute"].is_string()) {
            throw FieldError("attribute", "required string (pose, lighting or expression)");
        }
        if (!body.contains("targets")) {
            throw FieldError("targets", "required");
        }
        const map::EditRequest request =
            parse_edit(body["attribute"].get<std::string>(), body["targets"], pipe.basis().dims, model_.train.ranges);
        std::lock_guard lock(s->mutex);
        const Pipeline::Edit edit = pipe.edit(model_.nets, s->w, request, config_.edit_estimator, model_.train.fit);
        s->last_edit = nlohmann::json{{"attribute", body["attribute"]}, {"targets", body["targets"]}};
        s->edited_png = io::encode_png(edit.result.image);
        nlohmann::json out = edit_to_json(edit);
        if (!out.contains("params_after")) {
            // No refit: report what the forward mapper reads off the edited latent.
            out["params_after"] = params_to_json(model_.nets.forward_params(edit.result.w_edited));
        }
        out["session_id"] = s->id;
        send_json(res, 200, out);
    }));

    server.Get(R"(/session/([^/]+)/image/edited)", guarded([this, &pipe, session_or_404](const Req& req, Res& res) {
        auto s = session_or_404(req, res);
        if (!s) {
            return;
        }
        std::lock_guard lock(s->mutex);
        if (!s->edited_png) {
            send_error(res, 409, "no_edit", "session has no edit yet; POST /session/{id}/edit first");
            return;
        }
        send_png(res, *s->edited_png);
    }));

    server.Get(R"(/session/([^/]+)/uv)", guarded([this, &pipe, session_or_404](const Req& req, Res& res) {
        auto s = session_or_404(req, res);
        if (!s) {
            return;
        }
        std::lock_guard lock(s->mutex);
        if (!s->uv_png) {
            const Pipeline::Uv uv = pipe.complete_uv(model_.nets, s->w, uv::ViewSpec::defaults(), config_.uv_estimator,
                                                     model_.train.fit, config_.uv_resolution);
            s->uv_png = io::encode_png(uv.atlas.blended);
        }
        send_png(res, *s->uv_png);
    }));

    server.Get("/model/info", guarded([this](const Req&, Res& res) {
        nlohmann::json info = model_info(model_);
        info["service"] = {{"max_sessions", config_.max_sessions},
                           {"uv_estimator", map::backend_name(config_.uv_estimator)},
                           {"uv_resolution", config_.uv_resolution},
                           {"uv_views", uv::ViewSpec::defaults().to_json()}};
        send_json(res, 200, info);
    }));

    if (config_.static_dir) {
        if (!server.set_mount_point("/", *config_.static_dir)) {
            throw ConfigError("static_dir '" + *config_.static_dir + "' is not a directory");
        }
    }

    server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
        if (res.body.empty()) {
            send_error(res, res.status, res.status == 404 ? "not_found" : "http_error",
                       req.method + " " + req.path);
        }
    });
}

} // namespace mapedit::app
