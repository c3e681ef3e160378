#pragma once

#include "mapedit/pipeline.hpp"

#include <cstddef>
#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>

namespace httplib {
class Server;
}

namespace mapedit::app {

struct ServiceConfig {
    std::size_t max_sessions = 256;
    // /uv reads view parameters straight from the generator by default; "fit" refits each
    // view and takes tens of seconds per request.
    map::EstimatorBackend uv_estimator = map::EstimatorBackend::Oracle;
    int uv_resolution = 256;
    std::optional<map::EstimatorBackend> edit_estimator; // nullopt: no refit on POST /edit
    std::optional<std::string> static_dir;               // mounted at / when set
};

struct Session {
    std::string id;
    std::uint64_t seed = 0;
    LatentCode w;
    std::optional<nlohmann::json> last_edit; // {attribute, targets}
    std::optional<std::string> edited_png;
    std::optional<std::string> uv_png;
    std::mutex mutex; // serialises work on this session
};

/// In-memory session table, least recently used first out.
class SessionStore {
public:
    explicit SessionStore(std::size_t capacity);

    std::shared_ptr<Session> create(std::uint64_t seed, LatentCode w);
    /// nullptr for unknown (or evicted) ids. A hit refreshes recency.
    std::shared_ptr<Session> find(const std::string& id);
    std::size_t size() const;

private:
    using Entry = std::pair<std::shared_ptr<Session>, std::list<std::string>::iterator>;

    std::size_t capacity_;
    std::uint64_t next_ = 1;
    mutable std::mutex mutex_;
    std::list<std::string> order_; // most recent at the front
    std::unordered_map<std::string, Entry> sessions_;
};

/// HTTP front end over a loaded model. The model is shared read-only between requests.
class Service {
public:
    Service(const Model& model, ServiceConfig config = {});

    /// Registers every route on `server`.
    void mount(httplib::Server& server);

    SessionStore& sessions() { return sessions_; }

private:
    const Model& model_;
    ServiceConfig config_;
    SessionStore sessions_;
};

} // namespace mapedit::app
