#pragma once

#include "misim/context.hpp"
#include "misim/dataset.hpp"
#include "misim/evaluation.hpp"
#include "misim/simulation.hpp"

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace misim {

struct ServerOptions {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    std::filesystem::path persist_dir;  // empty disables persistence
    std::filesystem::path ui_dir;       // static files served at / when set
    std::chrono::seconds idle_ttl{1800};
    std::chrono::seconds reap_interval{30};
    SimulationConfig session_defaults;
};

struct ApiResponse {
    int status = 200;
    std::string body;  // JSON
};

// HTTP-independent session and evaluation logic behind the /api routes.
// Thread-safe; each live session is guarded by its own mutex and concurrent
// posts to one session get 409 instead of waiting.
class SessionService {
public:
    SessionService(SimulationRuntime runtime, std::vector<ContextPost> contexts, Rubric rubric,
                   ServerOptions options);

    ApiResponse create_session(const std::string& body);
    ApiResponse get_session(const std::string& id) const;
    ApiResponse post_client_turn(const std::string& id, const std::string& body);
    ApiResponse close_session(const std::string& id);
    ApiResponse list_contexts(const std::optional<std::string>& category) const;
    ApiResponse rubric(bool interactive) const;
    // `rater_header` fills rater_id when the body lacks it.
    ApiResponse submit_evaluation(const std::string& body, const std::string& rater_header = {});
    ApiResponse aggregate(const std::optional<std::string>& criterion, const std::optional<std::string>& rule) const;

    // Closes and persists sessions idle longer than the TTL; returns how many.
    std::size_t reap_idle(std::chrono::steady_clock::time_point now);

    const ServerOptions& options() const noexcept { return options_; }
    std::size_t live_sessions() const;

private:
    struct Entry {
        std::mutex mutex;
        SessionState state;
        std::chrono::steady_clock::time_point last_activity;
    };

    std::shared_ptr<Entry> find_live(const std::string& id) const;
    void finish(const std::string& id, const SessionState& state);
    void load_persisted();

    SimulationRuntime runtime_;
    std::vector<ContextPost> contexts_;
    Rubric rubric_;
    ServerOptions options_;

    mutable std::mutex registry_mutex_;
    std::map<std::string, std::shared_ptr<Entry>> live_;
    std::map<std::string, Dialogue> completed_;

    mutable std::mutex eval_mutex_;
    std::map<std::pair<std::string, std::string>, EvaluationSubmission> evaluations_;

    std::mutex persist_mutex_;
};

// 32 hex characters from the system entropy source.
std::string new_session_id();

// cpp-httplib front end for SessionService plus an idle-session reaper
// thread.
class ApiServer {
public:
    ApiServer(std::shared_ptr<SessionService> service);
    ~ApiServer();
    ApiServer(const ApiServer&) = delete;
    ApiServer& operator=(const ApiServer&) = delete;

    // Binds host:port (port 0 picks one) and returns the bound port.
    int bind();
    // Blocks until stop().
    void run();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace misim
