#include "misim/server.hpp"

#include "misim/error.hpp"
#include "misim/util.hpp"

#include "httplib.h"

#include <nlohmann/json.hpp>

#include <atomic>
#include <condition_variable>
#include <random>
#include <set>
#include <thread>

namespace misim {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

ApiResponse reply(int status, const ordered_json& body) {
    return {status, body.dump(-1, ' ', false, ordered_json::error_handler_t::replace)};
}

ApiResponse error_reply(int status, std::string_view code, const std::string& message) {
    ordered_json body;
    body["code"] = code;
    body["message"] = message;
    return reply(status, body);
}

int status_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidArgument:
        case ErrorCode::UnknownLabel:
        case ErrorCode::SchemaViolation: return 422;
        case ErrorCode::WrongPhase: return 409;
        case ErrorCode::SessionClosed: return 410;
        case ErrorCode::BackendTimeout: return 504;
        case ErrorCode::BackendRejected:
        case ErrorCode::RetriesExhausted: return 502;
        default: return 500;
    }
}

ApiResponse error_reply(const Error& e) { return error_reply(status_for(e.code()), error_code_name(e.code()), e.what()); }

ordered_json turn_json(const Utterance& u, std::size_t index) {
    ordered_json j;
    j["index"] = index;
    j["speaker"] = interlocutor_name(u.speaker);
    j["text"] = u.text;
    if (u.label) {
        j["label"] = machine_id(*u.label);
        j["label_display"] = display_name(*u.label);
    }
    return j;
}

ordered_json context_json(const ContextPost& c) {
    ordered_json j;
    j["id"] = c.id;
    j["category"] = machine_id(c.category);
    j["category_display"] = display_name(c.category);
    j["text"] = c.text;
    j["score"] = c.score ? json(*c.score) : json(nullptr);
    return j;
}

ordered_json transcript_json(const std::string& id, const std::string& category, const std::string& context_text,
                             std::span<const Utterance> turns, Phase phase, bool cap_reached) {
    ordered_json list = ordered_json::array();
    std::size_t therapist = 0;
    for (std::size_t i = 0; i < turns.size(); ++i) {
        list.push_back(turn_json(turns[i], i));
        if (turns[i].speaker == Interlocutor::Therapist) ++therapist;
    }
    ordered_json j;
    j["session_id"] = id;
    j["phase"] = phase_name(phase);
    j["closed"] = phase == Phase::Closed;
    j["category"] = category;
    j["context"] = context_text;
    j["therapist_turns"] = therapist;
    j["client_turns"] = turns.size() - therapist;
    j["turn_cap_reached"] = cap_reached;
    j["turns"] = std::move(list);
    return j;
}

ordered_json state_json(const SessionState& s) {
    return transcript_json(s.id, std::string(machine_id(s.context.category)), s.context.text, s.turns, s.phase,
                           s.turn_cap_reached);
}

std::optional<json> parse_body(const std::string& body) {
    try {
        auto j = json::parse(body);
        if (!j.is_object()) return std::nullopt;
        return j;
    } catch (const json::exception&) {
        return std::nullopt;
    }
}

bool has_note(const TurnTrace& t, std::string_view note) {
    return std::find(t.notes.begin(), t.notes.end(), note) != t.notes.end();
}

}  // namespace

std::string new_session_id() {
    std::random_device device;
    std::uniform_int_distribution<std::uint32_t> word;
    std::string out;
    static constexpr char kHex[] = "0123456789abcdef";
    for (int i = 0; i < 4; ++i) {
        std::uint32_t w = word(device);
        for (int k = 0; k < 8; ++k) {
            out.push_back(kHex[w & 0xF]);
            w >>= 4;
        }
    }
    return out;
}

SessionService::SessionService(SimulationRuntime runtime, std::vector<ContextPost> contexts, Rubric rubric,
                               ServerOptions options)
    : runtime_(std::move(runtime)), contexts_(std::move(contexts)), rubric_(std::move(rubric)),
      options_(std::move(options)) {
    runtime_.validate();
    options_.session_defaults.validate();
    load_persisted();
}

void SessionService::load_persisted() {
    if (options_.persist_dir.empty()) return;
    std::filesystem::create_directories(options_.persist_dir);
    const auto dialogues = options_.persist_dir / "dialogues.jsonl";
    if (std::filesystem::exists(dialogues)) {
        for (auto& d : read_dialogues(dialogues)) completed_[d.id] = std::move(d);
    }
    const auto evaluations = options_.persist_dir / "evaluations.jsonl";
    if (std::filesystem::exists(evaluations)) {
        for (const auto& line : read_nonempty_lines(evaluations)) {
            auto s = parse_submission(line.text, line.number);
            evaluations_[{s.dialogue_id, s.rater_id}] = std::move(s);
        }
    }
}

std::size_t SessionService::live_sessions() const {
    std::lock_guard lock(registry_mutex_);
    return live_.size();
}

std::shared_ptr<SessionService::Entry> SessionService::find_live(const std::string& id) const {
    std::lock_guard lock(registry_mutex_);
    auto it = live_.find(id);
    return it == live_.end() ? nullptr : it->second;
}

void SessionService::finish(const std::string& id, const SessionState& state) {
    Dialogue dialogue = to_dialogue(state);
    if (!options_.persist_dir.empty()) {
        std::lock_guard lock(persist_mutex_);
        append_line(options_.persist_dir / "dialogues.jsonl", serialize_dialogue(dialogue));
        append_line(options_.persist_dir / "traces.jsonl", serialize_trace(state));
    }
    std::lock_guard lock(registry_mutex_);
    completed_[id] = std::move(dialogue);
    live_.erase(id);
}

ApiResponse SessionService::create_session(const std::string& body) {
    auto request = parse_body(body);
    if (!request) return error_reply(422, "invalid_argument", "request body must be a JSON object");

    ContextPost context;
    try {
        if (request->contains("context_id")) {
            const auto wanted = request->at("context_id").get<std::string>();
            auto it = std::find_if(contexts_.begin(), contexts_.end(),
                                   [&](const ContextPost& c) { return c.id == wanted; });
            if (it == contexts_.end()) return error_reply(404, "not_found", "unknown context id '" + wanted + "'");
            context = *it;
        } else if (request->contains("context_text")) {
            context.text = trim(request->at("context_text").get<std::string>());
            if (context.text.empty()) return error_reply(422, "invalid_argument", "context_text is empty");
            if (request->contains("category")) {
                auto category = try_parse_category(request->at("category").get<std::string>());
                if (!category) return error_reply(422, "invalid_argument", "unknown category");
                context.category = *category;
            }
        } else {
            return error_reply(422, "invalid_argument", "context_id or context_text is required");
        }
    } catch (const json::exception& e) {
        return error_reply(422, "invalid_argument", e.what());
    }

    SimulationConfig config = options_.session_defaults;
    if (request->contains("config")) {
        const auto& overrides = request->at("config");
        if (!overrides.is_object()) return error_reply(422, "invalid_argument", "config must be an object");
        auto merged = json::parse(config.to_json());
        merged.update(overrides);
        try {
            config = SimulationConfig::from_json_text(merged.dump());
        } catch (const Error& e) {
            return error_reply(e);
        }
    }
    config.allow_unscored_context = true;

    const std::string id = new_session_id();
    if (context.id.empty()) context.id = id;
    SessionState state;
    try {
        state = open_session(context, config, runtime_, id);
    } catch (const Error& e) {
        return error_reply(e);
    }

    ordered_json out;
    out["session_id"] = id;
    out["phase"] = phase_name(state.phase);
    out["closed"] = state.phase == Phase::Closed;
    out["context"] = context_json(state.context);
    out["turn"] = turn_json(state.turns.front(), 0);

    if (state.phase == Phase::Closed) {
        finish(id, state);
    } else {
        auto entry = std::make_shared<Entry>();
        entry->state = std::move(state);
        entry->last_activity = std::chrono::steady_clock::now();
        std::lock_guard lock(registry_mutex_);
        live_[id] = std::move(entry);
    }
    return reply(201, out);
}

ApiResponse SessionService::get_session(const std::string& id) const {
    if (auto entry = find_live(id)) {
        std::lock_guard lock(entry->mutex);
        return reply(200, state_json(entry->state));
    }
    std::lock_guard lock(registry_mutex_);
    if (auto it = completed_.find(id); it != completed_.end()) {
        const auto& d = it->second;
        return reply(200, transcript_json(d.id, std::string(machine_id(d.category)), d.context, d.turns,
                                          Phase::Closed, false));
    }
    return error_reply(404, "not_found", "unknown session '" + id + "'");
}

ApiResponse SessionService::post_client_turn(const std::string& id, const std::string& body) {
    auto entry = find_live(id);
    if (!entry) {
        std::lock_guard lock(registry_mutex_);
        if (completed_.count(id)) return error_reply(410, "session_closed", "session " + id + " is closed");
        return error_reply(404, "not_found", "unknown session '" + id + "'");
    }
    std::unique_lock lock(entry->mutex, std::try_to_lock);
    if (!lock.owns_lock()) return error_reply(409, "wrong_phase", "session " + id + " is busy with another turn");
    if (entry->state.phase == Phase::Closed) return error_reply(410, "session_closed", "session " + id + " is closed");
    if (entry->state.phase != Phase::AwaitingClient) {
        return error_reply(409, "wrong_phase", "session " + id + " is not awaiting the client");
    }

    auto request = parse_body(body);
    if (!request || !request->contains("text") || !request->at("text").is_string()) {
        return error_reply(422, "invalid_argument", "body must be {\"text\": string}");
    }

    SessionState next = entry->state;
    try {
        append_client_text(next, request->at("text").get<std::string>());
        next_therapist_turn(next, runtime_);
    } catch (const Error& e) {
        return error_reply(e);
    } catch (const std::exception& e) {
        return error_reply(500, "internal", e.what());
    }

    const std::size_t client_index = next.turns.size() - 2;
    const std::size_t therapist_index = next.turns.size() - 1;
    const TurnTrace& trace = next.traces.back();
    ordered_json out;
    out["session_id"] = id;
    out["client_turn"] = turn_json(next.turns[client_index], client_index);
    out["turn"] = turn_json(next.turns[therapist_index], therapist_index);
    out["label"] = machine_id(*next.turns[therapist_index].label);
    ordered_json ranking = ordered_json::array();
    for (MiLabel l : trace.ranking) ranking.push_back(machine_id(l));
    ordered_json top3 = ordered_json::array();
    for (std::size_t i = 0; i < std::min<std::size_t>(3, trace.ranking.size()); ++i) {
        top3.push_back(machine_id(trace.ranking[i]));
    }
    out["top3"] = std::move(top3);
    out["ranking"] = std::move(ranking);
    ordered_json checks = ordered_json::array();
    for (const auto& c : trace.decision->trace) {
        checks.push_back({{"label", machine_id(c.label)}, {"blocked_by", blocking_rule_name(c.blocked_by)}});
    }
    out["decision"] = {{"label", machine_id(trace.decision->label)},
                       {"fallback", trace.decision->fallback},
                       {"checks", std::move(checks)}};
    out["stages"] = ordered_json::array(
        {{{"name", "translate"}, {"status", has_note(trace, "translation_skipped") ? "skipped" : "done"}},
         {{"name", "forecast"}, {"status", "done"}},
         {{"name", "generate"}, {"status", "done"}}});
    out["closed"] = next.phase == Phase::Closed;
    out["turn_cap_reached"] = next.turn_cap_reached;
    out["phase"] = phase_name(next.phase);

    entry->state = std::move(next);
    entry->last_activity = std::chrono::steady_clock::now();
    if (entry->state.phase == Phase::Closed) finish(id, entry->state);
    return reply(200, out);
}

ApiResponse SessionService::close_session(const std::string& id) {
    auto entry = find_live(id);
    if (!entry) {
        std::lock_guard lock(registry_mutex_);
        if (completed_.count(id)) return error_reply(410, "session_closed", "session " + id + " is closed");
        return error_reply(404, "not_found", "unknown session '" + id + "'");
    }
    std::unique_lock lock(entry->mutex, std::try_to_lock);
    if (!lock.owns_lock()) return error_reply(409, "wrong_phase", "session " + id + " is busy with another turn");
    if (entry->state.phase == Phase::Closed) return error_reply(410, "session_closed", "session " + id + " is closed");
    misim::close_session(entry->state, "closed_by_request");
    finish(id, entry->state);
    return reply(200, state_json(entry->state));
}

ApiResponse SessionService::list_contexts(const std::optional<std::string>& category) const {
    std::optional<Category> wanted;
    if (category && !category->empty()) {
        wanted = try_parse_category(*category);
        if (!wanted) return error_reply(422, "invalid_argument", "unknown category '" + *category + "'");
    }
    ordered_json categories = ordered_json::array();
    for (Category c : kAllCategories) categories.push_back({{"id", machine_id(c)}, {"name", display_name(c)}});
    ordered_json list = ordered_json::array();
    for (const auto& c : contexts_) {
        if (!wanted || c.category == *wanted) list.push_back(context_json(c));
    }
    ordered_json out;
    out["categories"] = std::move(categories);
    out["contexts"] = std::move(list);
    return reply(200, out);
}

ApiResponse SessionService::rubric(bool interactive) const {
    return {200, rubric_.to_json(interactive)};
}

ApiResponse SessionService::submit_evaluation(const std::string& body, const std::string& rater_header) {
    auto request = parse_body(body);
    if (!request) return error_reply(422, "invalid_argument", "request body must be a JSON object");
    if (!request->contains("rater_id") && !rater_header.empty()) (*request)["rater_id"] = rater_header;

    EvaluationSubmission submission;
    try {
        submission = parse_submission(request->dump());
        if (!request->contains("interactive")) {
            std::lock_guard lock(registry_mutex_);
            submission.interactive = live_.count(submission.dialogue_id) || completed_.count(submission.dialogue_id);
        }
        validate_submission(submission, rubric_);
    } catch (const Error& e) {
        return error_reply(422, error_code_name(e.code()), e.what());
    }

    std::optional<EvaluationSubmission> previous;
    {
        std::lock_guard lock(eval_mutex_);
        auto key = std::make_pair(submission.dialogue_id, submission.rater_id);
        if (auto it = evaluations_.find(key); it != evaluations_.end()) previous = it->second;
        evaluations_[key] = submission;
        if (!options_.persist_dir.empty()) {
            std::lock_guard plock(persist_mutex_);
            append_line(options_.persist_dir / "evaluations.jsonl", serialize_submission(submission));
        }
    }
    ordered_json out;
    out["status"] = previous ? "replaced" : "stored";
    out["record"] = ordered_json::parse(serialize_submission(submission));
    if (previous) out["previous"] = ordered_json::parse(serialize_submission(*previous));
    return reply(previous ? 200 : 201, out);
}

ApiResponse SessionService::aggregate(const std::optional<std::string>& criterion,
                                      const std::optional<std::string>& rule_text) const {
    AggregationRule rule = AggregationRule::MajorityThenMedian;
    try {
        if (rule_text && !rule_text->empty()) rule = parse_aggregation_rule(*rule_text);
    } catch (const Error& e) {
        return error_reply(422, error_code_name(e.code()), e.what());
    }
    std::vector<std::string> criteria;
    if (criterion && !criterion->empty()) {
        if (!rubric_.find(*criterion)) return error_reply(422, "invalid_argument", "unknown criterion");
        criteria.push_back(*criterion);
    } else {
        for (auto id : kCriterionIds) criteria.emplace_back(id);
    }

    std::vector<LikertRating> ratings;
    {
        std::lock_guard lock(eval_mutex_);
        for (const auto& [key, s] : evaluations_) {
            auto r = to_ratings(s);
            ratings.insert(ratings.end(), r.begin(), r.end());
        }
    }
    ordered_json list = ordered_json::array();
    for (const auto& c : criteria) {
        std::set<std::string> items;
        for (const auto& r : ratings) {
            if (r.criterion == c) items.insert(r.dialogue_id);
        }
        if (items.empty()) continue;
        std::vector<std::string> ids(items.begin(), items.end());
        const auto agg = aggregate_dataset(ratings, c, ids, rule);
        ordered_json j;
        j["criterion"] = c;
        j["items"] = ids.size();
        j["mean"] = agg.mean;
        j["mean_text"] = agg.mean_text;
        list.push_back(std::move(j));
    }
    ordered_json out;
    out["rule"] = rule == AggregationRule::Median ? "median" : "majority-median";
    out["criteria"] = std::move(list);
    return reply(200, out);
}

std::size_t SessionService::reap_idle(std::chrono::steady_clock::time_point now) {
    std::vector<std::pair<std::string, std::shared_ptr<Entry>>> candidates;
    {
        std::lock_guard lock(registry_mutex_);
        for (const auto& [id, entry] : live_) candidates.emplace_back(id, entry);
    }
    std::size_t reaped = 0;
    for (auto& [id, entry] : candidates) {
        std::unique_lock lock(entry->mutex, std::try_to_lock);
        if (!lock.owns_lock()) continue;
        if (entry->state.phase == Phase::Closed) continue;
        if (now - entry->last_activity < options_.idle_ttl) continue;
        misim::close_session(entry->state, "idle_timeout");
        finish(id, entry->state);
        ++reaped;
    }
    return reaped;
}

struct ApiServer::Impl {
    std::shared_ptr<SessionService> service;
    httplib::Server server;
    int port = 0;
    std::thread reaper;
    std::mutex stop_mutex;
    std::condition_variable stop_cv;
    bool stopping = false;

    static void send(httplib::Response& res, const ApiResponse& r) {
        res.status = r.status;
        res.set_content(r.body, "application/json");
    }

    static std::optional<std::string> param(const httplib::Request& req, const char* name) {
        if (!req.has_param(name)) return std::nullopt;
        return req.get_param_value(name);
    }

    void routes() {
        auto& svc = *service;
        server.Post("/api/sessions", [&svc](const httplib::Request& req, httplib::Response& res) {
            send(res, svc.create_session(req.body));
        });
        server.Get(R"(/api/sessions/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
            send(res, svc.get_session(req.matches[1]));
        });
        server.Post(R"(/api/sessions/([^/]+)/client-turn)",
                    [&svc](const httplib::Request& req, httplib::Response& res) {
                        send(res, svc.post_client_turn(req.matches[1], req.body));
                    });
        server.Post(R"(/api/sessions/([^/]+)/close)", [&svc](const httplib::Request& req, httplib::Response& res) {
            send(res, svc.close_session(req.matches[1]));
        });
        server.Get("/api/contexts", [&svc](const httplib::Request& req, httplib::Response& res) {
            send(res, svc.list_contexts(param(req, "category")));
        });
        server.Get("/api/rubric", [&svc](const httplib::Request& req, httplib::Response& res) {
            const auto flag = param(req, "interactive");
            send(res, svc.rubric(flag && (*flag == "1" || *flag == "true")));
        });
        server.Post("/api/evaluations", [&svc](const httplib::Request& req, httplib::Response& res) {
            send(res, svc.submit_evaluation(req.body, req.get_header_value("X-Rater-Id")));
        });
        server.Get("/api/evaluations/aggregate", [&svc](const httplib::Request& req, httplib::Response& res) {
            send(res, svc.aggregate(param(req, "criterion"), param(req, "rule")));
        });
        server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
            send(res, error_reply(res.status, res.status == 404 ? "not_found" : "http_error",
                                  httplib::status_message(res.status)));
            return httplib::Server::HandlerResponse::Handled;
        });
        server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            try {
                std::rethrow_exception(ep);
            } catch (const Error& e) {
                send(res, error_reply(e));
            } catch (const std::exception& e) {
                send(res, error_reply(500, "internal", e.what()));
            }
        });
        if (!service->options().ui_dir.empty()) server.set_mount_point("/", service->options().ui_dir);
    }
};

ApiServer::ApiServer(std::shared_ptr<SessionService> service) : impl_(std::make_unique<Impl>()) {
    impl_->service = std::move(service);
    impl_->routes();
}

ApiServer::~ApiServer() {
    stop();
    if (impl_->reaper.joinable()) impl_->reaper.join();
}

int ApiServer::bind() {
    const auto& opts = impl_->service->options();
    if (opts.port == 0) {
        impl_->port = impl_->server.bind_to_any_port(opts.host);
    } else if (impl_->server.bind_to_port(opts.host, opts.port)) {
        impl_->port = opts.port;
    } else {
        impl_->port = -1;
    }
    if (impl_->port < 0) {
        throw Error(ErrorCode::IoFailure, "cannot bind " + opts.host + ":" + std::to_string(opts.port));
    }
    return impl_->port;
}

void ApiServer::run() {
    impl_->reaper = std::thread([impl = impl_.get()] {
        std::unique_lock lock(impl->stop_mutex);
        while (!impl->stopping) {
            impl->stop_cv.wait_for(lock, impl->service->options().reap_interval);
            if (impl->stopping) break;
            lock.unlock();
            impl->service->reap_idle(std::chrono::steady_clock::now());
            lock.lock();
        }
    });
    impl_->server.listen_after_bind();
}

void ApiServer::stop() {
    {
        std::lock_guard lock(impl_->stop_mutex);
        impl_->stopping = true;
    }
    impl_->stop_cv.notify_all();
    impl_->server.stop();
}

}  // namespace misim
