#include "misim/gateway.hpp"

#include "misim/error.hpp"
#include "misim/util.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <thread>

namespace misim {

using nlohmann::json;

std::string_view role_name(Role role) noexcept {
    switch (role) {
        case Role::System: return "system";
        case Role::User: return "user";
        case Role::Assistant: return "assistant";
    }
    return "user";
}

Role parse_role(std::string_view text) {
    if (text == "system") return Role::System;
    if (text == "user") return Role::User;
    if (text == "assistant") return Role::Assistant;
    throw Error(ErrorCode::InvalidArgument, "unknown chat role '" + std::string(text) + "'");
}

void ChatRequest::validate() const {
    if (messages.empty()) throw Error(ErrorCode::InvalidArgument, "chat request has no messages");
    for (const auto& m : messages) {
        if (m.content.empty()) throw Error(ErrorCode::InvalidArgument, "chat message content is empty");
    }
    if (!(temperature >= 0.0)) throw Error(ErrorCode::InvalidArgument, "temperature must be >= 0");
    if (max_output_tokens <= 0) throw Error(ErrorCode::InvalidArgument, "max_output_tokens must be positive");
}

std::string chat_request_body(const ChatRequest& request) {
    json messages = json::array();
    for (const auto& m : request.messages) {
        messages.push_back({{"role", role_name(m.role)}, {"content", m.content}});
    }
    json body = {{"model", request.model_id},
                 {"messages", std::move(messages)},
                 {"temperature", request.temperature},
                 {"max_tokens", request.max_output_tokens}};
    return body.dump(-1, ' ', false, json::error_handler_t::replace);
}

std::string request_digest(const ChatRequest& request) {
    return sha256_hex(chat_request_body(request));
}

void BackendConfig::validate() const {
    if (max_retries < 0) throw Error(ErrorCode::InvalidArgument, "max_retries must be >= 0");
    if (min_interval.count() < 0) throw Error(ErrorCode::InvalidArgument, "min_interval must be >= 0");
    if (timeout.count() <= 0) throw Error(ErrorCode::InvalidArgument, "timeout must be positive");
    if (initial_backoff.count() < 0 || max_backoff.count() < 0) {
        throw Error(ErrorCode::InvalidArgument, "backoff delays must be >= 0");
    }
    if (backoff_multiplier < 1.0) throw Error(ErrorCode::InvalidArgument, "backoff_multiplier must be >= 1");
    if (max_in_flight < 1) throw Error(ErrorCode::InvalidArgument, "max_in_flight must be >= 1");
}

namespace {

std::string env_or_empty(const std::string& name) {
    const char* value = std::getenv(name.c_str());
    return value ? std::string(value) : std::string();
}

std::string first_nonempty_line(const std::filesystem::path& path) {
    for (const auto& line : read_nonempty_lines(path)) {
        auto text = trim(line.text);
        if (!text.empty()) return text;
    }
    return {};
}

}  // namespace

BackendConfig BackendConfig::from_env(std::string_view prefix, const std::filesystem::path& credentials_file) {
    const std::string p(prefix);
    BackendConfig config;
    config.base_url = env_or_empty(p + "_BASE_URL");
    config.model_id = env_or_empty(p + "_MODEL");
    config.api_key = env_or_empty(p + "_API_KEY");
    if (config.api_key.empty()) {
        std::filesystem::path key_file = env_or_empty(p + "_API_KEY_FILE");
        if (key_file.empty()) key_file = credentials_file;
        if (!key_file.empty()) config.api_key = first_nonempty_line(key_file);
    }
    return config;
}

std::string BackendConfig::describe() const {
    json d = {{"base_url", base_url},
              {"model", model_id},
              {"api_key_set", !api_key.empty()},
              {"timeout_ms", timeout.count()},
              {"max_retries", max_retries},
              {"min_interval_ms", min_interval.count()},
              {"max_in_flight", max_in_flight}};
    return d.dump();
}

std::string ChatBackend::complete(const ChatRequest& request, CallTrace* trace) {
    request.validate();
    return do_complete(request, trace);
}

std::chrono::milliseconds backoff_delay(const BackendConfig& config, int retry) {
    const double base = static_cast<double>(config.initial_backoff.count());
    const double raw = base * std::pow(config.backoff_multiplier, std::max(0, retry - 1));
    const double capped = std::min(raw, static_cast<double>(config.max_backoff.count()));
    return std::chrono::milliseconds(static_cast<std::int64_t>(capped));
}

bool is_transient_status(int status) noexcept {
    return status == 429 || (status >= 500 && status <= 599);
}

Gateway::Gateway(BackendConfig config, std::shared_ptr<HttpTransport> transport, Sleeper sleeper)
    : config_(std::move(config)), transport_(std::move(transport)), sleeper_(std::move(sleeper)) {
    config_.validate();
    if (config_.base_url.empty()) throw Error(ErrorCode::InvalidArgument, "backend base_url is not set");
    if (!transport_) transport_ = make_http_transport();
    if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

void Gateway::acquire_rate_token() {
    if (config_.min_interval.count() == 0) return;
    std::chrono::steady_clock::duration wait{};
    {
        std::lock_guard lock(rate_mutex_);
        const auto now = std::chrono::steady_clock::now();
        const auto slot = std::max(now, next_slot_);
        wait = slot - now;
        next_slot_ = slot + config_.min_interval;
    }
    if (wait.count() > 0) sleeper_(std::chrono::ceil<std::chrono::milliseconds>(wait));
}

std::string Gateway::scrub(std::string text) const {
    if (!config_.api_key.empty()) replace_all(text, config_.api_key, "***");
    return text;
}

std::string Gateway::do_complete(const ChatRequest& request, CallTrace* trace) {
    ChatRequest effective = request;
    if (effective.model_id.empty()) effective.model_id = config_.model_id;
    const std::string body = chat_request_body(effective);
    std::string url = config_.base_url;
    while (!url.empty() && url.back() == '/') url.pop_back();
    url += "/chat/completions";

    HttpHeaders headers;
    if (!config_.api_key.empty()) headers.emplace_back("Authorization", "Bearer " + config_.api_key);

    {
        std::unique_lock lock(flight_mutex_);
        flight_cv_.wait(lock, [&] { return in_flight_ < config_.max_in_flight; });
        ++in_flight_;
    }
    struct Release {
        Gateway* self;
        ~Release() {
            {
                std::lock_guard lock(self->flight_mutex_);
                --self->in_flight_;
            }
            self->flight_cv_.notify_one();
        }
    } release{this};

    CallTrace local;
    CallTrace& t = trace ? *trace : local;
    t = CallTrace{};

    int last_status = 0;
    bool last_timed_out = false;
    for (int attempt = 1; attempt <= config_.max_retries + 1; ++attempt) {
        if (attempt > 1) {
            const auto delay = backoff_delay(config_, attempt - 1);
            t.delays.push_back(delay);
            sleeper_(delay);
        }
        acquire_rate_token();
        ++t.attempts;
        try {
            const auto response = transport_->post_json(url, headers, body, config_.timeout);
            last_status = response.status;
            last_timed_out = false;
            t.statuses.push_back(response.status);
            if (response.status >= 200 && response.status < 300) {
                try {
                    const auto reply = json::parse(response.body);
                    return reply.at("choices").at(0).at("message").at("content").get<std::string>();
                } catch (const json::exception&) {
                    throw BackendRejected(response.status, scrub(response.body));
                }
            }
            if (!is_transient_status(response.status)) {
                throw BackendRejected(response.status, scrub(response.body));
            }
        } catch (const TransportError& e) {
            last_status = 0;
            last_timed_out = e.failure().timed_out;
            t.statuses.push_back(0);
        }
    }
    if (last_timed_out && config_.max_retries == 0) {
        throw Error(ErrorCode::BackendTimeout, "backend request timed out");
    }
    throw RetriesExhausted(t.attempts, last_status);
}

std::string chat_complete(const ChatRequest& request, const BackendConfig& config,
                          std::shared_ptr<HttpTransport> transport) {
    Gateway gateway(config, std::move(transport));
    return gateway.complete(request);
}

void ScriptedChatBackend::add_digest(std::string digest, std::string response) {
    std::lock_guard lock(mutex_);
    by_digest_[std::move(digest)] = std::move(response);
}

void ScriptedChatBackend::add_rule(std::string needle, std::string response) {
    std::lock_guard lock(mutex_);
    rules_.emplace_back(std::move(needle), std::move(response));
}

void ScriptedChatBackend::enqueue(std::string response) {
    std::lock_guard lock(mutex_);
    queue_.push_back(std::move(response));
}

void ScriptedChatBackend::add_fallback(std::string response) {
    std::lock_guard lock(mutex_);
    fallback_.push_back(std::move(response));
}

std::shared_ptr<ScriptedChatBackend> ScriptedChatBackend::load(const std::filesystem::path& path) {
    auto backend = std::make_shared<ScriptedChatBackend>();
    for (const auto& line : read_nonempty_lines(path)) {
        json record;
        try {
            record = json::parse(line.text);
        } catch (const json::exception& e) {
            throw SchemaViolation(line.number, e.what());
        }
        if (!record.is_object()) throw SchemaViolation(line.number, "fixture line is not an object");
        try {
            if (record.contains("digest")) {
                backend->add_digest(record.at("digest").get<std::string>(), record.at("response").get<std::string>());
            } else if (record.contains("match")) {
                backend->add_rule(record.at("match").get<std::string>(), record.at("response").get<std::string>());
            } else if (record.contains("queue")) {
                backend->enqueue(record.at("queue").get<std::string>());
            } else if (record.contains("fallback")) {
                backend->add_fallback(record.at("fallback").get<std::string>());
            } else {
                throw SchemaViolation(line.number, "expected digest, match, queue or fallback");
            }
        } catch (const json::exception& e) {
            throw SchemaViolation(line.number, e.what());
        }
    }
    return backend;
}

std::size_t ScriptedChatBackend::calls() const {
    std::lock_guard lock(mutex_);
    return seen_.size();
}

std::vector<ChatRequest> ScriptedChatBackend::requests() const {
    std::lock_guard lock(mutex_);
    return seen_;
}

std::string ScriptedChatBackend::do_complete(const ChatRequest& request, CallTrace* trace) {
    const std::string digest = request_digest(request);
    std::lock_guard lock(mutex_);
    seen_.push_back(request);
    if (trace) {
        *trace = CallTrace{};
        trace->attempts = 1;
        trace->statuses.push_back(200);
    }
    if (auto it = by_digest_.find(digest); it != by_digest_.end()) return it->second;
    if (!rules_.empty()) {
        std::string haystack;
        for (const auto& m : request.messages) {
            haystack += m.content;
            haystack.push_back('\n');
        }
        for (const auto& [needle, response] : rules_) {
            if (haystack.find(needle) != std::string::npos) return response;
        }
    }
    if (!queue_.empty()) {
        std::string response = std::move(queue_.front());
        queue_.pop_front();
        return response;
    }
    if (!fallback_.empty()) return fallback_[fnv1a64(digest) % fallback_.size()];
    if (trace) trace->statuses.back() = 404;
    throw BackendRejected(404, "no scripted response for request " + digest);
}

std::string Translator::translate(std::string_view text, const LanguagePair& direction) {
    if (text.empty()) throw Error(ErrorCode::InvalidArgument, "cannot translate empty text");
    return do_translate(text, direction);
}

std::shared_ptr<TableTranslator> TableTranslator::load(const std::filesystem::path& path) {
    std::map<std::string, std::string> table;
    try {
        const auto doc = json::parse(read_file(path));
        for (const auto& [k, v] : doc.items()) table[k] = v.get<std::string>();
    } catch (const json::exception& e) {
        throw SchemaViolation(1, e.what());
    }
    return std::make_shared<TableTranslator>(std::move(table));
}

std::string TableTranslator::do_translate(std::string_view text, const LanguagePair&) {
    if (auto it = table_.find(std::string(text)); it != table_.end()) return it->second;
    return std::string(text);
}

ChatTranslator::ChatTranslator(std::shared_ptr<ChatBackend> backend, std::string model_id, double temperature,
                               int max_output_tokens)
    : backend_(std::move(backend)), model_id_(std::move(model_id)), temperature_(temperature),
      max_output_tokens_(max_output_tokens) {
    if (!backend_) throw Error(ErrorCode::InvalidArgument, "translator needs a chat backend");
}

ChatRequest ChatTranslator::build_request(std::string_view text, const LanguagePair& direction,
                                          const std::string& model_id, double temperature,
                                          int max_output_tokens) {
    ChatRequest request;
    request.model_id = model_id;
    request.temperature = temperature;
    request.max_output_tokens = max_output_tokens;
    request.messages.push_back(
        {Role::System, "Translate the user's text from " + direction.source + " to " + direction.target +
                           ". Keep speaker tags such as [Client] unchanged. Reply with the translation only."});
    request.messages.push_back({Role::User, std::string(text)});
    return request;
}

std::string ChatTranslator::do_translate(std::string_view text, const LanguagePair& direction) {
    if (direction.same()) return std::string(text);
    return trim(backend_->complete(build_request(text, direction, model_id_, temperature_, max_output_tokens_)));
}

}  // namespace misim
