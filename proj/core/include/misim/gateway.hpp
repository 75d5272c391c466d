#pragma once

#include "misim/http.hpp"

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace misim {

enum class Role { System, User, Assistant };

std::string_view role_name(Role role) noexcept;
Role parse_role(std::string_view text);

struct ChatMessage {
    Role role = Role::User;
    std::string content;

    bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
    std::vector<ChatMessage> messages;
    double temperature = 0.7;
    int max_output_tokens = 256;
    std::string model_id;

    // >= 1 message, no empty content, temperature >= 0, tokens > 0.
    void validate() const;
};

// Wire body sent to chat-completion endpoints:
// {"model","messages":[{"role","content"}],"temperature","max_tokens"}.
std::string chat_request_body(const ChatRequest& request);

// sha256 hex over the canonical request body; keys scripted fixtures.
std::string request_digest(const ChatRequest& request);

struct BackendConfig {
    std::string base_url;  // e.g. http://host:port/v1; "/chat/completions" is appended
    std::string api_key;   // never serialized; see describe()
    std::string model_id;
    std::chrono::milliseconds timeout{60'000};
    int max_retries = 3;
    std::chrono::milliseconds min_interval{0};  // token bucket refill period; 0 disables
    std::chrono::milliseconds initial_backoff{500};
    double backoff_multiplier = 2.0;
    std::chrono::milliseconds max_backoff{30'000};
    int max_in_flight = 8;

    void validate() const;

    // Reads <prefix>_BASE_URL, <prefix>_MODEL and the key from
    // <prefix>_API_KEY, else from the first non-empty line of the file named
    // by <prefix>_API_KEY_FILE or `credentials_file`.
    static BackendConfig from_env(std::string_view prefix, const std::filesystem::path& credentials_file = {});

    // Key-free description for manifests and logs.
    std::string describe() const;
};

inline constexpr std::string_view kLlmEnvPrefix = "MISIM_LLM";
inline constexpr std::string_view kTranslateEnvPrefix = "MISIM_TRANSLATE";

struct CallTrace {
    int attempts = 0;
    std::vector<int> statuses;  // per attempt; 0 = no HTTP response
    std::vector<std::chrono::milliseconds> delays;  // backoff before attempts 2..n
};

class ChatBackend {
public:
    virtual ~ChatBackend() = default;

    // Validates, then delegates. Returns the assistant text.
    std::string complete(const ChatRequest& request, CallTrace* trace = nullptr);

protected:
    virtual std::string do_complete(const ChatRequest& request, CallTrace* trace) = 0;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

// Delay before retry number `retry` (1-based): initial * multiplier^(retry-1),
// capped at max_backoff.
std::chrono::milliseconds backoff_delay(const BackendConfig& config, int retry);

bool is_transient_status(int status) noexcept;

// HTTP chat-completion client. Retries 429, 5xx and transport failures with
// exponential backoff; other non-2xx statuses raise BackendRejected at once.
// Exhausting retries raises RetriesExhausted with the last status, except
// that a lone timed-out attempt with max_retries == 0 raises BackendTimeout.
// Thread-safe.
class Gateway final : public ChatBackend {
public:
    Gateway(BackendConfig config, std::shared_ptr<HttpTransport> transport, Sleeper sleeper = {});

    const BackendConfig& config() const noexcept { return config_; }

protected:
    std::string do_complete(const ChatRequest& request, CallTrace* trace) override;

private:
    void acquire_rate_token();
    std::string scrub(std::string text) const;

    BackendConfig config_;
    std::shared_ptr<HttpTransport> transport_;
    Sleeper sleeper_;

    std::mutex rate_mutex_;
    std::chrono::steady_clock::time_point next_slot_{};

    std::mutex flight_mutex_;
    std::condition_variable flight_cv_;
    int in_flight_ = 0;
};

// One-shot convenience over a fresh Gateway.
std::string chat_complete(const ChatRequest& request, const BackendConfig& config,
                          std::shared_ptr<HttpTransport> transport = nullptr);

// Deterministic stand-in backend. Resolution order per request: exact digest
// entry, then the first substring rule matched against the concatenated
// message contents, then the FIFO queue, then the fallback pool entry chosen
// by digest. Nothing matching raises BackendRejected(404).
class ScriptedChatBackend final : public ChatBackend {
public:
    ScriptedChatBackend() = default;

    void add_digest(std::string digest, std::string response);
    void add_rule(std::string needle, std::string response);
    void enqueue(std::string response);
    void add_fallback(std::string response);

    // JSONL fixture; each line is one of
    // {"digest": d, "response": r}, {"match": s, "response": r},
    // {"queue": r}, {"fallback": r}.
    static std::shared_ptr<ScriptedChatBackend> load(const std::filesystem::path& path);

    std::size_t calls() const;
    std::vector<ChatRequest> requests() const;

protected:
    std::string do_complete(const ChatRequest& request, CallTrace* trace) override;

private:
    mutable std::mutex mutex_;
    std::map<std::string, std::string> by_digest_;
    std::vector<std::pair<std::string, std::string>> rules_;
    std::deque<std::string> queue_;
    std::vector<std::string> fallback_;
    std::vector<ChatRequest> seen_;
};

struct LanguagePair {
    std::string source = "ko";
    std::string target = "en";

    bool same() const noexcept { return source == target; }
};

class Translator {
public:
    virtual ~Translator() = default;

    // Empty text raises InvalidArgument.
    std::string translate(std::string_view text, const LanguagePair& direction);

protected:
    virtual std::string do_translate(std::string_view text, const LanguagePair& direction) = 0;
};

class IdentityTranslator final : public Translator {
protected:
    std::string do_translate(std::string_view text, const LanguagePair&) override { return std::string(text); }
};

// Exact-match lookup; unknown text passes through unchanged.
class TableTranslator final : public Translator {
public:
    explicit TableTranslator(std::map<std::string, std::string> table) : table_(std::move(table)) {}
    // JSON object {"source text": "translation", ...}.
    static std::shared_ptr<TableTranslator> load(const std::filesystem::path& path);

protected:
    std::string do_translate(std::string_view text, const LanguagePair& direction) override;

private:
    std::map<std::string, std::string> table_;
};

// Translation through a chat backend with a fixed instruction wrapper.
class ChatTranslator final : public Translator {
public:
    ChatTranslator(std::shared_ptr<ChatBackend> backend, std::string model_id, double temperature = 0.0,
                   int max_output_tokens = 1024);

    static ChatRequest build_request(std::string_view text, const LanguagePair& direction,
                                     const std::string& model_id, double temperature, int max_output_tokens);

protected:
    std::string do_translate(std::string_view text, const LanguagePair& direction) override;

private:
    std::shared_ptr<ChatBackend> backend_;
    std::string model_id_;
    double temperature_;
    int max_output_tokens_;
};

}  // namespace misim
