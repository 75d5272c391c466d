#include "misim/http.hpp"

#include "httplib.h"

#include <regex>

namespace misim {

namespace {

struct UrlParts {
    std::string origin;  // scheme://host[:port]
    std::string path;
};

UrlParts split_url(const std::string& url) {
    static const std::regex pattern(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, pattern)) {
        throw TransportError({false, "unsupported URL: " + url});
    }
    return {m[1].str(), m[2].matched ? m[2].str() : std::string("/")};
}

class HttplibTransport final : public HttpTransport {
public:
    HttpResponse post_json(const std::string& url, const HttpHeaders& headers, const std::string& body,
                           std::chrono::milliseconds timeout) override {
        const auto parts = split_url(url);
        httplib::Client client(parts.origin);
        const auto seconds = std::chrono::duration_cast<std::chrono::seconds>(timeout);
        const auto micros = std::chrono::duration_cast<std::chrono::microseconds>(timeout - seconds);
        client.set_connection_timeout(seconds.count(), micros.count());
        client.set_read_timeout(seconds.count(), micros.count());
        client.set_write_timeout(seconds.count(), micros.count());

        httplib::Headers hdrs;
        for (const auto& [k, v] : headers) hdrs.emplace(k, v);

        auto result = client.Post(parts.path, hdrs, body, "application/json");
        if (!result) {
            const auto err = result.error();
            TransportFailure failure;
            failure.timed_out = err == httplib::Error::Read || err == httplib::Error::Write ||
                                err == httplib::Error::ConnectionTimeout;
            failure.detail = "transport error: " + httplib::to_string(err);
            throw TransportError(std::move(failure));
        }
        return {result->status, result->body};
    }
};

}  // namespace

std::shared_ptr<HttpTransport> make_http_transport() {
    return std::make_shared<HttplibTransport>();
}

}  // namespace misim
