#pragma once

#include <chrono>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace misim {

struct HttpResponse {
    int status = 0;
    std::string body;
};

using HttpHeaders = std::vector<std::pair<std::string, std::string>>;

// Thrown by transports when no HTTP response was obtained (DNS, connect,
// read timeout). Retry policy treats it as transient.
struct TransportFailure {
    bool timed_out = false;
    std::string detail;
};

class TransportError : public std::exception {
public:
    explicit TransportError(TransportFailure failure) : failure_(std::move(failure)) {}
    const char* what() const noexcept override { return failure_.detail.c_str(); }
    const TransportFailure& failure() const noexcept { return failure_; }

private:
    TransportFailure failure_;
};

class HttpTransport {
public:
    virtual ~HttpTransport() = default;
    // POST `body` (JSON) to `url`; returns whatever status the server sent.
    virtual HttpResponse post_json(const std::string& url, const HttpHeaders& headers,
                                   const std::string& body, std::chrono::milliseconds timeout) = 0;
};

// cpp-httplib backed transport; supports http:// and https:// URLs.
std::shared_ptr<HttpTransport> make_http_transport();

}  // namespace misim
