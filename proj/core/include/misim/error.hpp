#pragma once

#include <stdexcept>
#include <string>

namespace misim {

// Machine-readable failure kinds. The string form (error_code_name) is what
// the CLI prints and what HTTP error bodies carry in `code`.
enum class ErrorCode {
    InvalidArgument,
    UnknownLabel,
    NoQuestions,
    EmptyCounts,
    MissingColumn,
    MalformedRow,
    ClassifierUnavailable,
    EmptyTrainingSet,
    LabelContextUnavailable,
    FoldTooSmall,
    BackendTimeout,
    BackendRejected,
    RetriesExhausted,
    UnparsableScore,
    UnscoredPost,
    InsufficientCategory,
    IoFailure,
    SchemaViolation,
    EmptyCorpus,
    InsufficientSupply,
    NoRatings,
    MissingItems,
    DegenerateSamples,
    WrongPhase,
    SessionClosed,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

// Row-level parse failure; `line` is 1-based and counts physical lines.
class MalformedRow : public Error {
public:
    MalformedRow(std::size_t line, const std::string& detail)
        : Error(ErrorCode::MalformedRow, "malformed row at line " + std::to_string(line) + ": " + detail),
          line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class SchemaViolation : public Error {
public:
    SchemaViolation(std::size_t line, const std::string& detail)
        : Error(ErrorCode::SchemaViolation, "schema violation at line " + std::to_string(line) + ": " + detail),
          line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

// A non-retryable (or final) HTTP status from a backend. The body is kept for
// diagnostics and is scrubbed of credentials before it gets here.
class BackendRejected : public Error {
public:
    BackendRejected(int status, std::string body)
        : Error(ErrorCode::BackendRejected, "backend rejected request with status " + std::to_string(status)),
          status_(status), body_(std::move(body)) {}
    int status() const noexcept { return status_; }
    const std::string& body() const noexcept { return body_; }

private:
    int status_;
    std::string body_;
};

// Status 0 means the last attempt failed without an HTTP response (timeout or
// connection failure).
class RetriesExhausted : public Error {
public:
    RetriesExhausted(int attempts, int last_status)
        : Error(ErrorCode::RetriesExhausted,
                "gave up after " + std::to_string(attempts) + " attempts (last status " +
                    std::to_string(last_status) + ")"),
          attempts_(attempts), last_status_(last_status) {}
    int attempts() const noexcept { return attempts_; }
    int last_status() const noexcept { return last_status_; }

private:
    int attempts_;
    int last_status_;
};

class InsufficientCategory : public Error {
public:
    InsufficientCategory(std::string category, std::size_t available, std::size_t requested)
        : Error(ErrorCode::InsufficientCategory,
                "category " + category + " has " + std::to_string(available) + " eligible items, " +
                    std::to_string(requested) + " requested"),
          category_(std::move(category)), available_(available), requested_(requested) {}
    const std::string& category() const noexcept { return category_; }
    std::size_t available() const noexcept { return available_; }
    std::size_t requested() const noexcept { return requested_; }

private:
    std::string category_;
    std::size_t available_;
    std::size_t requested_;
};

}  // namespace misim
