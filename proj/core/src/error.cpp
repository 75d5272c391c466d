#include "misim/error.hpp"

namespace misim {

const char* error_code_name(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::InvalidArgument: return "invalid_argument";
        case ErrorCode::UnknownLabel: return "unknown_label";
        case ErrorCode::NoQuestions: return "no_questions";
        case ErrorCode::EmptyCounts: return "empty_counts";
        case ErrorCode::MissingColumn: return "missing_column";
        case ErrorCode::MalformedRow: return "malformed_row";
        case ErrorCode::ClassifierUnavailable: return "classifier_unavailable";
        case ErrorCode::EmptyTrainingSet: return "empty_training_set";
        case ErrorCode::LabelContextUnavailable: return "label_context_unavailable";
        case ErrorCode::FoldTooSmall: return "fold_too_small";
        case ErrorCode::BackendTimeout: return "backend_timeout";
        case ErrorCode::BackendRejected: return "backend_rejected";
        case ErrorCode::RetriesExhausted: return "retries_exhausted";
        case ErrorCode::UnparsableScore: return "unparsable_score";
        case ErrorCode::UnscoredPost: return "unscored_post";
        case ErrorCode::InsufficientCategory: return "insufficient_category";
        case ErrorCode::IoFailure: return "io_failure";
        case ErrorCode::SchemaViolation: return "schema_violation";
        case ErrorCode::EmptyCorpus: return "empty_corpus";
        case ErrorCode::InsufficientSupply: return "insufficient_supply";
        case ErrorCode::NoRatings: return "no_ratings";
        case ErrorCode::MissingItems: return "missing_items";
        case ErrorCode::DegenerateSamples: return "degenerate_samples";
        case ErrorCode::WrongPhase: return "wrong_phase";
        case ErrorCode::SessionClosed: return "session_closed";
    }
    return "unknown";
}

}  // namespace misim
