#pragma once

#include "misim/http.hpp"
#include "misim/taxonomy.hpp"

#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace misim {

enum class Interlocutor { Therapist, Client };

std::string_view interlocutor_name(Interlocutor who) noexcept;

enum class SessionQuality { High, Low };

struct TranscriptTurn {
    Interlocutor speaker = Interlocutor::Client;
    std::string text;
    // Raw behavior code as read from the corpus (therapist turns only).
    std::string source_behavior;
    // Set by preprocess() on every therapist turn; never set on client turns.
    std::optional<MiLabel> behavior;
};

struct Transcript {
    std::string id;
    SessionQuality quality = SessionQuality::Low;
    std::vector<TranscriptTurn> turns;
};

// AnnoMI reader. Required columns (case-sensitive header names):
// transcript_id, mi_quality, interlocutor, utterance_text,
// main_therapist_behaviour. Delimiter is sniffed from the header (comma or
// tab). When the full-release subtype columns are present, coarse codes are
// refined ("reflection" + "simple" -> "reflection_simple"), and rows repeated
// for additional annotators are dropped by (transcript_id, utterance_id).
std::vector<Transcript> load_annomi(const std::filesystem::path& path);
std::vector<Transcript> parse_annomi(std::string_view content);

// The six AnnoMI codes with a one-to-one MiLabel; nullopt for anything else.
std::optional<MiLabel> annomi_label(std::string_view source_behavior) noexcept;

class AffirmClassifier {
public:
    virtual ~AffirmClassifier() = default;
    virtual bool is_affirm(std::string_view utterance) const = 0;
};

// Fallback used when no external classifier is configured: a turn is Affirm
// iff it contains one of the cue phrases (case-insensitive substring match).
// This is a weak stand-in; conversion counts do not depend on it.
class LexiconAffirmClassifier final : public AffirmClassifier {
public:
    LexiconAffirmClassifier();
    explicit LexiconAffirmClassifier(std::vector<std::string> cues);
    // One cue per line; blank lines and '#' comments ignored.
    static LexiconAffirmClassifier load(const std::filesystem::path& path);

    bool is_affirm(std::string_view utterance) const override;
    const std::vector<std::string>& cues() const noexcept { return cues_; }

    static std::vector<std::string> default_cues();

private:
    std::vector<std::string> cues_;
};

// External classifier: POST {"text": ...} -> {"label": "..."} or
// {"is_affirm": bool}. Any transport failure or non-2xx status raises
// ClassifierUnavailable.
class HttpAffirmClassifier final : public AffirmClassifier {
public:
    HttpAffirmClassifier(std::string url, std::shared_ptr<HttpTransport> transport,
                         std::chrono::milliseconds timeout = std::chrono::seconds(30));
    bool is_affirm(std::string_view utterance) const override;

private:
    std::string url_;
    std::shared_ptr<HttpTransport> transport_;
    std::chrono::milliseconds timeout_;
};

// Keeps high-quality transcripts, maps the six one-to-one codes, sends the
// remaining therapist turns through `classifier` (Affirm or Other) and
// clears client behaviors. A null classifier selects the lexicon fallback.
std::vector<Transcript> preprocess(std::vector<Transcript> transcripts,
                                   const AffirmClassifier* classifier = nullptr);

inline constexpr std::string_view kDefaultTaskPrefix = "Predict the next therapist's dialogue act:";

using TokenCounter = std::function<std::size_t(std::string_view)>;

std::size_t whitespace_token_count(std::string_view text) noexcept;

struct ConversionConfig {
    int window = 6;
    bool insert_labels = true;
    std::string task_prefix{kDefaultTaskPrefix};
    std::size_t max_tokens = 512;
    TokenCounter token_counter = whitespace_token_count;

    void validate() const;
};

struct ForecastExample {
    std::string input;
    std::string target;
    // Provenance for fold grouping; serialized when set.
    std::string transcript_id;
    std::size_t turn_index = 0;
};

// One rendered history element.
struct HistoryItem {
    Interlocutor speaker = Interlocutor::Client;
    std::string_view text;
    std::optional<MiLabel> label;
};

// "[Therapist]", "[Therapist: Open Question]" or "[Client]".
std::string speaker_tag(Interlocutor speaker, std::optional<MiLabel> label, bool insert_labels);
std::string target_token(MiLabel label);
// Inverse of target_token; throws UnknownLabel on anything else.
MiLabel parse_target(std::string_view target);

// prefix + " " + tagged utterances joined by single spaces.
std::string render_forecast_input(std::string_view task_prefix, std::span<const HistoryItem> history,
                                  bool insert_labels);

// Therapist labels found in inserted "[Therapist: <Label>]" tags, in order.
std::vector<MiLabel> extract_therapist_labels(std::string_view input);
// True when the input carries a bare "[Therapist]" tag (labels not inserted).
bool has_bare_therapist_tag(std::string_view input) noexcept;

// One example per therapist turn with at least `window` preceding
// utterances in the same transcript. Output order: transcript order, then
// turn index.
std::vector<ForecastExample> convert(std::span<const Transcript> transcripts, const ConversionConfig& config);

// Drops whole utterances from the oldest end until the token count fits,
// then trims characters from the front of the last remaining utterance.
// The task prefix is always kept; if it alone exceeds the budget it is
// returned verbatim.
std::string truncate_left(std::string_view input, std::size_t max_tokens, const TokenCounter& counter,
                          std::string_view task_prefix = kDefaultTaskPrefix);

// Newline-delimited {"input", "target", "transcript_id"?, "turn_index"?} records.
std::string serialize_forecast_examples(std::span<const ForecastExample> examples);
void write_forecast_examples(const std::filesystem::path& path, std::span<const ForecastExample> examples);
std::vector<ForecastExample> read_forecast_examples(const std::filesystem::path& path);

}  // namespace misim
