#pragma once

#include "misim/context.hpp"
#include "misim/dataset.hpp"
#include "misim/forecaster.hpp"
#include "misim/gateway.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace misim {

enum class ChangeTalkType { Desire, Ability, Reasons, Need };

inline constexpr std::array<ChangeTalkType, 4> kDarnOrder = {ChangeTalkType::Desire, ChangeTalkType::Ability,
                                                             ChangeTalkType::Reasons, ChangeTalkType::Need};

std::string_view change_talk_name(ChangeTalkType type) noexcept;

struct LabelGuide {
    std::string definition;
    std::vector<std::string> examples;
};

struct ChangeTalkExample {
    ChangeTalkType type = ChangeTalkType::Desire;
    std::string text;
};

// Definitions and in-context examples for every prompt. Loaded from JSON:
// {"labels": {"<label id>": {"definition", "examples": [..]}},
//  "change_talk": {"definition", "examples": [{"type", "text"}]},
//  "instructions": {"therapist", "client"}, "constraints": {"therapist", "client"}}
struct ExampleBank {
    std::array<LabelGuide, kLabelCount> labels;
    std::string change_talk_definition;
    std::vector<ChangeTalkExample> change_talk;  // DARN order after validation
    std::string therapist_instruction;
    std::string therapist_constraints;
    std::string client_instruction;
    std::string client_constraints;

    const LabelGuide& guide(MiLabel label) const noexcept { return labels[index_of(label)]; }

    // Every label but Other needs a definition and >= 3 examples; change talk
    // needs exactly one example per DARN type. Sorts change talk into DARN
    // order. Throws InvalidArgument.
    void validate();

    static ExampleBank from_json_text(std::string_view text);
    static ExampleBank load(const std::filesystem::path& path);
};

// Prompt template files: therapist_<label id>.txt for all 8 labels plus
// client.txt, with placeholders {instruction} {constraints} {definition}
// {examples} {context} {history}, and {label} {end_marker} for therapists.
class PromptLibrary {
public:
    static PromptLibrary load(const std::filesystem::path& dir);

    const std::string& therapist(MiLabel label) const noexcept { return therapist_[index_of(label)]; }
    const std::string& client() const noexcept { return client_; }

private:
    std::array<std::string, kLabelCount> therapist_;
    std::string client_;
};

struct SimulationConfig {
    int window = 6;                 // forecaster history, in utterances
    int max_therapist_turns = 12;   // includes the opening question
    std::string end_marker = "[END_SESSION]";
    LanguagePair forecast_direction{"ko", "en"};  // translation skipped when equal
    std::string task_prefix{kDefaultTaskPrefix};
    std::string therapist_model;
    std::string client_model;
    double temperature = 0.7;
    int max_output_tokens = 256;
    std::uint64_t seed = 0;
    bool allow_unscored_context = false;

    void validate() const;
    std::string to_json() const;
    static SimulationConfig from_json_text(std::string_view text);
};

// Everything a session needs besides its own state. Shared read-only
// across sessions; backends and the translator must be thread-safe for
// concurrent batches.
struct SimulationRuntime {
    std::shared_ptr<const Predictor> forecaster;
    std::shared_ptr<Translator> translator;
    std::shared_ptr<ChatBackend> therapist_backend;
    std::shared_ptr<ChatBackend> client_backend;
    std::shared_ptr<const ExampleBank> bank;
    std::shared_ptr<const PromptLibrary> prompts;
    std::vector<std::string> opening_pool;

    void validate() const;
};

// One non-empty line per question; '#' comments ignored.
std::vector<std::string> load_opening_pool(const std::filesystem::path& path);

// Bank, templates and opening pool from an asset directory; backends and
// forecaster left for the caller.
SimulationRuntime load_runtime_assets(const std::filesystem::path& assets_dir = {});

enum class Phase { AwaitingClient, AwaitingTherapist, Closed };

std::string_view phase_name(Phase phase) noexcept;

struct TurnTrace {
    std::size_t turn_index = 0;
    Interlocutor speaker = Interlocutor::Therapist;
    std::vector<std::string> translated_history;
    std::string forecast_input;
    std::vector<MiLabel> ranking;
    std::optional<Decision> decision;
    std::string prompt_digest;
    std::string raw_generation;
    std::vector<std::string> notes;
};

struct SessionState {
    std::string id;
    ContextPost context;
    std::vector<Utterance> turns;
    Phase phase = Phase::AwaitingClient;
    SimulationConfig config;
    std::vector<TurnTrace> traces;
    bool turn_cap_reached = false;

    std::size_t therapist_turns() const noexcept;
    std::size_t client_turns() const noexcept;
    std::vector<MiLabel> therapist_labels() const;
};

// Opening OpenQuestion drawn from the pool with a stream derived from
// config.seed and the context id. Requires a score of 3 unless
// allow_unscored_context.
SessionState open_session(const ContextPost& context, const SimulationConfig& config,
                          const SimulationRuntime& runtime, std::string session_id = {});

// Each operation computes the whole turn before touching the session, so a
// thrown error leaves it unchanged. WrongPhase / SessionClosed on misuse.
void next_therapist_turn(SessionState& session, const SimulationRuntime& runtime);
void next_client_turn(SessionState& session, const SimulationRuntime& runtime);
// Human-typed client turn (interactive sessions).
void append_client_text(SessionState& session, std::string_view text);
// Closes the session early; a session awaiting the therapist gets no
// further turn, so callers wanting a therapist close should run one first.
void close_session(SessionState& session, std::string_view note);

// Forecaster input for the next therapist turn: last <= window utterances,
// labels inserted, texts already translated.
std::string forecast_input_for(const SessionState& session, std::span<const std::string> translated_texts);

std::string render_history(std::span<const Utterance> turns);
std::string render_therapist_prompt(const PromptLibrary& prompts, const ExampleBank& bank, MiLabel label,
                                    const SessionState& session);
std::string render_client_prompt(const PromptLibrary& prompts, const ExampleBank& bank,
                                 const SessionState& session);

// Loops client/therapist turns until the end marker or the turn cap.
SessionState run_session(const ContextPost& context, const SimulationConfig& config,
                         const SimulationRuntime& runtime);

using SessionCallback = std::function<void(std::size_t index, const SessionState& session)>;

// Runs contexts with up to `parallel` sessions in flight. Results are in
// input order; `on_done` is called under a lock as sessions finish.
std::vector<SessionState> run_batch(std::span<const ContextPost> contexts, const SimulationConfig& config,
                                    const SimulationRuntime& runtime, int parallel = 1,
                                    const SessionCallback& on_done = {});

Dialogue to_dialogue(const SessionState& session);

// Structural checks over a completed dialogue: therapist opens with an
// OpenQuestion, strict alternation, therapist - client = 1, therapist turns
// labeled, no label three times in a row, no three questions in a row.
// Returns the violations found (empty when valid).
std::vector<std::string> check_dialogue_invariants(const Dialogue& dialogue);

std::string serialize_trace(const SessionState& session);

}  // namespace misim
