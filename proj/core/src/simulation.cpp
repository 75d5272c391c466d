#include "misim/simulation.hpp"

#include "misim/error.hpp"
#include "misim/util.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

namespace misim {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view change_talk_name(ChangeTalkType type) noexcept {
    switch (type) {
        case ChangeTalkType::Desire: return "desire";
        case ChangeTalkType::Ability: return "ability";
        case ChangeTalkType::Reasons: return "reasons";
        case ChangeTalkType::Need: return "need";
    }
    return "desire";
}

namespace {

ChangeTalkType parse_change_talk(const std::string& text) {
    const std::string t = to_lower_ascii(trim(text));
    if (t == "desire") return ChangeTalkType::Desire;
    if (t == "ability") return ChangeTalkType::Ability;
    if (t == "reasons" || t == "reason") return ChangeTalkType::Reasons;
    if (t == "need") return ChangeTalkType::Need;
    throw Error(ErrorCode::InvalidArgument, "unknown change talk type '" + text + "'");
}

std::string display_case(std::string_view name) {
    std::string out(name);
    if (!out.empty()) out[0] = static_cast<char>(out[0] - 'a' + 'A');
    return out;
}

}  // namespace

void ExampleBank::validate() {
    for (MiLabel label : kAllLabels) {
        if (label == MiLabel::Other) continue;
        const auto& g = guide(label);
        if (trim(g.definition).empty()) {
            throw Error(ErrorCode::InvalidArgument,
                        "example bank lacks a definition for " + std::string(machine_id(label)));
        }
        if (g.examples.size() < 3) {
            throw Error(ErrorCode::InvalidArgument,
                        "example bank needs >= 3 examples for " + std::string(machine_id(label)));
        }
    }
    if (change_talk.size() != kDarnOrder.size()) {
        throw Error(ErrorCode::InvalidArgument, "change talk needs exactly 4 examples");
    }
    std::array<int, 4> seen{};
    for (const auto& ex : change_talk) ++seen[static_cast<std::size_t>(ex.type)];
    if (std::any_of(seen.begin(), seen.end(), [](int n) { return n != 1; })) {
        throw Error(ErrorCode::InvalidArgument, "change talk needs one example per desire/ability/reasons/need");
    }
    std::sort(change_talk.begin(), change_talk.end(),
              [](const auto& a, const auto& b) { return a.type < b.type; });
}

ExampleBank ExampleBank::from_json_text(std::string_view text) {
    ExampleBank bank;
    try {
        const auto doc = json::parse(text);
        for (const auto& [key, value] : doc.at("labels").items()) {
            auto& g = bank.labels[index_of(parse_label(key))];
            g.definition = value.value("definition", std::string());
            if (value.contains("examples")) g.examples = value.at("examples").get<std::vector<std::string>>();
        }
        const auto& ct = doc.at("change_talk");
        bank.change_talk_definition = ct.at("definition").get<std::string>();
        for (const auto& ex : ct.at("examples")) {
            bank.change_talk.push_back({parse_change_talk(ex.at("type").get<std::string>()),
                                        ex.at("text").get<std::string>()});
        }
        if (doc.contains("instructions")) {
            bank.therapist_instruction = doc["instructions"].value("therapist", std::string());
            bank.client_instruction = doc["instructions"].value("client", std::string());
        }
        if (doc.contains("constraints")) {
            bank.therapist_constraints = doc["constraints"].value("therapist", std::string());
            bank.client_constraints = doc["constraints"].value("client", std::string());
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, std::string("bad example bank: ") + e.what());
    }
    bank.validate();
    return bank;
}

ExampleBank ExampleBank::load(const std::filesystem::path& path) { return from_json_text(read_file(path)); }

PromptLibrary PromptLibrary::load(const std::filesystem::path& dir) {
    PromptLibrary lib;
    for (MiLabel label : kAllLabels) {
        const auto path = dir / ("therapist_" + std::string(machine_id(label)) + ".txt");
        lib.therapist_[index_of(label)] = read_file(path);
        if (lib.therapist_[index_of(label)].find("{history}") == std::string::npos) {
            throw Error(ErrorCode::InvalidArgument, path.string() + " has no {history} placeholder");
        }
    }
    lib.client_ = read_file(dir / "client.txt");
    if (lib.client_.find("{history}") == std::string::npos || lib.client_.find("{context}") == std::string::npos) {
        throw Error(ErrorCode::InvalidArgument, "client.txt needs {context} and {history} placeholders");
    }
    return lib;
}

void SimulationConfig::validate() const {
    if (window < 1) throw Error(ErrorCode::InvalidArgument, "window must be >= 1");
    if (max_therapist_turns < 1) throw Error(ErrorCode::InvalidArgument, "max_therapist_turns must be >= 1");
    if (end_marker.empty()) throw Error(ErrorCode::InvalidArgument, "end marker must be non-empty");
    if (!(temperature >= 0.0)) throw Error(ErrorCode::InvalidArgument, "temperature must be >= 0");
    if (max_output_tokens < 1) throw Error(ErrorCode::InvalidArgument, "max_output_tokens must be >= 1");
}

std::string SimulationConfig::to_json() const {
    ordered_json j;
    j["window"] = window;
    j["max_therapist_turns"] = max_therapist_turns;
    j["end_marker"] = end_marker;
    j["source_language"] = forecast_direction.source;
    j["forecast_language"] = forecast_direction.target;
    j["task_prefix"] = task_prefix;
    j["therapist_model"] = therapist_model;
    j["client_model"] = client_model;
    j["temperature"] = temperature;
    j["max_output_tokens"] = max_output_tokens;
    j["seed"] = seed;
    j["allow_unscored_context"] = allow_unscored_context;
    return j.dump();
}

SimulationConfig SimulationConfig::from_json_text(std::string_view text) {
    SimulationConfig c;
    try {
        const auto j = json::parse(text);
        c.window = j.value("window", c.window);
        c.max_therapist_turns = j.value("max_therapist_turns", c.max_therapist_turns);
        c.end_marker = j.value("end_marker", c.end_marker);
        c.forecast_direction.source = j.value("source_language", c.forecast_direction.source);
        c.forecast_direction.target = j.value("forecast_language", c.forecast_direction.target);
        c.task_prefix = j.value("task_prefix", c.task_prefix);
        c.therapist_model = j.value("therapist_model", c.therapist_model);
        c.client_model = j.value("client_model", c.client_model);
        c.temperature = j.value("temperature", c.temperature);
        c.max_output_tokens = j.value("max_output_tokens", c.max_output_tokens);
        c.seed = j.value("seed", c.seed);
        c.allow_unscored_context = j.value("allow_unscored_context", c.allow_unscored_context);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, std::string("bad simulation config: ") + e.what());
    }
    c.validate();
    return c;
}

void SimulationRuntime::validate() const {
    if (!forecaster) throw Error(ErrorCode::InvalidArgument, "simulation needs a forecaster");
    if (!translator) throw Error(ErrorCode::InvalidArgument, "simulation needs a translator");
    if (!therapist_backend || !client_backend) throw Error(ErrorCode::InvalidArgument, "simulation needs backends");
    if (!bank || !prompts) throw Error(ErrorCode::InvalidArgument, "simulation needs an example bank and templates");
    if (opening_pool.empty()) throw Error(ErrorCode::InvalidArgument, "opening question pool is empty");
}

std::vector<std::string> load_opening_pool(const std::filesystem::path& path) {
    std::vector<std::string> pool;
    for (const auto& line : read_nonempty_lines(path)) {
        auto text = trim(line.text);
        if (text.empty() || text.front() == '#') continue;
        pool.push_back(std::move(text));
    }
    if (pool.empty()) throw Error(ErrorCode::InvalidArgument, path.string() + " has no opening questions");
    return pool;
}

SimulationRuntime load_runtime_assets(const std::filesystem::path& assets_dir) {
    const auto root = resolve_assets_dir(assets_dir);
    SimulationRuntime rt;
    rt.bank = std::make_shared<const ExampleBank>(ExampleBank::load(root / "example_bank.json"));
    rt.prompts = std::make_shared<const PromptLibrary>(PromptLibrary::load(root / "templates"));
    rt.opening_pool = load_opening_pool(root / "opening_questions.txt");
    return rt;
}

std::string_view phase_name(Phase phase) noexcept {
    switch (phase) {
        case Phase::AwaitingClient: return "awaiting_client";
        case Phase::AwaitingTherapist: return "awaiting_therapist";
        case Phase::Closed: return "closed";
    }
    return "closed";
}

std::size_t SessionState::therapist_turns() const noexcept {
    return static_cast<std::size_t>(std::count_if(
        turns.begin(), turns.end(), [](const Utterance& u) { return u.speaker == Interlocutor::Therapist; }));
}

std::size_t SessionState::client_turns() const noexcept { return turns.size() - therapist_turns(); }

std::vector<MiLabel> SessionState::therapist_labels() const {
    std::vector<MiLabel> labels;
    for (const auto& u : turns) {
        if (u.speaker == Interlocutor::Therapist && u.label) labels.push_back(*u.label);
    }
    return labels;
}

namespace {

void require_phase(const SessionState& session, Phase expected) {
    if (session.phase == Phase::Closed) throw Error(ErrorCode::SessionClosed, "session " + session.id + " is closed");
    if (session.phase != expected) {
        throw Error(ErrorCode::WrongPhase, "session " + session.id + " is " + std::string(phase_name(session.phase)) +
                                               ", expected " + std::string(phase_name(expected)));
    }
}

struct Cleaned {
    std::string text;
    bool ended = false;
    std::vector<std::string> notes;
};

Cleaned postprocess(const std::string& raw, const std::string& marker) {
    Cleaned c;
    std::string text = raw;
    if (text.find(marker) != std::string::npos) {
        replace_all(text, marker, " ");
        c.ended = true;
        c.notes.emplace_back("end_marker");
    }
    c.text = normalize_whitespace(text);
    if (c.text != raw && !c.ended) c.notes.emplace_back("whitespace_normalized");
    if (c.text.empty()) c.notes.emplace_back("empty_generation");
    return c;
}

std::string format_examples(const std::vector<std::string>& examples) {
    std::string out;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        if (i) out += "\n\n";
        out += "Example " + std::to_string(i + 1) + ":\n" + examples[i];
    }
    return out;
}

ChatRequest single_prompt(std::string prompt, const std::string& model, const SimulationConfig& config) {
    ChatRequest r;
    r.model_id = model;
    r.temperature = config.temperature;
    r.max_output_tokens = config.max_output_tokens;
    r.messages.push_back({Role::User, std::move(prompt)});
    return r;
}

void apply_cap(SessionState& session, TurnTrace& trace) {
    if (session.phase != Phase::Closed &&
        session.therapist_turns() >= static_cast<std::size_t>(session.config.max_therapist_turns)) {
        session.phase = Phase::Closed;
        session.turn_cap_reached = true;
        trace.notes.emplace_back("turn_cap_reached");
    }
}

}  // namespace

SessionState open_session(const ContextPost& context, const SimulationConfig& config,
                          const SimulationRuntime& runtime, std::string session_id) {
    config.validate();
    if (runtime.opening_pool.empty()) throw Error(ErrorCode::InvalidArgument, "opening question pool is empty");
    if (!config.allow_unscored_context && context.score != 3) {
        throw Error(ErrorCode::InvalidArgument, "context '" + context.id + "' is not scored 3");
    }
    SessionState s;
    s.id = session_id.empty() ? context.id : std::move(session_id);
    s.context = context;
    s.config = config;
    Rng rng(mix_seed(config.seed, "opening/" + context.id));
    const auto pick = rng.below(runtime.opening_pool.size());
    s.turns.push_back({Interlocutor::Therapist, runtime.opening_pool[pick], MiLabel::OpenQuestion});
    TurnTrace trace;
    trace.turn_index = 0;
    trace.speaker = Interlocutor::Therapist;
    trace.raw_generation = runtime.opening_pool[pick];
    trace.notes.push_back("opening_pool_index=" + std::to_string(pick));
    s.phase = Phase::AwaitingClient;
    apply_cap(s, trace);
    s.traces.push_back(std::move(trace));
    return s;
}

std::string forecast_input_for(const SessionState& session, std::span<const std::string> translated_texts) {
    const std::size_t n = session.turns.size();
    const std::size_t window = static_cast<std::size_t>(session.config.window);
    const std::size_t start = n > window ? n - window : 0;
    if (translated_texts.size() != n - start) {
        throw Error(ErrorCode::InvalidArgument, "translated history does not match the window");
    }
    std::vector<HistoryItem> items;
    for (std::size_t i = start; i < n; ++i) {
        const auto& u = session.turns[i];
        items.push_back({u.speaker, translated_texts[i - start], u.label});
    }
    return render_forecast_input(session.config.task_prefix, items, true);
}

std::string render_history(std::span<const Utterance> turns) {
    std::string out;
    for (const auto& u : turns) {
        if (!out.empty()) out.push_back('\n');
        out += u.speaker == Interlocutor::Therapist ? "Therapist: " : "Client: ";
        out += u.text;
    }
    return out;
}

std::string render_therapist_prompt(const PromptLibrary& prompts, const ExampleBank& bank, MiLabel label,
                                    const SessionState& session) {
    const auto& guide = bank.guide(label);
    return render_placeholders(prompts.therapist(label),
                               {{"instruction", bank.therapist_instruction},
                                {"constraints", bank.therapist_constraints},
                                {"definition", guide.definition},
                                {"examples", format_examples(guide.examples)},
                                {"label", std::string(display_name(label))},
                                {"end_marker", session.config.end_marker},
                                {"context", session.context.text},
                                {"history", render_history(session.turns)}});
}

std::string render_client_prompt(const PromptLibrary& prompts, const ExampleBank& bank,
                                 const SessionState& session) {
    std::string examples;
    for (const auto& ex : bank.change_talk) {
        if (!examples.empty()) examples += "\n";
        examples += display_case(change_talk_name(ex.type)) + ": " + ex.text;
    }
    return render_placeholders(prompts.client(), {{"instruction", bank.client_instruction},
                                                  {"constraints", bank.client_constraints},
                                                  {"definition", bank.change_talk_definition},
                                                  {"examples", examples},
                                                  {"context", session.context.text},
                                                  {"history", render_history(session.turns)}});
}

void next_therapist_turn(SessionState& session, const SimulationRuntime& runtime) {
    require_phase(session, Phase::AwaitingTherapist);
    const auto& config = session.config;
    const std::size_t n = session.turns.size();
    const std::size_t window = static_cast<std::size_t>(config.window);
    const std::size_t start = n > window ? n - window : 0;

    TurnTrace trace;
    trace.turn_index = n;
    trace.speaker = Interlocutor::Therapist;
    for (std::size_t i = start; i < n; ++i) {
        const auto& text = session.turns[i].text;
        if (config.forecast_direction.same() || text.empty()) {
            trace.translated_history.push_back(text);
        } else {
            trace.translated_history.push_back(runtime.translator->translate(text, config.forecast_direction));
        }
    }
    if (config.forecast_direction.same()) trace.notes.emplace_back("translation_skipped");

    trace.forecast_input = forecast_input_for(session, trace.translated_history);
    const auto ranked = runtime.forecaster->predict(trace.forecast_input);
    trace.ranking = ranked.labels;
    const auto labels = session.therapist_labels();
    const Decision decision = decide_label(labels, ranked);
    trace.decision = decision;

    auto request = single_prompt(render_therapist_prompt(*runtime.prompts, *runtime.bank, decision.label, session),
                                 config.therapist_model, config);
    trace.prompt_digest = request_digest(request);
    trace.raw_generation = runtime.therapist_backend->complete(request);
    auto cleaned = postprocess(trace.raw_generation, config.end_marker);
    trace.notes.insert(trace.notes.end(), cleaned.notes.begin(), cleaned.notes.end());

    session.turns.push_back({Interlocutor::Therapist, std::move(cleaned.text), decision.label});
    session.phase = cleaned.ended ? Phase::Closed : Phase::AwaitingClient;
    apply_cap(session, trace);
    session.traces.push_back(std::move(trace));
}

void next_client_turn(SessionState& session, const SimulationRuntime& runtime) {
    require_phase(session, Phase::AwaitingClient);
    TurnTrace trace;
    trace.turn_index = session.turns.size();
    trace.speaker = Interlocutor::Client;
    auto request = single_prompt(render_client_prompt(*runtime.prompts, *runtime.bank, session),
                                 session.config.client_model, session.config);
    trace.prompt_digest = request_digest(request);
    trace.raw_generation = runtime.client_backend->complete(request);
    auto cleaned = postprocess(trace.raw_generation, session.config.end_marker);
    trace.notes.insert(trace.notes.end(), cleaned.notes.begin(), cleaned.notes.end());

    session.turns.push_back({Interlocutor::Client, std::move(cleaned.text), std::nullopt});
    session.phase = Phase::AwaitingTherapist;
    session.traces.push_back(std::move(trace));
}

void append_client_text(SessionState& session, std::string_view text) {
    require_phase(session, Phase::AwaitingClient);
    std::string cleaned = normalize_whitespace(text);
    if (cleaned.empty()) throw Error(ErrorCode::InvalidArgument, "client text is empty");
    TurnTrace trace;
    trace.turn_index = session.turns.size();
    trace.speaker = Interlocutor::Client;
    trace.raw_generation = std::string(text);
    trace.notes.emplace_back("human");
    session.turns.push_back({Interlocutor::Client, std::move(cleaned), std::nullopt});
    session.phase = Phase::AwaitingTherapist;
    session.traces.push_back(std::move(trace));
}

void close_session(SessionState& session, std::string_view note) {
    if (session.phase == Phase::Closed) return;
    session.phase = Phase::Closed;
    if (!session.traces.empty()) session.traces.back().notes.emplace_back(note);
}

SessionState run_session(const ContextPost& context, const SimulationConfig& config,
                         const SimulationRuntime& runtime) {
    runtime.validate();
    SessionState session = open_session(context, config, runtime);
    while (session.phase != Phase::Closed) {
        next_client_turn(session, runtime);
        next_therapist_turn(session, runtime);
    }
    return session;
}

std::vector<SessionState> run_batch(std::span<const ContextPost> contexts, const SimulationConfig& config,
                                    const SimulationRuntime& runtime, int parallel, const SessionCallback& on_done) {
    runtime.validate();
    std::vector<std::optional<SessionState>> results(contexts.size());
    std::vector<std::exception_ptr> errors(contexts.size());
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::mutex callback_mutex;

    auto worker = [&] {
        for (;;) {
            if (failed.load()) return;
            const std::size_t i = next.fetch_add(1);
            if (i >= contexts.size()) return;
            try {
                results[i] = run_session(contexts[i], config, runtime);
                if (on_done) {
                    std::lock_guard lock(callback_mutex);
                    on_done(i, *results[i]);
                }
            } catch (...) {
                errors[i] = std::current_exception();
                failed.store(true);
            }
        }
    };

    const std::size_t threads =
        std::min<std::size_t>(static_cast<std::size_t>(std::max(1, parallel)), std::max<std::size_t>(1, contexts.size()));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    std::vector<SessionState> out;
    out.reserve(results.size());
    for (auto& r : results) out.push_back(std::move(*r));
    return out;
}

Dialogue to_dialogue(const SessionState& session) {
    Dialogue d;
    d.id = session.id;
    d.category = session.context.category;
    d.context = session.context.text;
    d.turns = session.turns;
    d.provenance = Provenance::Generated;
    d.trace_ref = session.id;
    return d;
}

std::vector<std::string> check_dialogue_invariants(const Dialogue& dialogue) {
    std::vector<std::string> problems;
    const auto& turns = dialogue.turns;
    if (turns.empty()) return {"no turns"};
    if (turns.front().speaker != Interlocutor::Therapist || turns.front().label != MiLabel::OpenQuestion) {
        problems.emplace_back("does not open with a therapist open question");
    }
    std::size_t therapist = 0;
    std::size_t client = 0;
    std::vector<MiLabel> labels;
    for (std::size_t i = 0; i < turns.size(); ++i) {
        const auto& u = turns[i];
        const Interlocutor expected = i % 2 == 0 ? Interlocutor::Therapist : Interlocutor::Client;
        if (u.speaker != expected) problems.push_back("turn " + std::to_string(i) + " breaks alternation");
        if (u.speaker == Interlocutor::Client) {
            ++client;
            if (u.label) problems.push_back("client turn " + std::to_string(i) + " carries a label");
            continue;
        }
        ++therapist;
        if (!u.label) {
            problems.push_back("therapist turn " + std::to_string(i) + " is unlabeled");
            continue;
        }
        labels.push_back(*u.label);
        const std::size_t k = labels.size();
        if (k >= 3 && labels[k - 1] == labels[k - 2] && labels[k - 2] == labels[k - 3]) {
            problems.push_back("label repeated three times ending at turn " + std::to_string(i));
        }
        if (k >= 3 && is_question(labels[k - 1]) && is_question(labels[k - 2]) && is_question(labels[k - 3])) {
            problems.push_back("three questions in a row ending at turn " + std::to_string(i));
        }
    }
    if (therapist != client + 1) problems.emplace_back("therapist turns != client turns + 1");
    return problems;
}

std::string serialize_trace(const SessionState& session) {
    ordered_json turns = ordered_json::array();
    for (const auto& t : session.traces) {
        ordered_json j;
        j["turn"] = t.turn_index;
        j["speaker"] = interlocutor_name(t.speaker);
        if (!t.translated_history.empty()) j["translated_history"] = t.translated_history;
        if (!t.forecast_input.empty()) j["forecast_input"] = t.forecast_input;
        if (!t.ranking.empty()) {
            ordered_json ranking = ordered_json::array();
            for (MiLabel l : t.ranking) ranking.push_back(machine_id(l));
            j["ranking"] = std::move(ranking);
        }
        if (t.decision) {
            ordered_json checks = ordered_json::array();
            for (const auto& c : t.decision->trace) {
                checks.push_back({{"label", machine_id(c.label)}, {"blocked_by", blocking_rule_name(c.blocked_by)}});
            }
            j["decision"] = {{"label", machine_id(t.decision->label)},
                             {"fallback", t.decision->fallback},
                             {"checks", std::move(checks)}};
        }
        if (!t.prompt_digest.empty()) j["prompt_digest"] = t.prompt_digest;
        j["raw_generation"] = t.raw_generation;
        j["notes"] = t.notes;
        turns.push_back(std::move(j));
    }
    ordered_json out;
    out["session_id"] = session.id;
    out["context_id"] = session.context.id;
    out["config"] = ordered_json::parse(session.config.to_json());
    out["phase"] = phase_name(session.phase);
    out["turn_cap_reached"] = session.turn_cap_reached;
    out["turns"] = std::move(turns);
    return out.dump(-1, ' ', false, ordered_json::error_handler_t::replace);
}

}  // namespace misim
