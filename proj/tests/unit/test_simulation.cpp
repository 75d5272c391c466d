#include "fixtures.hpp"

#include "misim/error.hpp"
#include "misim/simulation.hpp"
#include "misim/util.hpp"

#include <gtest/gtest.h>

using namespace misim;

namespace {

ContextPost post(const std::string& id = "ctx-1") {
    return {id, Category::CareerEmployment, "I keep missing deadlines at my new job.", 3};
}

// Always the same replies, so only the cap ends the session.
SimulationRuntime endless_runtime() {
    auto rt = misim::testing::mock_runtime();
    auto therapist = std::make_shared<ScriptedChatBackend>();
    therapist->add_fallback("Tell me more.");
    auto client = std::make_shared<ScriptedChatBackend>();
    client->add_fallback("Okay.");
    rt.therapist_backend = therapist;
    rt.client_backend = client;
    return rt;
}

struct RecordingTranslator : Translator {
    std::vector<std::string> seen;

protected:
    std::string do_translate(std::string_view text, const LanguagePair&) override {
        seen.emplace_back(text);
        return "EN(" + std::string(text) + ")";
    }
};

}  // namespace

TEST(Assets, ShippedBankAndTemplates) {
    const auto rt = load_runtime_assets(misim::testing::assets_dir());
    ASSERT_TRUE(rt.bank && rt.prompts);
    EXPECT_FALSE(rt.opening_pool.empty());
    for (MiLabel l : kAllLabels) {
        EXPECT_NE(rt.prompts->therapist(l).find("{history}"), std::string::npos);
        if (l == MiLabel::Other) continue;
        EXPECT_FALSE(rt.bank->guide(l).definition.empty());
        EXPECT_GE(rt.bank->guide(l).examples.size(), 3u);
    }
    ASSERT_EQ(rt.bank->change_talk.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(rt.bank->change_talk[i].type, kDarnOrder[i]);
}

TEST(Bank, ValidateSortsDarnAndRejectsGaps) {
    auto bank = ExampleBank::load(misim::testing::assets_dir() / "example_bank.json");
    std::reverse(bank.change_talk.begin(), bank.change_talk.end());
    bank.validate();
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(bank.change_talk[i].type, kDarnOrder[i]);

    auto missing = bank;
    missing.change_talk.pop_back();
    EXPECT_THROW(missing.validate(), Error);
    auto thin = bank;
    thin.labels[index_of(MiLabel::Affirm)].examples.resize(2);
    EXPECT_THROW(thin.validate(), Error);
}

TEST(Config, JsonRoundTripAndValidation) {
    SimulationConfig c;
    c.window = 4;
    c.seed = 99;
    c.forecast_direction = {"en", "en"};
    const auto back = SimulationConfig::from_json_text(c.to_json());
    EXPECT_EQ(back.window, 4);
    EXPECT_EQ(back.seed, 99u);
    EXPECT_TRUE(back.forecast_direction.same());
    c.end_marker.clear();
    EXPECT_THROW(c.validate(), Error);
    c = {};
    c.max_therapist_turns = 0;
    EXPECT_THROW(c.validate(), Error);
}

TEST(Session, OpensWithPooledOpenQuestion) {
    const auto rt = misim::testing::mock_runtime();
    const auto s = open_session(post(), misim::testing::mock_config(), rt);
    ASSERT_EQ(s.turns.size(), 1u);
    EXPECT_EQ(s.turns[0].label, MiLabel::OpenQuestion);
    EXPECT_NE(std::find(rt.opening_pool.begin(), rt.opening_pool.end(), s.turns[0].text), rt.opening_pool.end());
    EXPECT_EQ(s.phase, Phase::AwaitingClient);
    EXPECT_EQ(open_session(post(), misim::testing::mock_config(), rt).turns[0].text, s.turns[0].text);
}

TEST(Session, RequiresScoreThree) {
    const auto rt = misim::testing::mock_runtime();
    auto p = post();
    p.score = 2;
    EXPECT_THROW(open_session(p, misim::testing::mock_config(), rt), Error);
    auto config = misim::testing::mock_config();
    config.allow_unscored_context = true;
    EXPECT_NO_THROW(open_session(p, config, rt));
}

TEST(Session, PhaseGuards) {
    const auto rt = misim::testing::mock_runtime();
    auto s = open_session(post(), misim::testing::mock_config(), rt);
    try {
        next_therapist_turn(s, rt);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::WrongPhase);
    }
    EXPECT_EQ(s.turns.size(), 1u);
    EXPECT_THROW(append_client_text(s, "   "), Error);
    append_client_text(s, "  I  guess so. ");
    EXPECT_EQ(s.turns.back().text, "I guess so.");
    close_session(s, "done");
    try {
        next_therapist_turn(s, rt);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::SessionClosed);
    }
}

TEST(Session, TurnCapTwelve) {
    const auto rt = endless_runtime();
    const auto s = run_session(post(), misim::testing::mock_config(), rt);
    EXPECT_TRUE(s.turn_cap_reached);
    EXPECT_EQ(s.therapist_turns(), 12u);
    EXPECT_EQ(s.client_turns(), 11u);
    EXPECT_EQ(s.phase, Phase::Closed);
    EXPECT_TRUE(check_dialogue_invariants(to_dialogue(s)).empty());
}

TEST(Session, CapOfOneClosesAtOpening) {
    auto config = misim::testing::mock_config();
    config.max_therapist_turns = 1;
    const auto s = run_session(post(), config, endless_runtime());
    EXPECT_EQ(s.turns.size(), 1u);
    EXPECT_TRUE(s.turn_cap_reached);
}

TEST(Session, EndMarkerStrippedAndCloses) {
    auto rt = endless_runtime();
    auto therapist = std::make_shared<ScriptedChatBackend>();
    therapist->enqueue("That sounds hard.");
    therapist->enqueue("Let's stop here. [END_SESSION]");
    rt.therapist_backend = therapist;
    const auto s = run_session(post(), misim::testing::mock_config(), rt);
    EXPECT_EQ(s.therapist_turns(), 3u);
    EXPECT_EQ(s.client_turns(), 2u);
    EXPECT_FALSE(s.turn_cap_reached);
    EXPECT_EQ(s.turns.back().text, "Let's stop here.");
    EXPECT_EQ(s.turns.back().text.find("END_SESSION"), std::string::npos);
}

TEST(Session, ForecastWindowAndTranslation) {
    auto rt = endless_runtime();
    auto translator = std::make_shared<RecordingTranslator>();
    rt.translator = translator;
    auto config = misim::testing::mock_config();
    config.forecast_direction = {"ko", "en"};
    config.window = 2;
    auto s = open_session(post(), config, rt);
    next_client_turn(s, rt);
    next_therapist_turn(s, rt);
    next_client_turn(s, rt);
    next_therapist_turn(s, rt);
    const auto& trace = s.traces.back();
    ASSERT_EQ(trace.translated_history.size(), 2u);
    EXPECT_EQ(trace.translated_history[1], "EN(Okay.)");
    EXPECT_TRUE(starts_with(trace.forecast_input, std::string(kDefaultTaskPrefix) + " [Therapist: "));
    EXPECT_NE(trace.forecast_input.find("[Client] EN(Okay.)"), std::string::npos);
    // The generated history keeps the original text.
    EXPECT_EQ(s.turns[3].text, "Okay.");
    ASSERT_TRUE(trace.decision);
    EXPECT_EQ(trace.decision->label, *s.turns.back().label);
    EXPECT_EQ(trace.ranking.size(), 8u);
    EXPECT_EQ(translator->seen.size(), 2u + 2u);
}

TEST(Session, FailedTurnLeavesStateUnchanged) {
    auto rt = endless_runtime();
    auto therapist = std::make_shared<ScriptedChatBackend>();
    rt.therapist_backend = therapist;  // empty: every call is rejected
    auto s = open_session(post(), misim::testing::mock_config(), rt);
    next_client_turn(s, rt);
    const auto before = s.turns;
    EXPECT_THROW(next_therapist_turn(s, rt), BackendRejected);
    EXPECT_EQ(s.turns, before);
    EXPECT_EQ(s.phase, Phase::AwaitingTherapist);
}

TEST(Prompts, TherapistAndClientContent) {
    const auto rt = misim::testing::mock_runtime();
    auto s = open_session(post(), misim::testing::mock_config(), rt);
    append_client_text(s, "I want to do better.");
    const auto tp = render_therapist_prompt(*rt.prompts, *rt.bank, MiLabel::ComplexReflection, s);
    EXPECT_NE(tp.find("Complex Reflection"), std::string::npos);
    EXPECT_NE(tp.find(rt.bank->guide(MiLabel::ComplexReflection).definition), std::string::npos);
    for (const auto& e : rt.bank->guide(MiLabel::ComplexReflection).examples) EXPECT_NE(tp.find(e), std::string::npos);
    EXPECT_NE(tp.find(post().text), std::string::npos);
    EXPECT_NE(tp.find("Client: I want to do better."), std::string::npos);
    EXPECT_NE(tp.find("[END_SESSION]"), std::string::npos);
    EXPECT_EQ(tp.find('{'), std::string::npos);

    const auto cp = render_client_prompt(*rt.prompts, *rt.bank, s);
    std::size_t last = 0;
    for (const auto& ex : rt.bank->change_talk) {
        const auto at = cp.find(ex.text);
        ASSERT_NE(at, std::string::npos);
        EXPECT_GT(at, last);
        last = at;
    }
    EXPECT_EQ(cp.find("Open Question"), std::string::npos);
}

TEST(Batch, DeterministicAcrossParallelism) {
    const auto contexts = misim::testing::synthetic_posts({3, 3, 3, 3, 2, 1, 1}, 21);
    const auto config = misim::testing::mock_config();
    auto serialize = [&](int parallel) {
        auto rt = misim::testing::mock_runtime();
        std::string out;
        std::size_t callbacks = 0;
        const auto sessions = run_batch(contexts, config, rt, parallel, [&](std::size_t, const SessionState&) { ++callbacks; });
        EXPECT_EQ(callbacks, contexts.size());
        for (const auto& s : sessions) out += serialize_dialogue(to_dialogue(s)) + "\n" + serialize_trace(s) + "\n";
        return out;
    };
    const auto one = serialize(1);
    EXPECT_EQ(one, serialize(4));
    EXPECT_EQ(one, serialize(4));
}

TEST(Batch, ErrorPropagates) {
    auto rt = endless_runtime();
    rt.client_backend = std::make_shared<ScriptedChatBackend>();
    const auto contexts = misim::testing::synthetic_posts({1, 1, 1, 1, 1, 1, 1}, 2);
    EXPECT_THROW(run_batch(contexts, misim::testing::mock_config(), rt, 3), BackendRejected);
}

TEST(Invariants, DetectViolations) {
    Dialogue d;
    d.id = "x";
    d.turns = {{Interlocutor::Therapist, "a", MiLabel::OpenQuestion},
               {Interlocutor::Client, "b", std::nullopt},
               {Interlocutor::Therapist, "c", MiLabel::ClosedQuestion},
               {Interlocutor::Client, "d", std::nullopt},
               {Interlocutor::Therapist, "e", MiLabel::OpenQuestion}};
    EXPECT_FALSE(check_dialogue_invariants(d).empty());
    d.turns[4].label = MiLabel::Affirm;
    EXPECT_TRUE(check_dialogue_invariants(d).empty());
    d.turns.pop_back();
    EXPECT_FALSE(check_dialogue_invariants(d).empty());
    d.turns[0].label = MiLabel::Affirm;
    d.turns.push_back({Interlocutor::Therapist, "f", MiLabel::Affirm});
    EXPECT_FALSE(check_dialogue_invariants(d).empty());
}
