#include "fixtures.hpp"

#include "misim/dataset.hpp"
#include "misim/error.hpp"
#include "misim/util.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace misim;

namespace {

Dialogue small(const std::string& id, Category c = Category::Family) {
    Dialogue d;
    d.id = id;
    d.category = c;
    d.context = "ctx \"quoted\"";
    d.turns = {{Interlocutor::Therapist, "How are you?", MiLabel::OpenQuestion},
               {Interlocutor::Client, "Tired.", std::nullopt},
               {Interlocutor::Therapist, "You're worn out.", MiLabel::SimpleReflection},
               {Interlocutor::Client, "Yes.", std::nullopt},
               {Interlocutor::Therapist, "Hm.", std::nullopt}};
    return d;
}

}  // namespace

TEST(Io, RoundTrip) {
    misim::testing::TempDir dir;
    auto a = small("a");
    a.trace_ref = "traces.jsonl#a";
    const std::vector<Dialogue> ds = {a, small("b", Category::MentalHealth)};
    write_dialogues(dir / "d.jsonl", ds);
    EXPECT_EQ(read_dialogues(dir / "d.jsonl"), ds);
    const auto line = serialize_dialogue(a);
    EXPECT_NE(line.find("\"label\":\"open_question\""), std::string::npos);
    EXPECT_EQ(line.find('\n'), std::string::npos);
}

TEST(Io, LenientLabelsStrictSchema) {
    const auto d = parse_dialogue(
        R"({"id":"x","category":"Family","context":"c","turns":[{"speaker":"therapist","text":"t","label":"Open Question"}]})");
    EXPECT_EQ(d.turns[0].label, MiLabel::OpenQuestion);
    try {
        parse_dialogues("{\"id\":\"x\"}\n");
        FAIL();
    } catch (const SchemaViolation& e) {
        EXPECT_EQ(e.line(), 1u);
    }
    try {
        parse_dialogues(serialize_dialogue(small("a")) + "\n\nnot json\n");
        FAIL();
    } catch (const SchemaViolation& e) {
        EXPECT_EQ(e.line(), 3u);
    }
}

TEST(Stats, CountsAndAverages) {
    const std::vector<Dialogue> ds = {small("a"), small("b")};
    const auto s = compute_stats(ds);
    EXPECT_EQ(s.dialogues, 2u);
    EXPECT_EQ(s.total_turns, 10u);
    EXPECT_EQ(s.therapist_turns, 6u);
    EXPECT_EQ(s.client_turns, 4u);
    EXPECT_EQ(s.unlabeled_therapist_turns, 2u);
    EXPECT_EQ(s.labels[MiLabel::OpenQuestion], 2u);
    EXPECT_EQ(s.avg_total(), "5.00");
    ASSERT_TRUE(s.miti);
    EXPECT_DOUBLE_EQ(s.miti->rq_ratio, 1.0);
    EXPECT_THROW(compute_stats(std::vector<Dialogue>{}), Error);
    const auto table = format_stats_table(s);
    EXPECT_NE(table.find("Open Question"), std::string::npos);
    EXPECT_NE(format_stats_json(s).find("\"therapist\":6"), std::string::npos);
}

TEST(Stats, MergeEqualsWhole) {
    const auto corpus = misim::testing::kmi_replica();
    const std::span<const Dialogue> all(corpus);
    auto left = compute_stats(all.subspan(0, 400));
    left += compute_stats(all.subspan(400));
    const auto whole = compute_stats(all);
    EXPECT_EQ(left.total_turns, whole.total_turns);
    EXPECT_EQ(left.labels, whole.labels);
    EXPECT_EQ(left.miti->rq_ratio, whole.miti->rq_ratio);
}

TEST(Stats, ReplicaMatchesPublishedTotals) {
    const auto s = compute_stats(misim::testing::kmi_replica());
    EXPECT_EQ(s.therapist_turns, 9558u);
    EXPECT_EQ(s.client_turns, 8558u);
    EXPECT_EQ(s.avg_total(), "18.12");
    EXPECT_EQ(s.avg_therapist(), "9.56");
    EXPECT_EQ(s.avg_client(), "8.56");
    EXPECT_EQ(s.unlabeled_therapist_turns, 997u);
    EXPECT_EQ(s.labels.total(), 8561u);
    EXPECT_EQ(fixed(s.miti->rq_ratio, 3), "1.791");
}

TEST(Ingest, NestedWithMapping) {
    const auto mapping = CorpusMapping::from_json_text(R"({
      "id_field": "meta.id", "category_field": "meta.topic", "turns_field": "dialog",
      "speaker_field": "role", "text_field": "utt", "label_field": "act",
      "speaker_values": {"counselor": "therapist", "seeker": "client"},
      "category_values": {"jobs": "career_employment"},
      "label_values": {"SR": "simple_reflection"}})");
    const auto ds = ingest_corpus_text(
        R"([{"meta":{"id":7,"topic":"jobs"},"dialog":[{"role":"counselor","utt":"Hi","act":"SR"},{"role":"seeker","utt":"Yo"}]}])",
        mapping);
    ASSERT_EQ(ds.size(), 1u);
    EXPECT_EQ(ds[0].id, "7");
    EXPECT_EQ(ds[0].category, Category::CareerEmployment);
    EXPECT_EQ(ds[0].provenance, Provenance::Ingested);
    EXPECT_EQ(ds[0].turns[0].label, MiLabel::SimpleReflection);
    EXPECT_EQ(ds[0].turns[1].speaker, Interlocutor::Client);
}

TEST(Ingest, FlatGroupsById) {
    CorpusMapping m;
    m.flat = true;
    const auto ds = ingest_corpus_text(
        "{\"id\":\"b\",\"category\":\"family\",\"speaker\":\"therapist\",\"text\":\"1\",\"label\":\"affirm\"}\n"
        "{\"id\":\"a\",\"category\":\"family\",\"speaker\":\"therapist\",\"text\":\"2\",\"label\":\"advise\"}\n"
        "{\"id\":\"b\",\"category\":\"family\",\"speaker\":\"client\",\"text\":\"3\"}\n",
        m);
    ASSERT_EQ(ds.size(), 2u);
    EXPECT_EQ(ds[0].id, "b");
    EXPECT_EQ(ds[0].turns.size(), 2u);
    EXPECT_THROW(ingest_corpus_text("{\"category\":\"family\"}\n", m), SchemaViolation);
}

TEST(Sampling, EvalQuotaExact) {
    const auto corpus = misim::testing::kmi_replica();
    const auto a = sample_for_eval(corpus, SamplingQuota::evaluation(), 5);
    EXPECT_EQ(a.size(), 100u);
    EXPECT_EQ(a, sample_for_eval(corpus, SamplingQuota::evaluation(), 5));
    std::set<std::string> ids;
    for (const auto& d : a) ids.insert(d.id);
    EXPECT_EQ(ids.size(), 100u);
    try {
        sample_for_eval(corpus, SamplingQuota::uniform(201), 5);
        FAIL();
    } catch (const Error& e) {
        EXPECT_TRUE(e.code() == ErrorCode::InsufficientSupply || e.code() == ErrorCode::InsufficientCategory);
    }
}

TEST(Sampling, UtterancesPerLabelSpreadAcrossCategories) {
    const auto corpus = misim::testing::kmi_replica();
    const auto items = sample_utterances_by_label(corpus, {}, 8);
    ASSERT_EQ(items.size(), 210u);
    std::map<MiLabel, std::set<Category>> cats;
    std::set<std::pair<std::string, std::size_t>> refs;
    for (const auto& it : items) {
        EXPECT_NE(it.label, MiLabel::Other);
        cats[it.label].insert(it.category);
        refs.insert({it.dialogue_id, it.turn_index});
        // The reference points at a therapist turn with that label.
        const auto& d = *std::find_if(corpus.begin(), corpus.end(), [&](const Dialogue& x) { return x.id == it.dialogue_id; });
        EXPECT_EQ(d.turns[it.turn_index].label, it.label);
        EXPECT_EQ(d.turns[it.turn_index].text, it.text);
    }
    EXPECT_EQ(refs.size(), 210u);
    // Round-robin reaches every category that has a candidate.
    std::map<MiLabel, std::set<Category>> supply;
    for (const auto& d : corpus) {
        for (const auto& u : d.turns) {
            if (u.label) supply[*u.label].insert(d.category);
        }
    }
    for (const auto& [label, set] : cats) EXPECT_EQ(set, supply[label]) << machine_id(label);
    EXPECT_EQ(items, sample_utterances_by_label(corpus, {}, 8));

    UtteranceSampling with_other;
    with_other.include_other = true;
    EXPECT_EQ(sample_utterances_by_label(corpus, with_other, 8).size(), 240u);
    UtteranceSampling too_many;
    too_many.per_label = 44;
    EXPECT_THROW(sample_utterances_by_label(corpus, too_many, 8), Error);
}

TEST(Finetune, PerTherapistTurnNoLabels) {
    const std::vector<Dialogue> ds = {small("a")};
    FinetuneFormat f;
    f.preamble = "P";
    const auto records = export_finetune(ds, f);
    ASSERT_EQ(records.size(), 3u);
    EXPECT_EQ(records[0].input, "P");
    EXPECT_EQ(records[0].output, "How are you?");
    EXPECT_EQ(records[2].input, "P\nCounselor: How are you?\nClient: Tired.\nCounselor: You're worn out.\nClient: Yes.");
    EXPECT_EQ(records[2].turn_index, 4u);
    const auto text = serialize_finetune(records);
    EXPECT_EQ(text.find("Reflection"), std::string::npos);
    EXPECT_EQ(text.find("open_question"), std::string::npos);
}
