#pragma once

#include "misim/context.hpp"
#include "misim/corpus.hpp"
#include "misim/taxonomy.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace misim {

struct Utterance {
    Interlocutor speaker = Interlocutor::Therapist;
    std::string text;
    std::optional<MiLabel> label;  // therapist turns only

    bool operator==(const Utterance&) const = default;
};

enum class Provenance { Generated, Ingested };

std::string_view provenance_name(Provenance p) noexcept;

struct Dialogue {
    std::string id;
    Category category = Category::MentalHealth;
    std::string context;
    std::vector<Utterance> turns;
    Provenance provenance = Provenance::Generated;
    std::string trace_ref;  // optional pointer into a traces file

    bool operator==(const Dialogue&) const = default;
};

// One dialogue per line:
// {"id","category","context","provenance","trace_ref"?,"turns":[{"speaker","text","label"?}]}
// Labels are written as machine ids; any parse_label spelling is accepted
// on read.
std::string serialize_dialogue(const Dialogue& dialogue);
std::string serialize_dialogues(std::span<const Dialogue> dialogues);
// `line` is used for SchemaViolation reporting.
Dialogue parse_dialogue(std::string_view text, std::size_t line = 1);
std::vector<Dialogue> parse_dialogues(std::string_view content);
void write_dialogues(const std::filesystem::path& path, std::span<const Dialogue> dialogues);
std::vector<Dialogue> read_dialogues(const std::filesystem::path& path);

// Field mapping for externally published corpora. Field names may be dotted
// paths ("meta.category"). In the nested layout each record is a dialogue
// holding a turns array; in the flat layout each record is one utterance and
// rows are grouped by the id field in first-appearance order.
struct CorpusMapping {
    bool flat = false;
    std::string id_field = "id";
    std::string category_field = "category";
    std::string context_field = "context";
    std::string turns_field = "turns";
    std::string speaker_field = "speaker";
    std::string text_field = "text";
    std::string label_field = "label";
    // Raw value -> canonical spelling; lookups fall back to the raw value.
    std::map<std::string, std::string> speaker_values;
    std::map<std::string, std::string> category_values;
    std::map<std::string, std::string> label_values;

    static CorpusMapping load(const std::filesystem::path& path);
    static CorpusMapping from_json_text(std::string_view text);
};

// Accepts JSON Lines or a single top-level JSON array.
std::vector<Dialogue> ingest_corpus(const std::filesystem::path& path, const CorpusMapping& mapping);
std::vector<Dialogue> ingest_corpus_text(std::string_view content, const CorpusMapping& mapping);

struct DatasetStats {
    std::size_t dialogues = 0;
    std::size_t total_turns = 0;
    std::size_t therapist_turns = 0;
    std::size_t client_turns = 0;
    std::size_t unlabeled_therapist_turns = 0;
    LabelCounts labels;
    std::optional<MitiSummary> miti;  // absent when no questions

    // Half-up, 2 decimals.
    std::string avg_total() const;
    std::string avg_therapist() const;
    std::string avg_client() const;

    DatasetStats& operator+=(const DatasetStats& other);
};

// EmptyCorpus on an empty input.
DatasetStats compute_stats(std::span<const Dialogue> dialogues);

// Human-readable table; label percentages over the label-count total,
// rounded to whole percent.
std::string format_stats_table(const DatasetStats& stats);
// Single JSON object with exact counts, averages and fractions.
std::string format_stats_json(const DatasetStats& stats);

// Exact per-category dialogue quotas; InsufficientSupply when short.
std::vector<Dialogue> sample_for_eval(std::span<const Dialogue> dialogues, const SamplingQuota& quota,
                                      std::uint64_t seed);

struct SampledUtterance {
    std::string dialogue_id;
    std::size_t turn_index = 0;
    Category category = Category::MentalHealth;
    MiLabel label = MiLabel::Other;
    std::string text;

    bool operator==(const SampledUtterance&) const = default;
};

struct UtteranceSampling {
    std::size_t per_label = 30;
    bool include_other = false;
};

// For each audited label (label order, Other excluded by default): shuffle
// each category's candidates with a derived seed, order categories by supply
// descending (ties in category order) and take round-robin until per_label.
// InsufficientSupply when a label has fewer than per_label candidates.
std::vector<SampledUtterance> sample_utterances_by_label(std::span<const Dialogue> dialogues,
                                                         const UtteranceSampling& options, std::uint64_t seed);

std::string serialize_sampled_utterances(std::span<const SampledUtterance> items);

struct FinetuneFormat {
    std::string preamble =
        "You are a counselor who follows motivational interviewing. Continue the conversation with the "
        "client's concern in mind.";
    std::string therapist_prefix = "Counselor: ";
    std::string client_prefix = "Client: ";
    std::string separator = "\n";
};

struct FinetuneRecord {
    std::string dialogue_id;
    std::size_t turn_index = 0;
    std::string input;
    std::string output;
};

// One record per therapist turn: input = preamble followed by every earlier
// utterance, output = the therapist text. Labels never appear in records.
std::vector<FinetuneRecord> export_finetune(std::span<const Dialogue> dialogues, const FinetuneFormat& format = {});
std::string serialize_finetune(std::span<const FinetuneRecord> records);

}  // namespace misim
