#pragma once

#include "misim/taxonomy.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace misim {

enum class CriterionGroup { MiQuality, GeneralQuality };

std::string_view criterion_group_name(CriterionGroup group) noexcept;

inline constexpr std::array<std::string_view, 9> kCriterionIds = {
    "partnership", "acceptance",  "compassion", "evocation", "similarity",
    "effectiveness", "consistency", "fluency",    "on_topic",
};

struct Criterion {
    std::string id;
    CriterionGroup group = CriterionGroup::MiQuality;
    std::string name;
    std::string description;
    std::string good_example;
    std::string bad_example;
};

// The nine criteria with their descriptions, loaded from rubric.json:
// {"instructions": str, "criteria": [{"id","group","name","description",
// "good_example","bad_example"}]}. Exactly the ids in kCriterionIds, six
// mi_quality and three general_quality.
struct Rubric {
    std::string instructions;
    std::vector<Criterion> criteria;

    // Interactive sessions drop on_topic.
    std::vector<Criterion> applicable(bool interactive) const;
    const Criterion* find(std::string_view id) const noexcept;

    static Rubric from_json_text(std::string_view text);
    static Rubric load(const std::filesystem::path& path);
    static Rubric load_default(const std::filesystem::path& assets_dir = {});
    std::string to_json(bool interactive) const;
};

struct LikertRating {
    std::string dialogue_id;
    std::string criterion;
    std::string rater_id;
    int score = 0;

    bool operator==(const LikertRating&) const = default;
};

// Reads flat rating lines {dialogue_id, criterion, rater_id, score} and
// submission lines {dialogue_id, rater_id, scores: {criterion: score}}.
// Scores must be integers 1-5 (SchemaViolation otherwise). A later line for
// the same (dialogue, criterion, rater) replaces the earlier one.
std::vector<LikertRating> parse_ratings(std::string_view content);
std::vector<LikertRating> read_ratings(const std::filesystem::path& path);
std::string serialize_ratings(std::span<const LikertRating> ratings);

enum class AggregationRule { MajorityThenMedian, Median };

AggregationRule parse_aggregation_rule(std::string_view text);

// Strict-majority score if one exists, else the median (mean of the middle
// pair for even counts). NoRatings when empty.
double aggregate_item(std::span<const int> scores, AggregationRule rule = AggregationRule::MajorityThenMedian);

struct DatasetAggregate {
    std::string criterion;
    std::map<std::string, double> per_item;
    double mean = 0.0;
    std::string mean_text;  // half-up, 2 decimals
};

// Mean of per-item aggregates over `items`; when `items` is empty, every
// dialogue id present in `ratings` is expected. MissingItems lists the ids
// without a rating for the criterion.
DatasetAggregate aggregate_dataset(std::span<const LikertRating> ratings, std::string_view criterion,
                                   std::span<const std::string> items = {},
                                   AggregationRule rule = AggregationRule::MajorityThenMedian);

struct LabelJudgment {
    std::string utterance_ref;
    MiLabel label = MiLabel::Other;
    std::string rater_id;
    bool verdict = false;
};

std::vector<LabelJudgment> parse_judgments(std::string_view content);
std::vector<LabelJudgment> read_judgments(const std::filesystem::path& path);

struct LabelAccuracy {
    std::size_t correct = 0;
    std::size_t total = 0;
    double fraction() const noexcept { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
    std::string percent_text() const;  // 1 decimal, half-up
};

struct LabelAccuracyReport {
    std::map<MiLabel, LabelAccuracy> per_label;  // labels with at least one judgment
    double macro = 0.0;                          // unweighted mean of fractions
    std::string macro_percent_text() const;
    std::string to_json() const;
    std::string to_table() const;
};

// Duplicate (utterance, rater) judgments raise InvalidArgument; NoRatings
// when empty.
LabelAccuracyReport label_accuracy(std::span<const LabelJudgment> judgments);

struct SignificanceResult {
    double u = 0.0;   // for sample a
    double p = 1.0;   // two-sided
    bool exact = false;
    bool significant = false;
};

// Two-sided Mann-Whitney U. Exact permutation distribution over midranks
// when the pooled size is <= 20; otherwise normal approximation with tie
// and continuity correction. Needs >= 2 values per side; DegenerateSamples
// when every pooled value is identical.
SignificanceResult pairwise_significance(std::span<const double> a, std::span<const double> b,
                                         double alpha = 0.01);

struct EvaluationSubmission {
    std::string dialogue_id;
    std::string rater_id;
    std::map<std::string, int> scores;
    bool interactive = false;

    bool operator==(const EvaluationSubmission&) const = default;
};

// InvalidArgument naming the first missing/unknown criterion or bad score.
void validate_submission(const EvaluationSubmission& submission, const Rubric& rubric);

std::string serialize_submission(const EvaluationSubmission& submission);
EvaluationSubmission parse_submission(std::string_view text, std::size_t line = 1);

std::vector<LikertRating> to_ratings(const EvaluationSubmission& submission);

}  // namespace misim
