#pragma once

#include "misim/corpus.hpp"
#include "misim/http.hpp"
#include "misim/taxonomy.hpp"
#include "misim/util.hpp"

#include <array>
#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace misim {

struct RankedPrediction {
    std::vector<MiLabel> labels;  // descending confidence, distinct
    std::vector<double> scores;   // empty or parallel to labels
};

// A label ranking with every one of the 8 labels, in table order.
RankedPrediction table_order_ranking();

// Appends labels missing from `prediction` in `order`, so the ranking
// covers all 8 labels. Duplicate labels in the input raise InvalidArgument.
RankedPrediction pad_ranking(RankedPrediction prediction, std::span<const MiLabel> order);

bool in_top_k(const RankedPrediction& prediction, MiLabel truth, std::size_t k) noexcept;

class Predictor {
public:
    virtual ~Predictor() = default;
    virtual RankedPrediction predict(std::string_view input) const = 0;
    virtual std::string name() const = 0;
};

// Ranks by training-target frequency, ties in table order. Throws
// EmptyTrainingSet.
class MajorityPredictor final : public Predictor {
public:
    explicit MajorityPredictor(std::span<const ForecastExample> training);
    RankedPrediction predict(std::string_view input) const override;
    std::string name() const override { return "majority"; }
    const LabelCounts& target_counts() const noexcept { return counts_; }

private:
    LabelCounts counts_;
    RankedPrediction ranking_;
};

std::unique_ptr<Predictor> fit_majority(std::span<const ForecastExample> training);

// Label-sequence model over inserted therapist labels: P(next | last two),
// backing off to P(next | last) and then to the global distribution, with
// add-alpha smoothing over the 8 labels.
class MarkovPredictor final : public Predictor {
public:
    MarkovPredictor(std::span<const ForecastExample> training, double alpha);

    RankedPrediction predict(std::string_view input) const override;
    std::string name() const override { return "markov"; }

    // Distribution used for a given therapist-label history (only the last
    // two entries matter). Sums to 1.
    std::array<double, kLabelCount> distribution(std::span<const MiLabel> history) const;
    double alpha() const noexcept { return alpha_; }
    const LabelCounts& global_counts() const noexcept { return global_; }

private:
    RankedPrediction rank(const std::array<double, kLabelCount>& probabilities) const;
    static std::array<double, kLabelCount> smooth(const LabelCounts& counts, double alpha);

    double alpha_;
    LabelCounts global_;
    std::array<LabelCounts, kLabelCount> by_last_{};
    std::array<std::array<LabelCounts, kLabelCount>, kLabelCount> by_last_two_{};
    std::array<MiLabel, kLabelCount> global_order_{};
};

std::unique_ptr<Predictor> fit_markov(std::span<const ForecastExample> training, double alpha = 1.0);

// Uniform random permutation per call, reproducible from the seed and the
// call sequence. Calls are serialized internally. In keyed mode each
// permutation depends only on (seed, input), so concurrent callers see the
// same result regardless of ordering.
class RandomPredictor final : public Predictor {
public:
    explicit RandomPredictor(std::uint64_t seed, bool keyed = false) : seed_(seed), keyed_(keyed), rng_(seed) {}
    RankedPrediction predict(std::string_view input) const override;
    std::string name() const override { return "random"; }

private:
    std::uint64_t seed_;
    bool keyed_;
    mutable std::mutex mutex_;
    mutable Rng rng_;
};

std::unique_ptr<Predictor> random_baseline(std::uint64_t seed, bool keyed = false);

// External forecaster: POST {"input": ...} -> {"labels": [...], "scores": [...]?}.
// Labels go through parse_label; short rankings (>= 3) are padded in
// `padding_order`.
class HttpPredictor final : public Predictor {
public:
    struct Options {
        std::string url;
        std::string api_key;  // sent as a bearer token when non-empty
        std::chrono::milliseconds timeout = std::chrono::seconds(30);
        std::vector<MiLabel> padding_order;  // defaults to table order
    };

    HttpPredictor(Options options, std::shared_ptr<HttpTransport> transport);
    RankedPrediction predict(std::string_view input) const override;
    std::string name() const override { return "external"; }

private:
    Options options_;
    std::shared_ptr<HttpTransport> transport_;
};

struct FoldSplit {
    std::map<std::string, int> fold_of;  // transcript id -> fold index
    int folds = 5;
    std::uint64_t seed = 0;

    std::vector<std::size_t> fold_sizes() const;
};

// Shuffles the distinct ids with `seed` and deals them round-robin, so fold
// sizes differ by at most one transcript.
FoldSplit make_fold_split(std::span<const std::string> transcript_ids, int folds, std::uint64_t seed);

using PredictorFactory = std::function<std::unique_ptr<Predictor>(std::span<const ForecastExample>)>;

struct FoldResult {
    int fold = 0;
    std::size_t train_size = 0;
    std::size_t test_size = 0;
    std::map<std::size_t, double> accuracy;  // k -> top-k accuracy
    std::map<std::size_t, std::size_t> hits;  // k -> hit count
};

struct KSummary {
    double mean = 0.0;
    double half_width = 0.0;  // 1.96 * sample std / sqrt(folds)
    double min = 0.0;
    double max = 0.0;
};

struct CvReport {
    std::string predictor;
    std::vector<FoldResult> folds;
    std::map<std::size_t, KSummary> summary;
};

struct CvOptions {
    std::vector<std::size_t> ks{1, 3};
    bool parallel = false;
};

// Fits on all other folds and scores the held-out fold, per fold. Examples
// are assigned by transcript_id. Throws FoldTooSmall when a fold has no
// examples, InvalidArgument when an example's transcript is not in the split.
CvReport kfold_evaluate(const PredictorFactory& factory, std::span<const ForecastExample> examples,
                        const FoldSplit& split, const CvOptions& options = {});

// Flat JSONL: one {"fold","k","accuracy"} row per fold and k, then one
// {"summary":true,"k","mean","half_width"} row per k.
std::string serialize_cv_report(const CvReport& report);

enum class BlockingRule { None, RepeatedLabel, QuestionStreak };

std::string_view blocking_rule_name(BlockingRule rule) noexcept;

struct CandidateCheck {
    MiLabel label;
    BlockingRule blocked_by = BlockingRule::None;
};

struct Decision {
    MiLabel label = MiLabel::Other;
    std::vector<CandidateCheck> trace;
    bool fallback = false;  // top-3 exhausted; unreachable for distinct rankings
};

// Which rule (if any) forbids `candidate` after the given therapist label
// history. Rule 1: the last two labels both equal the candidate. Rule 2: the
// candidate is a question and the last two labels are both questions.
BlockingRule blocking_rule(std::span<const MiLabel> recent, MiLabel candidate) noexcept;

// Walks the top 3 in order and returns the first candidate no rule blocks.
Decision decide_label(std::span<const MiLabel> recent_therapist_labels, const RankedPrediction& ranked);

}  // namespace misim
