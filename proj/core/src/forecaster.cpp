#include "misim/forecaster.hpp"

#include "misim/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>
#include <set>

namespace misim {

using nlohmann::json;

RankedPrediction table_order_ranking() {
    return RankedPrediction{{kAllLabels.begin(), kAllLabels.end()}, {}};
}

RankedPrediction pad_ranking(RankedPrediction prediction, std::span<const MiLabel> order) {
    std::array<bool, kLabelCount> present{};
    for (MiLabel label : prediction.labels) {
        if (present[index_of(label)]) {
            throw Error(ErrorCode::InvalidArgument,
                        "ranking repeats label " + std::string(display_name(label)));
        }
        present[index_of(label)] = true;
    }
    const bool with_scores = !prediction.scores.empty();
    for (MiLabel label : order) {
        if (present[index_of(label)]) continue;
        prediction.labels.push_back(label);
        if (with_scores) prediction.scores.push_back(0.0);
        present[index_of(label)] = true;
    }
    for (MiLabel label : kAllLabels) {
        if (present[index_of(label)]) continue;
        prediction.labels.push_back(label);
        if (with_scores) prediction.scores.push_back(0.0);
    }
    return prediction;
}

bool in_top_k(const RankedPrediction& prediction, MiLabel truth, std::size_t k) noexcept {
    const std::size_t n = std::min(k, prediction.labels.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (prediction.labels[i] == truth) return true;
    }
    return false;
}

namespace {

// Labels by descending count, ties in table order.
std::array<MiLabel, kLabelCount> frequency_order(const LabelCounts& counts) {
    std::array<MiLabel, kLabelCount> order = kAllLabels;
    std::stable_sort(order.begin(), order.end(),
                     [&](MiLabel a, MiLabel b) { return counts[a] > counts[b]; });
    return order;
}

}  // namespace

MajorityPredictor::MajorityPredictor(std::span<const ForecastExample> training) {
    if (training.empty()) {
        throw Error(ErrorCode::EmptyTrainingSet, "majority baseline needs at least one training example");
    }
    for (const auto& example : training) counts_.add(parse_target(example.target));
    const auto order = frequency_order(counts_);
    ranking_.labels.assign(order.begin(), order.end());
    const double total = static_cast<double>(counts_.total());
    for (MiLabel label : order) ranking_.scores.push_back(static_cast<double>(counts_[label]) / total);
}

RankedPrediction MajorityPredictor::predict(std::string_view) const {
    return ranking_;
}

std::unique_ptr<Predictor> fit_majority(std::span<const ForecastExample> training) {
    return std::make_unique<MajorityPredictor>(training);
}

MarkovPredictor::MarkovPredictor(std::span<const ForecastExample> training, double alpha) : alpha_(alpha) {
    if (!(alpha > 0.0)) {
        throw Error(ErrorCode::InvalidArgument, "smoothing constant must be positive");
    }
    if (training.empty()) {
        throw Error(ErrorCode::EmptyTrainingSet, "markov baseline needs at least one training example");
    }
    for (const auto& example : training) {
        if (has_bare_therapist_tag(example.input)) {
            throw Error(ErrorCode::LabelContextUnavailable,
                        "markov baseline needs inputs with inserted therapist labels");
        }
        const MiLabel next = parse_target(example.target);
        const auto history = extract_therapist_labels(example.input);
        global_.add(next);
        if (!history.empty()) {
            by_last_[index_of(history.back())].add(next);
        }
        if (history.size() >= 2) {
            by_last_two_[index_of(history[history.size() - 2])][index_of(history.back())].add(next);
        }
    }
    global_order_ = frequency_order(global_);
}

std::array<double, kLabelCount> MarkovPredictor::smooth(const LabelCounts& counts, double alpha) {
    std::array<double, kLabelCount> p{};
    const double denom = static_cast<double>(counts.total()) + alpha * static_cast<double>(kLabelCount);
    for (MiLabel label : kAllLabels) {
        p[index_of(label)] = (static_cast<double>(counts[label]) + alpha) / denom;
    }
    return p;
}

std::array<double, kLabelCount> MarkovPredictor::distribution(std::span<const MiLabel> history) const {
    if (history.size() >= 2) {
        const auto& ctx = by_last_two_[index_of(history[history.size() - 2])][index_of(history.back())];
        if (ctx.total() > 0) return smooth(ctx, alpha_);
    }
    if (!history.empty()) {
        const auto& ctx = by_last_[index_of(history.back())];
        if (ctx.total() > 0) return smooth(ctx, alpha_);
    }
    return smooth(global_, alpha_);
}

RankedPrediction MarkovPredictor::rank(const std::array<double, kLabelCount>& probabilities) const {
    std::array<std::size_t, kLabelCount> tie_rank{};
    for (std::size_t i = 0; i < kLabelCount; ++i) tie_rank[index_of(global_order_[i])] = i;

    std::vector<MiLabel> labels(kAllLabels.begin(), kAllLabels.end());
    std::sort(labels.begin(), labels.end(), [&](MiLabel a, MiLabel b) {
        const double pa = probabilities[index_of(a)];
        const double pb = probabilities[index_of(b)];
        if (pa != pb) return pa > pb;
        return tie_rank[index_of(a)] < tie_rank[index_of(b)];
    });
    RankedPrediction out;
    out.labels = labels;
    for (MiLabel label : labels) out.scores.push_back(probabilities[index_of(label)]);
    return out;
}

RankedPrediction MarkovPredictor::predict(std::string_view input) const {
    if (has_bare_therapist_tag(input)) {
        throw Error(ErrorCode::LabelContextUnavailable, "input lacks inserted therapist labels");
    }
    const auto history = extract_therapist_labels(input);
    return rank(distribution(history));
}

std::unique_ptr<Predictor> fit_markov(std::span<const ForecastExample> training, double alpha) {
    return std::make_unique<MarkovPredictor>(training, alpha);
}

RankedPrediction RandomPredictor::predict(std::string_view input) const {
    std::vector<MiLabel> labels(kAllLabels.begin(), kAllLabels.end());
    if (keyed_) {
        Rng local(mix_seed(seed_, input));
        local.shuffle(labels);
    } else {
        std::lock_guard lock(mutex_);
        rng_.shuffle(labels);
    }
    return RankedPrediction{std::move(labels), {}};
}

std::unique_ptr<Predictor> random_baseline(std::uint64_t seed, bool keyed) {
    return std::make_unique<RandomPredictor>(seed, keyed);
}

HttpPredictor::HttpPredictor(Options options, std::shared_ptr<HttpTransport> transport)
    : options_(std::move(options)), transport_(std::move(transport)) {
    if (options_.padding_order.empty()) {
        options_.padding_order.assign(kAllLabels.begin(), kAllLabels.end());
    }
}

RankedPrediction HttpPredictor::predict(std::string_view input) const {
    HttpHeaders headers;
    if (!options_.api_key.empty()) headers.emplace_back("Authorization", "Bearer " + options_.api_key);
    const std::string body = json{{"input", input}}.dump(-1, ' ', false, json::error_handler_t::replace);

    HttpResponse response;
    try {
        response = transport_->post_json(options_.url, headers, body, options_.timeout);
    } catch (const TransportError& e) {
        if (e.failure().timed_out) throw Error(ErrorCode::BackendTimeout, "external predictor timed out");
        throw BackendRejected(0, e.what());
    }
    if (response.status < 200 || response.status >= 300) {
        throw BackendRejected(response.status, response.body);
    }

    RankedPrediction prediction;
    try {
        const auto reply = json::parse(response.body);
        for (const auto& label : reply.at("labels")) {
            prediction.labels.push_back(parse_label(label.get<std::string>()));
        }
        if (reply.contains("scores") && !reply.at("scores").is_null()) {
            for (const auto& score : reply.at("scores")) prediction.scores.push_back(score.get<double>());
            if (prediction.scores.size() != prediction.labels.size()) {
                throw Error(ErrorCode::InvalidArgument, "external predictor scores/labels length mismatch");
            }
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, std::string("external predictor reply unreadable: ") + e.what());
    }
    if (prediction.labels.size() < 3) {
        throw Error(ErrorCode::InvalidArgument, "external predictor returned fewer than 3 labels");
    }
    return pad_ranking(std::move(prediction), options_.padding_order);
}

std::vector<std::size_t> FoldSplit::fold_sizes() const {
    std::vector<std::size_t> sizes(static_cast<std::size_t>(std::max(folds, 0)), 0);
    for (const auto& [id, fold] : fold_of) ++sizes.at(static_cast<std::size_t>(fold));
    return sizes;
}

FoldSplit make_fold_split(std::span<const std::string> transcript_ids, int folds, std::uint64_t seed) {
    if (folds < 2) throw Error(ErrorCode::InvalidArgument, "need at least 2 folds");
    std::set<std::string> distinct(transcript_ids.begin(), transcript_ids.end());
    std::vector<std::string> ids(distinct.begin(), distinct.end());
    Rng rng(seed);
    rng.shuffle(ids);
    FoldSplit split;
    split.folds = folds;
    split.seed = seed;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        split.fold_of[ids[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));
    }
    return split;
}

namespace {

FoldResult run_fold(const PredictorFactory& factory, std::span<const ForecastExample> examples,
                    const std::vector<int>& fold_of_example, int fold, const std::vector<std::size_t>& ks) {
    std::vector<ForecastExample> train;
    std::vector<const ForecastExample*> test;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        if (fold_of_example[i] == fold) {
            test.push_back(&examples[i]);
        } else {
            train.push_back(examples[i]);
        }
    }
    if (test.empty()) {
        throw Error(ErrorCode::FoldTooSmall, "fold " + std::to_string(fold) + " has no examples");
    }
    auto predictor = factory(train);

    FoldResult result;
    result.fold = fold;
    result.train_size = train.size();
    result.test_size = test.size();
    for (std::size_t k : ks) result.hits[k] = 0;
    for (const auto* example : test) {
        const MiLabel truth = parse_target(example->target);
        const auto prediction = predictor->predict(example->input);
        for (std::size_t k : ks) {
            if (in_top_k(prediction, truth, k)) ++result.hits[k];
        }
    }
    for (std::size_t k : ks) {
        result.accuracy[k] = static_cast<double>(result.hits[k]) / static_cast<double>(result.test_size);
    }
    return result;
}

}  // namespace

CvReport kfold_evaluate(const PredictorFactory& factory, std::span<const ForecastExample> examples,
                        const FoldSplit& split, const CvOptions& options) {
    if (options.ks.empty()) throw Error(ErrorCode::InvalidArgument, "no k values requested");
    std::vector<int> fold_of_example(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
        auto it = split.fold_of.find(examples[i].transcript_id);
        if (it == split.fold_of.end()) {
            throw Error(ErrorCode::InvalidArgument,
                        "transcript '" + examples[i].transcript_id + "' is not in the fold split");
        }
        fold_of_example[i] = it->second;
    }

    CvReport report;
    if (options.parallel) {
        std::vector<std::future<FoldResult>> pending;
        for (int f = 0; f < split.folds; ++f) {
            pending.push_back(std::async(std::launch::async, run_fold, std::cref(factory), examples,
                                         std::cref(fold_of_example), f, std::cref(options.ks)));
        }
        for (auto& p : pending) report.folds.push_back(p.get());
    } else {
        for (int f = 0; f < split.folds; ++f) {
            report.folds.push_back(run_fold(factory, examples, fold_of_example, f, options.ks));
        }
    }

    for (std::size_t k : options.ks) {
        std::vector<double> values;
        for (const auto& fold : report.folds) values.push_back(fold.accuracy.at(k));
        const double n = static_cast<double>(values.size());
        const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
        double ss = 0.0;
        for (double v : values) ss += (v - mean) * (v - mean);
        const double sd = values.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
        KSummary s;
        s.mean = mean;
        s.half_width = 1.96 * sd / std::sqrt(n);
        s.min = *std::min_element(values.begin(), values.end());
        s.max = *std::max_element(values.begin(), values.end());
        report.summary[k] = s;
    }
    return report;
}

std::string serialize_cv_report(const CvReport& report) {
    std::string out;
    for (const auto& fold : report.folds) {
        for (const auto& [k, acc] : fold.accuracy) {
            json row = {{"fold", fold.fold}, {"k", k}, {"accuracy", acc}, {"test_size", fold.test_size}};
            if (!report.predictor.empty()) row["predictor"] = report.predictor;
            out += row.dump();
            out.push_back('\n');
        }
    }
    for (const auto& [k, s] : report.summary) {
        json row = {{"summary", true}, {"k", k}, {"mean", s.mean}, {"half_width", s.half_width}};
        if (!report.predictor.empty()) row["predictor"] = report.predictor;
        out += row.dump();
        out.push_back('\n');
    }
    return out;
}

std::string_view blocking_rule_name(BlockingRule rule) noexcept {
    switch (rule) {
        case BlockingRule::None: return "none";
        case BlockingRule::RepeatedLabel: return "repeated_label";
        case BlockingRule::QuestionStreak: return "question_streak";
    }
    return "none";
}

BlockingRule blocking_rule(std::span<const MiLabel> recent, MiLabel candidate) noexcept {
    if (recent.size() < 2) return BlockingRule::None;
    const MiLabel prev = recent[recent.size() - 2];
    const MiLabel last = recent.back();
    if (prev == candidate && last == candidate) return BlockingRule::RepeatedLabel;
    if (is_question(candidate) && is_question(prev) && is_question(last)) return BlockingRule::QuestionStreak;
    return BlockingRule::None;
}

Decision decide_label(std::span<const MiLabel> recent_therapist_labels, const RankedPrediction& ranked) {
    Decision decision;
    const std::size_t n = ranked.labels.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (i == 3) decision.fallback = true;
        const MiLabel candidate = ranked.labels[i];
        const BlockingRule rule = blocking_rule(recent_therapist_labels, candidate);
        decision.trace.push_back({candidate, rule});
        if (rule == BlockingRule::None) {
            decision.label = candidate;
            return decision;
        }
    }
    decision.fallback = true;
    decision.label = MiLabel::Other;
    return decision;
}

}  // namespace misim
