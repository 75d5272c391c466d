#include "misim/evaluation.hpp"

#include "misim/error.hpp"
#include "misim/util.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace misim {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view criterion_group_name(CriterionGroup group) noexcept {
    return group == CriterionGroup::MiQuality ? "mi_quality" : "general_quality";
}

namespace {

template <typename Fn>
void for_each_line(std::string_view content, Fn&& fn) {
    std::size_t number = 0;
    std::size_t start = 0;
    while (start < content.size()) {
        auto end = content.find('\n', start);
        if (end == std::string_view::npos) end = content.size();
        ++number;
        std::string_view line = content.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.find_first_not_of(" \t") != std::string_view::npos) fn(line, number);
        start = end + 1;
    }
}

bool known_criterion(std::string_view id) {
    return std::find(kCriterionIds.begin(), kCriterionIds.end(), id) != kCriterionIds.end();
}

int likert_score(const json& value, std::size_t line) {
    if (!value.is_number_integer()) throw SchemaViolation(line, "score must be an integer");
    const auto v = value.get<long long>();
    if (v < 1 || v > 5) throw SchemaViolation(line, "score outside 1-5");
    return static_cast<int>(v);
}

}  // namespace

std::vector<Criterion> Rubric::applicable(bool interactive) const {
    std::vector<Criterion> out;
    for (const auto& c : criteria) {
        if (interactive && c.id == "on_topic") continue;
        out.push_back(c);
    }
    return out;
}

const Criterion* Rubric::find(std::string_view id) const noexcept {
    for (const auto& c : criteria) {
        if (c.id == id) return &c;
    }
    return nullptr;
}

Rubric Rubric::from_json_text(std::string_view text) {
    Rubric r;
    try {
        const auto doc = json::parse(text);
        r.instructions = doc.value("instructions", std::string());
        for (const auto& c : doc.at("criteria")) {
            Criterion crit;
            crit.id = c.at("id").get<std::string>();
            const auto group = c.at("group").get<std::string>();
            if (group == "mi_quality") {
                crit.group = CriterionGroup::MiQuality;
            } else if (group == "general_quality") {
                crit.group = CriterionGroup::GeneralQuality;
            } else {
                throw Error(ErrorCode::InvalidArgument, "unknown criterion group '" + group + "'");
            }
            crit.name = c.value("name", crit.id);
            crit.description = c.at("description").get<std::string>();
            crit.good_example = c.value("good_example", std::string());
            crit.bad_example = c.value("bad_example", std::string());
            r.criteria.push_back(std::move(crit));
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, std::string("bad rubric: ") + e.what());
    }
    std::set<std::string> ids;
    std::size_t mi = 0;
    for (const auto& c : r.criteria) {
        if (!known_criterion(c.id)) throw Error(ErrorCode::InvalidArgument, "unknown criterion '" + c.id + "'");
        if (!ids.insert(c.id).second) throw Error(ErrorCode::InvalidArgument, "duplicate criterion '" + c.id + "'");
        if (c.group == CriterionGroup::MiQuality) ++mi;
    }
    if (ids.size() != kCriterionIds.size() || mi != 6) {
        throw Error(ErrorCode::InvalidArgument, "rubric needs all 9 criteria (6 mi_quality, 3 general_quality)");
    }
    return r;
}

Rubric Rubric::load(const std::filesystem::path& path) { return from_json_text(read_file(path)); }

Rubric Rubric::load_default(const std::filesystem::path& assets_dir) {
    return load(resolve_assets_dir(assets_dir) / "rubric.json");
}

std::string Rubric::to_json(bool interactive) const {
    ordered_json list = ordered_json::array();
    for (const auto& c : applicable(interactive)) {
        ordered_json j;
        j["id"] = c.id;
        j["group"] = criterion_group_name(c.group);
        j["name"] = c.name;
        j["description"] = c.description;
        j["good_example"] = c.good_example;
        j["bad_example"] = c.bad_example;
        list.push_back(std::move(j));
    }
    ordered_json out;
    out["instructions"] = instructions;
    out["interactive"] = interactive;
    out["scale"] = {{"min", 1}, {"max", 5}};
    out["criteria"] = std::move(list);
    return out.dump();
}

std::vector<LikertRating> parse_ratings(std::string_view content) {
    std::vector<LikertRating> out;
    std::map<std::tuple<std::string, std::string, std::string>, std::size_t> position;
    auto put = [&](LikertRating r) {
        auto key = std::make_tuple(r.dialogue_id, r.criterion, r.rater_id);
        auto [it, fresh] = position.emplace(std::move(key), out.size());
        if (fresh) {
            out.push_back(std::move(r));
        } else {
            out[it->second] = std::move(r);
        }
    };
    for_each_line(content, [&](std::string_view line, std::size_t number) {
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw SchemaViolation(number, e.what());
        }
        try {
            const auto dialogue = j.at("dialogue_id").get<std::string>();
            const auto rater = j.at("rater_id").get<std::string>();
            if (j.contains("scores")) {
                for (const auto& [criterion, score] : j.at("scores").items()) {
                    if (!known_criterion(criterion)) throw SchemaViolation(number, "unknown criterion " + criterion);
                    put({dialogue, criterion, rater, likert_score(score, number)});
                }
            } else {
                const auto criterion = j.at("criterion").get<std::string>();
                if (!known_criterion(criterion)) throw SchemaViolation(number, "unknown criterion " + criterion);
                put({dialogue, criterion, rater, likert_score(j.at("score"), number)});
            }
        } catch (const json::exception& e) {
            throw SchemaViolation(number, e.what());
        }
    });
    return out;
}

std::vector<LikertRating> read_ratings(const std::filesystem::path& path) { return parse_ratings(read_file(path)); }

std::string serialize_ratings(std::span<const LikertRating> ratings) {
    std::string out;
    for (const auto& r : ratings) {
        ordered_json j;
        j["dialogue_id"] = r.dialogue_id;
        j["criterion"] = r.criterion;
        j["rater_id"] = r.rater_id;
        j["score"] = r.score;
        out += j.dump();
        out.push_back('\n');
    }
    return out;
}

AggregationRule parse_aggregation_rule(std::string_view text) {
    if (text == "majority-median" || text == "majority_then_median") return AggregationRule::MajorityThenMedian;
    if (text == "median") return AggregationRule::Median;
    throw Error(ErrorCode::InvalidArgument, "unknown aggregation rule '" + std::string(text) + "'");
}

double aggregate_item(std::span<const int> scores, AggregationRule rule) {
    if (scores.empty()) throw Error(ErrorCode::NoRatings, "no ratings to aggregate");
    std::vector<int> sorted(scores.begin(), scores.end());
    std::sort(sorted.begin(), sorted.end());
    if (rule == AggregationRule::MajorityThenMedian) {
        std::size_t run = 1;
        for (std::size_t i = 1; i <= sorted.size(); ++i) {
            if (i < sorted.size() && sorted[i] == sorted[i - 1]) {
                ++run;
                continue;
            }
            if (2 * run > sorted.size()) return sorted[i - 1];
            run = 1;
        }
    }
    const std::size_t n = sorted.size();
    if (n % 2 == 1) return sorted[n / 2];
    return (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0;
}

DatasetAggregate aggregate_dataset(std::span<const LikertRating> ratings, std::string_view criterion,
                                   std::span<const std::string> items, AggregationRule rule) {
    std::map<std::string, std::vector<int>> by_item;
    std::set<std::string> universe(items.begin(), items.end());
    for (const auto& r : ratings) {
        if (items.empty()) universe.insert(r.dialogue_id);
        if (r.criterion == criterion) by_item[r.dialogue_id].push_back(r.score);
    }
    std::vector<std::string> missing;
    for (const auto& id : universe) {
        if (!by_item.count(id)) missing.push_back(id);
    }
    if (!missing.empty()) {
        throw Error(ErrorCode::MissingItems,
                    "no " + std::string(criterion) + " ratings for: " + join(missing, ", "));
    }
    if (universe.empty()) throw Error(ErrorCode::NoRatings, "no rated items");

    DatasetAggregate out;
    out.criterion = std::string(criterion);
    std::uint64_t doubled_sum = 0;
    for (const auto& id : universe) {
        const double value = aggregate_item(by_item.at(id), rule);
        out.per_item[id] = value;
        doubled_sum += static_cast<std::uint64_t>(std::llround(value * 2.0));
    }
    const auto n = static_cast<std::uint64_t>(universe.size());
    out.mean = static_cast<double>(doubled_sum) / (2.0 * static_cast<double>(n));
    out.mean_text = ratio_half_up(doubled_sum, 2 * n, 2);
    return out;
}

std::vector<LabelJudgment> parse_judgments(std::string_view content) {
    std::vector<LabelJudgment> out;
    for_each_line(content, [&](std::string_view line, std::size_t number) {
        try {
            const auto j = json::parse(line);
            LabelJudgment lj;
            lj.utterance_ref = j.at("utterance_ref").get<std::string>();
            auto label = try_parse_label(j.at("label").get<std::string>());
            if (!label) throw SchemaViolation(number, "unknown label");
            lj.label = *label;
            lj.rater_id = j.at("rater_id").get<std::string>();
            lj.verdict = j.at("verdict").get<bool>();
            out.push_back(std::move(lj));
        } catch (const json::exception& e) {
            throw SchemaViolation(number, e.what());
        }
    });
    return out;
}

std::vector<LabelJudgment> read_judgments(const std::filesystem::path& path) {
    return parse_judgments(read_file(path));
}

std::string LabelAccuracy::percent_text() const {
    if (total == 0) return "0.0";
    return ratio_half_up(100 * correct, total, 1);
}

std::string LabelAccuracyReport::macro_percent_text() const { return fixed(macro * 100.0, 1); }

std::string LabelAccuracyReport::to_json() const {
    ordered_json labels = ordered_json::object();
    for (const auto& [label, acc] : per_label) {
        labels[std::string(machine_id(label))] = {
            {"correct", acc.correct}, {"total", acc.total}, {"percent", acc.percent_text()}};
    }
    ordered_json j;
    j["labels"] = std::move(labels);
    j["macro_percent"] = macro_percent_text();
    j["macro"] = macro;
    return j.dump();
}

std::string LabelAccuracyReport::to_table() const {
    std::ostringstream out;
    for (const auto& [label, acc] : per_label) {
        out << display_name(label) << '\t' << acc.correct << '/' << acc.total << '\t' << acc.percent_text() << "%\n";
    }
    out << "Average\t\t" << macro_percent_text() << "%\n";
    return out.str();
}

LabelAccuracyReport label_accuracy(std::span<const LabelJudgment> judgments) {
    if (judgments.empty()) throw Error(ErrorCode::NoRatings, "no judgments");
    std::set<std::pair<std::string, std::string>> seen;
    LabelAccuracyReport report;
    for (const auto& j : judgments) {
        if (!seen.emplace(j.utterance_ref, j.rater_id).second) {
            throw Error(ErrorCode::InvalidArgument,
                        "utterance " + j.utterance_ref + " judged twice by rater " + j.rater_id);
        }
        auto& acc = report.per_label[j.label];
        ++acc.total;
        if (j.verdict) ++acc.correct;
    }
    double sum = 0.0;
    for (const auto& [label, acc] : report.per_label) sum += acc.fraction();
    report.macro = sum / static_cast<double>(report.per_label.size());
    return report;
}

namespace {

// Doubled midranks, so ties stay integral.
std::vector<long long> doubled_midranks(const std::vector<double>& pooled) {
    const std::size_t n = pooled.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return pooled[x] < pooled[y]; });
    std::vector<long long> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && pooled[order[j + 1]] == pooled[order[i]]) ++j;
        const long long doubled = static_cast<long long>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = doubled;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

SignificanceResult pairwise_significance(std::span<const double> a, std::span<const double> b, double alpha) {
    if (a.size() < 2 || b.size() < 2) {
        throw Error(ErrorCode::InvalidArgument, "significance test needs at least 2 scores per side");
    }
    std::vector<double> pooled(a.begin(), a.end());
    pooled.insert(pooled.end(), b.begin(), b.end());
    if (std::all_of(pooled.begin(), pooled.end(), [&](double v) { return v == pooled.front(); })) {
        throw Error(ErrorCode::DegenerateSamples, "all scores are identical");
    }
    const std::size_t n1 = a.size();
    const std::size_t n = pooled.size();
    const auto ranks = doubled_midranks(pooled);

    long long r1 = 0;
    for (std::size_t i = 0; i < n1; ++i) r1 += ranks[i];
    // All quantities doubled: 2*R1 - n1(n1+1) = 2U.
    const long long two_u = r1 - static_cast<long long>(n1 * (n1 + 1));
    const long long two_mean = static_cast<long long>(n1 * (n - n1));  // 2 * n1 n2 / 2
    const long long observed = std::llabs(two_u - two_mean);

    SignificanceResult result;
    result.u = static_cast<double>(two_u) / 2.0;

    if (n <= 20) {
        result.exact = true;
        std::vector<std::size_t> pick(n1);
        for (std::size_t i = 0; i < n1; ++i) pick[i] = i;
        std::uint64_t extreme = 0;
        std::uint64_t total = 0;
        for (;;) {
            long long s = 0;
            for (auto idx : pick) s += ranks[idx];
            const long long dev = std::llabs(s - static_cast<long long>(n1 * (n1 + 1)) - two_mean);
            ++total;
            if (dev >= observed) ++extreme;
            std::size_t k = n1;
            while (k > 0 && pick[k - 1] == n - n1 + k - 1) --k;
            if (k == 0) break;
            ++pick[k - 1];
            for (std::size_t m = k; m < n1; ++m) pick[m] = pick[m - 1] + 1;
        }
        result.p = static_cast<double>(extreme) / static_cast<double>(total);
    } else {
        const double dn1 = static_cast<double>(n1);
        const double dn2 = static_cast<double>(n - n1);
        const double dn = static_cast<double>(n);
        double tie_term = 0.0;
        std::vector<double> sorted = pooled;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < n;) {
            std::size_t j = i;
            while (j < n && sorted[j] == sorted[i]) ++j;
            const double t = static_cast<double>(j - i);
            tie_term += t * t * t - t;
            i = j;
        }
        const double variance = dn1 * dn2 / 12.0 * ((dn + 1.0) - tie_term / (dn * (dn - 1.0)));
        const double deviation = static_cast<double>(observed) / 2.0;
        const double z = std::max(0.0, deviation - 0.5) / std::sqrt(variance);
        result.p = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
    }
    result.significant = result.p < alpha;
    return result;
}

void validate_submission(const EvaluationSubmission& s, const Rubric& rubric) {
    if (trim(s.dialogue_id).empty()) throw Error(ErrorCode::InvalidArgument, "dialogue_id is required");
    if (trim(s.rater_id).empty()) throw Error(ErrorCode::InvalidArgument, "rater_id is required");
    const auto needed = rubric.applicable(s.interactive);
    for (const auto& c : needed) {
        auto it = s.scores.find(c.id);
        if (it == s.scores.end()) throw Error(ErrorCode::InvalidArgument, "missing criterion " + c.id);
        if (it->second < 1 || it->second > 5) {
            throw Error(ErrorCode::InvalidArgument, "score for " + c.id + " must be 1-5");
        }
    }
    for (const auto& [id, score] : s.scores) {
        const bool applicable = std::any_of(needed.begin(), needed.end(), [&](const Criterion& c) { return c.id == id; });
        if (!applicable) throw Error(ErrorCode::InvalidArgument, "criterion " + id + " does not apply");
    }
}

std::string serialize_submission(const EvaluationSubmission& s) {
    ordered_json j;
    j["dialogue_id"] = s.dialogue_id;
    j["rater_id"] = s.rater_id;
    j["interactive"] = s.interactive;
    ordered_json scores = ordered_json::object();
    for (const auto& [id, score] : s.scores) scores[id] = score;
    j["scores"] = std::move(scores);
    return j.dump(-1, ' ', false, ordered_json::error_handler_t::replace);
}

EvaluationSubmission parse_submission(std::string_view text, std::size_t line) {
    EvaluationSubmission s;
    try {
        const auto j = json::parse(text);
        s.dialogue_id = j.at("dialogue_id").get<std::string>();
        s.rater_id = j.at("rater_id").get<std::string>();
        s.interactive = j.value("interactive", false);
        for (const auto& [id, score] : j.at("scores").items()) {
            if (!score.is_number_integer()) throw SchemaViolation(line, "score for " + id + " is not an integer");
            s.scores[id] = score.get<int>();
        }
    } catch (const json::exception& e) {
        throw SchemaViolation(line, e.what());
    }
    return s;
}

std::vector<LikertRating> to_ratings(const EvaluationSubmission& s) {
    std::vector<LikertRating> out;
    for (const auto& [id, score] : s.scores) out.push_back({s.dialogue_id, id, s.rater_id, score});
    return out;
}

}  // namespace misim
