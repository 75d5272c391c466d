// Acceptance checks, one per primary criterion. Run with a criterion name
// to check just that one (exit 0 pass, 1 fail, 77 skip) or with no
// arguments to print one line per criterion.

#include "fixtures.hpp"

#include "misim/context.hpp"
#include "misim/corpus.hpp"
#include "misim/dataset.hpp"
#include "misim/error.hpp"
#include "misim/evaluation.hpp"
#include "misim/forecaster.hpp"
#include "misim/simulation.hpp"
#include "misim/util.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

using namespace misim;
namespace fs = std::filesystem;

namespace {

enum class Status { Pass, Fail, Skip };

struct Outcome {
    Status status = Status::Pass;
    std::string detail;
};

class Checker {
public:
    void expect(bool ok, const std::string& what) {
        if (!ok) failures_.push_back(what);
    }
    template <typename A, typename B>
    void equal(const A& actual, const B& expected, const std::string& what) {
        if (!(actual == expected)) {
            std::ostringstream os;
            os << what << ": got " << actual << ", want " << expected;
            failures_.push_back(os.str());
        }
    }
    Outcome finish(std::string pass_detail) const {
        if (failures_.empty()) return {Status::Pass, std::move(pass_detail)};
        std::string detail = failures_.front();
        if (failures_.size() > 1) detail += " (+" + std::to_string(failures_.size() - 1) + " more)";
        return {Status::Fail, detail};
    }
    bool ok() const { return failures_.empty(); }

private:
    std::vector<std::string> failures_;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string env_path(const char* name) {
    const char* v = std::getenv(name);
    return v ? std::string(v) : std::string();
}

Outcome kmi_statistics() {
    const auto path = env_path("MISIM_KMI_PATH");
    if (path.empty() || !fs::exists(path)) {
        return {Status::Skip, "released KMI corpus not available (set MISIM_KMI_PATH, optionally MISIM_KMI_MAPPING)"};
    }
    const auto start = std::chrono::steady_clock::now();
    const auto mapping = env_path("MISIM_KMI_MAPPING");
    const auto dialogues = mapping.empty() ? read_dialogues(path) : ingest_corpus(path, CorpusMapping::load(mapping));
    const auto stats = compute_stats(dialogues);
    const double elapsed = seconds_since(start);

    Checker c;
    c.equal(stats.dialogues, 1000u, "dialogues");
    c.equal(stats.total_turns, 18116u, "total turns");
    c.equal(stats.therapist_turns, 9558u, "therapist turns");
    c.equal(stats.client_turns, 8558u, "client turns");
    c.equal(stats.avg_total(), std::string("18.12"), "avg total");
    c.equal(stats.avg_therapist(), std::string("9.56"), "avg therapist");
    c.equal(stats.avg_client(), std::string("8.56"), "avg client");
    const std::array<std::uint64_t, kLabelCount> want = {1269, 3055, 2305, 109, 914, 87, 43, 779};
    for (MiLabel l : kAllLabels) c.equal(stats.labels[l], want[index_of(l)], std::string(machine_id(l)));
    c.expect(stats.miti.has_value(), "R:Q present");
    if (stats.miti) {
        c.expect(std::abs(stats.miti->rq_ratio - 1.791) <= 0.001, "R:Q " + fixed(stats.miti->rq_ratio, 4));
        c.expect(stats.miti->rq_band == RqBand::Fair, "R:Q band fair");
    }
    c.expect(classify_rq(1.8) == RqBand::Fair, "1.8:1 bands as fair");
    c.expect(elapsed < 10.0, "runtime " + fixed(elapsed, 2) + "s");
    return c.finish("1000 dialogues, 18116/9558/8558 turns, label counts exact, R:Q " +
                    (stats.miti ? fixed(stats.miti->rq_ratio, 3) : std::string("-")) + " fair, " +
                    fixed(elapsed, 2) + "s");
}

Outcome annomi_conversion() {
    const auto path = env_path("MISIM_ANNOMI_CSV");
    if (path.empty() || !fs::exists(path)) {
        return {Status::Skip, "public AnnoMI CSV not available (set MISIM_ANNOMI_CSV)"};
    }
    const auto start = std::chrono::steady_clock::now();
    const auto transcripts = preprocess(load_annomi(path));
    Checker c;
    c.equal(transcripts.size(), 110u, "retained transcripts");
    const std::array<std::size_t, 8> want = {4346, 4329, 4236, 4219, 4126, 4109, 4016, 3999};
    for (int w = 1; w <= 8; ++w) {
        ConversionConfig config;
        config.window = w;
        c.equal(convert(transcripts, config).size(), want[static_cast<std::size_t>(w - 1)],
                "window " + std::to_string(w));
    }
    const double elapsed = seconds_since(start);
    c.expect(elapsed < 30.0, "runtime " + fixed(elapsed, 2) + "s");
    return c.finish("110 transcripts; windows 1-8 match; " + fixed(elapsed, 2) + "s");
}

Outcome worked_example() {
    const std::string history =
        "Uh, what else can you tell me about your drinking? [Client] Well, I usually drink when I'm at home trying "
        "to unwind and I drink while I'm watching a movie. And sometimes, um, I take a bath but I also drink when I "
        "take a bath sometimes.";
    const std::string with_label =
        "Predict the next therapist's dialogue act: [Therapist: Open Question] " + history;
    const std::string without_label = "Predict the next therapist's dialogue act: [Therapist] " + history;
    const std::string target = "[Therapist: Open Question]";

    const auto transcripts = preprocess(load_annomi(testing::fixtures_dir() / "worked_example.csv"));
    Checker c;
    for (bool labels : {true, false}) {
        ConversionConfig config;
        config.window = 2;
        config.insert_labels = labels;
        const auto examples = convert(transcripts, config);
        c.equal(examples.size(), 1u, labels ? "examples (labels)" : "examples (no labels)");
        if (examples.size() != 1) continue;
        c.expect(examples[0].input == (labels ? with_label : without_label),
                 labels ? "label-inserted input differs" : "label-free input differs");
        c.expect(examples[0].target == target, "target differs");
    }
    return c.finish("window-2 example matches byte-for-byte with and without labels");
}

// Rule oracle written from the rule statements alone.
bool oracle_blocked(MiLabel older, MiLabel newer, MiLabel candidate) {
    const bool repeat = older == candidate && newer == candidate;
    auto question = [](MiLabel l) { return l == MiLabel::OpenQuestion || l == MiLabel::ClosedQuestion; };
    const bool streak = question(older) && question(newer) && question(candidate);
    return repeat || streak;
}

Outcome decision_exhaustive() {
    const auto start = std::chrono::steady_clock::now();
    std::size_t cases = 0;
    std::size_t mismatches = 0;
    std::size_t fallbacks = 0;
    for (MiLabel older : kAllLabels) {
        for (MiLabel newer : kAllLabels) {
            const std::vector<MiLabel> recent = {older, newer};
            for (MiLabel a : kAllLabels) {
                for (MiLabel b : kAllLabels) {
                    for (MiLabel d : kAllLabels) {
                        if (a == b || a == d || b == d) continue;
                        RankedPrediction ranked;
                        ranked.labels = {a, b, d};
                        for (MiLabel rest : kAllLabels) {
                            if (rest != a && rest != b && rest != d) ranked.labels.push_back(rest);
                        }
                        std::optional<MiLabel> expected;
                        for (MiLabel cand : {a, b, d}) {
                            if (!oracle_blocked(older, newer, cand)) {
                                expected = cand;
                                break;
                            }
                        }
                        const Decision got = decide_label(recent, ranked);
                        ++cases;
                        if (got.fallback) ++fallbacks;
                        if (!expected || got.label != *expected) ++mismatches;
                    }
                }
            }
        }
    }
    const double elapsed = seconds_since(start);
    Checker c;
    c.equal(cases, 21504u, "cases");
    c.equal(mismatches, 0u, "oracle mismatches");
    c.equal(fallbacks, 0u, "fallback activations");
    c.expect(elapsed < 1.0, "runtime " + fixed(elapsed, 3) + "s");
    return c.finish("21504 cases agree with the rule oracle, 0 fallbacks, " + fixed(elapsed, 3) + "s");
}

// Majority top-k hits recounted from raw target strings, fold by fold.
std::map<std::size_t, std::size_t> recount_majority(std::span<const ForecastExample> examples,
                                                    const FoldSplit& split, int fold, std::size_t k) {
    std::map<std::string, std::size_t> counts;
    for (const auto& e : examples) {
        if (split.fold_of.at(e.transcript_id) != fold) ++counts[e.target];
    }
    std::vector<std::pair<std::string, std::size_t>> order;
    for (MiLabel l : kAllLabels) order.emplace_back(target_token(l), counts[target_token(l)]);
    std::stable_sort(order.begin(), order.end(), [](const auto& x, const auto& y) { return x.second > y.second; });
    std::set<std::string> top;
    for (std::size_t i = 0; i < k; ++i) top.insert(order[i].first);
    std::size_t hits = 0;
    for (const auto& e : examples) {
        if (split.fold_of.at(e.transcript_id) == fold && top.count(e.target)) ++hits;
    }
    return {{k, hits}};
}

Outcome forecaster_harness() {
    const auto path = env_path("MISIM_ANNOMI_CSV");
    const bool real = !path.empty() && fs::exists(path);
    std::vector<ForecastExample> examples;
    if (real) {
        ConversionConfig config;
        config.window = 6;
        examples = convert(preprocess(load_annomi(path)), config);
    } else {
        examples = testing::synthetic_forecast_examples(6, true);
    }
    std::vector<std::string> ids;
    std::set<std::string> seen;
    for (const auto& e : examples) {
        if (seen.insert(e.transcript_id).second) ids.push_back(e.transcript_id);
    }
    const auto split = make_fold_split(ids, 5, 42);

    Checker c;
    const auto majority = kfold_evaluate([](auto train) { return fit_majority(train); }, examples, split);
    for (const auto& fold : majority.folds) {
        for (std::size_t k : {1u, 3u}) {
            const auto want = recount_majority(examples, split, fold.fold, k).at(k);
            c.equal(fold.hits.at(k), want, "majority fold " + std::to_string(fold.fold) + " top-" + std::to_string(k));
            c.expect(fold.accuracy.at(k) == static_cast<double>(want) / static_cast<double>(fold.test_size),
                     "majority accuracy fold " + std::to_string(fold.fold));
        }
    }

    RandomPredictor random(12345);
    constexpr std::size_t kTrials = 20000;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < kTrials; ++i) {
        if (in_top_k(random.predict(""), kAllLabels[i % kLabelCount], 3)) ++hits;
    }
    const double rate = static_cast<double>(hits) / kTrials;
    c.expect(std::abs(rate - 0.375) <= 0.02, "random top-3 rate " + fixed(rate, 4));

    const auto markov = kfold_evaluate([](auto train) { return fit_markov(train); }, examples, split);
    const double markov3 = markov.summary.at(3).mean;
    const double majority3 = majority.summary.at(3).mean;
    const std::string summary = "majority recount exact; random top-3 " + fixed(rate, 4) + "; markov top-3 " +
                                fixed(100 * markov3, 2) + "% vs majority " + fixed(100 * majority3, 2) + "%";
    if (!c.ok()) return c.finish("");
    if (!real) {
        return {Status::Skip, summary + " on synthetic data; markov >= majority on AnnoMI needs MISIM_ANNOMI_CSV"};
    }
    c.expect(markov3 >= majority3, "markov top-3 below majority");
    return c.finish(summary + " (AnnoMI window 6)");
}

bool is_q(MiLabel l) { return l == MiLabel::OpenQuestion || l == MiLabel::ClosedQuestion; }

Outcome mock_simulation() {
    const std::array<std::size_t, kCategoryCount> per = {10, 10, 10, 10, 5, 3, 2};
    const auto contexts = testing::synthetic_posts(per, 5);
    const auto config = testing::mock_config();

    auto run_once = [&](double& elapsed) {
        auto runtime = testing::mock_runtime();
        const auto start = std::chrono::steady_clock::now();
        const auto sessions = run_batch(contexts, config, runtime, 4);
        elapsed = seconds_since(start);
        std::string dialogues;
        std::string traces;
        for (const auto& s : sessions) {
            dialogues += serialize_dialogue(to_dialogue(s)) + "\n";
            traces += serialize_trace(s) + "\n";
        }
        return std::make_tuple(sessions, dialogues, traces);
    };
    double t1 = 0;
    double t2 = 0;
    const auto [sessions, d1, tr1] = run_once(t1);
    const auto [sessions2, d2, tr2] = run_once(t2);

    Checker c;
    c.equal(sessions.size(), 50u, "sessions");
    c.expect(d1 == d2, "dialogue bytes differ between runs");
    c.expect(tr1 == tr2, "trace bytes differ between runs");
    std::size_t turns = 0;
    for (const auto& s : sessions) {
        const auto& t = s.turns;
        turns += t.size();
        c.expect(!t.empty() && t.front().speaker == Interlocutor::Therapist && t.front().label == MiLabel::OpenQuestion,
                 s.id + " does not open with an open question");
        std::size_t th = 0;
        std::size_t cl = 0;
        std::vector<MiLabel> labels;
        for (const auto& u : t) {
            if (u.speaker == Interlocutor::Therapist) {
                ++th;
                if (u.label) labels.push_back(*u.label);
            } else {
                ++cl;
            }
        }
        c.expect(th == cl + 1, s.id + " therapist-client difference != 1");
        c.equal(labels.size(), th, s.id + " labeled therapist turns");
        for (std::size_t i = 2; i < labels.size(); ++i) {
            c.expect(!(labels[i] == labels[i - 1] && labels[i - 1] == labels[i - 2]), s.id + " label 3x");
            c.expect(!(is_q(labels[i]) && is_q(labels[i - 1]) && is_q(labels[i - 2])), s.id + " 3 questions");
        }
    }
    const double elapsed = std::max(t1, t2);
    c.expect(elapsed < 5.0, "runtime " + fixed(elapsed, 2) + "s");
    return c.finish("50 sessions byte-identical across runs, invariants hold, " + std::to_string(turns) +
                    " turns, " + fixed(elapsed, 2) + "s");
}

Outcome sampling() {
    Checker c;
    const auto pool = testing::synthetic_posts({260, 240, 230, 220, 150, 90, 80}, 11);
    const auto picked = stratified_sample(pool, SamplingQuota::context_generation(), 3);
    c.equal(picked.size(), 1000u, "contexts");
    std::array<std::size_t, kCategoryCount> per{};
    for (const auto& p : picked) ++per[index_of(p.category)];
    const std::array<std::size_t, kCategoryCount> want_ctx = {200, 200, 200, 200, 100, 50, 50};
    for (std::size_t i = 0; i < kCategoryCount; ++i) {
        c.equal(per[i], want_ctx[i], "contexts " + std::string(machine_id(kAllCategories[i])));
    }

    const auto corpus = testing::kmi_replica();
    const auto evald = sample_for_eval(corpus, SamplingQuota::evaluation(), 3);
    c.equal(evald.size(), 100u, "evaluation dialogues");
    std::array<std::size_t, kCategoryCount> per_eval{};
    for (const auto& d : evald) ++per_eval[index_of(d.category)];
    const std::array<std::size_t, kCategoryCount> want_eval = {16, 14, 14, 14, 14, 14, 14};
    for (std::size_t i = 0; i < kCategoryCount; ++i) {
        c.equal(per_eval[i], want_eval[i], "evaluation " + std::string(machine_id(kAllCategories[i])));
    }

    const auto utterances = sample_utterances_by_label(corpus, UtteranceSampling{}, 3);
    c.equal(utterances.size(), 210u, "audit utterances");
    std::map<MiLabel, std::size_t> by_label;
    for (const auto& u : utterances) ++by_label[u.label];
    c.equal(by_label.count(MiLabel::Other), 0u, "Other sampled");
    for (const auto& [label, n] : by_label) c.equal(n, 30u, "audit " + std::string(machine_id(label)));
    return c.finish("1000 contexts 200/200/200/200/100/50/50; 100 dialogues 16+14x6; 210 utterances without Other");
}

double brute_aggregate(std::vector<int> scores) {
    std::map<int, std::size_t> counts;
    for (int s : scores) ++counts[s];
    for (const auto& [v, n] : counts) {
        if (2 * n > scores.size()) return v;
    }
    std::sort(scores.begin(), scores.end());
    const std::size_t n = scores.size();
    return n % 2 ? scores[n / 2] : (scores[n / 2 - 1] + scores[n / 2]) / 2.0;
}

// Two-sided p over every way of choosing which pooled values belong to a.
double brute_mann_whitney(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> pooled(a);
    pooled.insert(pooled.end(), b.begin(), b.end());
    const std::size_t n = pooled.size();
    const std::size_t n1 = a.size();
    auto u_of = [&](const std::vector<bool>& in_a) {
        double u = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (!in_a[i]) continue;
            for (std::size_t j = 0; j < n; ++j) {
                if (in_a[j]) continue;
                u += pooled[i] > pooled[j] ? 1.0 : (pooled[i] == pooled[j] ? 0.5 : 0.0);
            }
        }
        return u;
    };
    std::vector<bool> observed(n, false);
    for (std::size_t i = 0; i < n1; ++i) observed[i] = true;
    const double centre = static_cast<double>(n1 * (n - n1)) / 2.0;
    const double obs = std::abs(u_of(observed) - centre);
    std::vector<bool> mask(n, false);
    std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(n1), true);
    std::size_t extreme = 0;
    std::size_t total = 0;
    do {
        ++total;
        if (std::abs(u_of(mask) - centre) >= obs - 1e-9) ++extreme;
    } while (std::prev_permutation(mask.begin(), mask.end()));
    return static_cast<double>(extreme) / static_cast<double>(total);
}

Outcome evaluation_arithmetic() {
    Checker c;
    const std::array<std::size_t, 7> correct = {116, 116, 120, 114, 116, 108, 116};
    std::vector<LabelJudgment> judgments;
    std::size_t li = 0;
    for (MiLabel l : kAllLabels) {
        if (l == MiLabel::Other) continue;
        for (std::size_t i = 0; i < 120; ++i) {
            judgments.push_back({std::string(machine_id(l)) + "/" + std::to_string(i / 4), l,
                                 "r" + std::to_string(i % 4), i < correct[li]});
        }
        ++li;
    }
    const auto report = label_accuracy(judgments);
    std::size_t sum = 0;
    for (auto v : correct) sum += v;
    // 806 / 840 as a percentage with one decimal, half-up.
    const std::string oracle = ratio_half_up(100 * sum, 7 * 120, 1);
    c.equal(report.macro_percent_text(), oracle, "macro accuracy");
    c.equal(report.macro_percent_text(), std::string("96.0"), "macro accuracy text");

    Rng rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t items = 1 + rng.below(10);
        const std::size_t raters = 1 + rng.below(5);
        std::vector<LikertRating> ratings;
        std::vector<std::string> ids;
        double sum_items = 0;
        for (std::size_t i = 0; i < items; ++i) {
            ids.push_back("d" + std::to_string(i));
            std::vector<int> scores;
            for (std::size_t r = 0; r < raters; ++r) {
                const int s = 1 + static_cast<int>(rng.below(5));
                scores.push_back(s);
                ratings.push_back({ids.back(), "fluency", "r" + std::to_string(r), s});
            }
            const double want = brute_aggregate(scores);
            c.expect(aggregate_item(scores) == want, "item aggregate trial " + std::to_string(trial));
            sum_items += want;
        }
        const auto agg = aggregate_dataset(ratings, "fluency", ids);
        c.expect(std::abs(agg.mean - sum_items / static_cast<double>(items)) < 1e-12,
                 "dataset mean trial " + std::to_string(trial));
    }

    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n1 = 2 + rng.below(4);
        const std::size_t n2 = 2 + rng.below(10 - n1 - 1);
        std::vector<double> a;
        std::vector<double> b;
        for (std::size_t i = 0; i < n1; ++i) a.push_back(static_cast<double>(1 + rng.below(5)));
        for (std::size_t i = 0; i < n2; ++i) b.push_back(static_cast<double>(1 + rng.below(5)));
        std::vector<double> all(a);
        all.insert(all.end(), b.begin(), b.end());
        if (std::all_of(all.begin(), all.end(), [&](double v) { return v == all.front(); })) continue;
        const auto sig = pairwise_significance(a, b);
        c.expect(sig.exact, "exact test used");
        c.expect(std::abs(sig.p - brute_mann_whitney(a, b)) < 1e-12, "p trial " + std::to_string(trial));
    }

    const std::vector<double> fives(5, 5.0);
    const std::vector<double> ones(5, 1.0);
    const auto extreme = pairwise_significance(fives, ones);
    c.expect(std::abs(extreme.p - 2.0 / 252.0) < 1e-15, "[5x5] vs [1x5] p = " + fixed(extreme.p, 6));
    c.expect(std::abs(brute_mann_whitney(fives, ones) - 2.0 / 252.0) < 1e-15, "brute-force oracle p");
    return c.finish("macro 96.0%; 200 aggregation and 60 significance fixtures match brute force; p = 2/252");
}

const std::vector<std::pair<std::string, std::function<Outcome()>>>& criteria() {
    static const std::vector<std::pair<std::string, std::function<Outcome()>>> all = {
        {"kmi_statistics", kmi_statistics},
        {"annomi_conversion", annomi_conversion},
        {"worked_example", worked_example},
        {"decision_exhaustive", decision_exhaustive},
        {"forecaster_harness", forecaster_harness},
        {"mock_simulation", mock_simulation},
        {"sampling", sampling},
        {"evaluation_arithmetic", evaluation_arithmetic},
    };
    return all;
}

int report(const std::string& name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
        o = fn();
    } catch (const std::exception& e) {
        o = {Status::Fail, std::string("exception: ") + e.what()};
    }
    const char* tag = o.status == Status::Pass ? "PASS" : o.status == Status::Fail ? "FAIL" : "SKIP";
    std::cout << tag << " " << name << ": " << o.detail << std::endl;
    return o.status == Status::Pass ? 0 : o.status == Status::Fail ? 1 : 77;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc > 1) {
        for (const auto& [name, fn] : criteria()) {
            if (name == argv[1]) return report(name, fn);
        }
        std::cerr << "unknown criterion " << argv[1] << "\n";
        return 2;
    }
    int worst = 0;
    for (const auto& [name, fn] : criteria()) {
        const int rc = report(name, fn);
        if (rc == 1) worst = 1;
    }
    return worst;
}
