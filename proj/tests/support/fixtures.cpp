#include "fixtures.hpp"

#include "misim/forecaster.hpp"
#include "misim/gateway.hpp"
#include "misim/util.hpp"

#include <algorithm>
#include <array>
#include <cstdlib>
#include <numeric>
#include <stdexcept>

namespace misim::testing {

namespace fs = std::filesystem;

fs::path assets_dir() { return MISIM_TEST_ASSETS_DIR; }
fs::path fixtures_dir() { return MISIM_TEST_FIXTURES_DIR; }

TempDir::TempDir() {
    std::string pattern = (fs::temp_directory_path() / "misim-test-XXXXXX").string();
    if (!mkdtemp(pattern.data())) throw std::runtime_error("mkdtemp failed");
    path_ = pattern;
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

namespace {

constexpr std::array<const char*, 24> kWords = {
    "I",     "really", "think", "maybe",  "work",   "home",   "sleep",  "tired", "week",   "friends",
    "money", "school", "feel",  "want",   "change", "better", "drink",  "late",  "family", "again",
    "time",  "talk",   "worry", "enough",
};

std::string sentence(Rng& rng, std::size_t min_words, std::size_t max_words) {
    const std::size_t n = min_words + static_cast<std::size_t>(rng.below(max_words - min_words + 1));
    std::string out;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) out += (rng.below(9) == 0) ? ", " : " ";
        out += kWords[rng.below(kWords.size())];
    }
    if (rng.below(6) == 0) out += " \"you know\"";
    out += rng.below(4) == 0 ? "?" : ".";
    return out;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

// Preferred successor of each therapist label; the chain follows it 60% of
// the time and otherwise draws from a skewed background distribution.
constexpr std::array<MiLabel, kLabelCount> kSuccessor = {
    MiLabel::OpenQuestion,     // after simple reflection
    MiLabel::ClosedQuestion,   // after complex reflection
    MiLabel::ComplexReflection,  // after open question
    MiLabel::SimpleReflection,   // after closed question
    MiLabel::OpenQuestion,     // after affirm
    MiLabel::Advise,           // after give information
    MiLabel::Other,            // after advise
    MiLabel::OpenQuestion,     // after other
};
constexpr std::array<int, kLabelCount> kBackground = {20, 22, 18, 12, 6, 8, 4, 10};

MiLabel next_label(Rng& rng, std::optional<MiLabel> prev) {
    if (prev && rng.below(10) < 6) return kSuccessor[index_of(*prev)];
    const int total = std::accumulate(kBackground.begin(), kBackground.end(), 0);
    int pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(total)));
    for (MiLabel l : kAllLabels) {
        pick -= kBackground[index_of(l)];
        if (pick < 0) return l;
    }
    return MiLabel::Other;
}

struct Coding {
    const char* main;
    const char* input_subtype;
    const char* reflection_subtype;
    const char* question_subtype;
};

Coding coding_for(MiLabel label, Rng& rng) {
    switch (label) {
        case MiLabel::SimpleReflection: return {"reflection", "", "simple", ""};
        case MiLabel::ComplexReflection: return {"reflection", "", "complex", ""};
        case MiLabel::OpenQuestion: return {"question", "", "", "open"};
        case MiLabel::ClosedQuestion: return {"question", "", "", "closed"};
        case MiLabel::GiveInformation: return {"therapist_input", "information", "", ""};
        case MiLabel::Advise: return {"therapist_input", "advice", "", ""};
        case MiLabel::Affirm: return {"other", "", "", ""};
        case MiLabel::Other:
            // Some Other turns are therapist_input subtypes outside the label set.
            return rng.below(3) == 0 ? Coding{"therapist_input", "negotiation", "", ""} : Coding{"other", "", "", ""};
    }
    return {"other", "", "", ""};
}

}  // namespace

std::vector<TranscriptPlan> annomi_layout() {
    Rng rng(20230501);
    std::vector<TranscriptPlan> plans;
    std::size_t client_first_sum = 0;
    std::vector<std::size_t> client_lengths;
    for (int i = 0; i < 17; ++i) {
        const std::size_t len = 20 + static_cast<std::size_t>(rng.below(21));
        client_lengths.push_back(len);
        client_first_sum += len / 2;
    }
    // Therapist-first transcripts contribute ceil(L/2) - 1 each.
    const std::size_t target = 4346 - client_first_sum;
    std::vector<std::size_t> ks(93);
    for (auto& k : ks) k = 30 + static_cast<std::size_t>(rng.below(31));
    std::size_t sum = std::accumulate(ks.begin(), ks.end(), std::size_t{0});
    for (std::size_t i = 0; sum != target; i = (i + 1) % ks.size()) {
        if (sum < target) {
            ++ks[i];
            ++sum;
        } else if (ks[i] > 30) {
            --ks[i];
            --sum;
        }
    }
    int next_id = 0;
    auto id = [&] { return "t" + std::to_string(next_id++); };
    std::size_t c = 0;
    std::size_t t = 0;
    // Interleave so client-first transcripts are spread through the file.
    for (int i = 0; i < 110; ++i) {
        if (i % 6 == 5 && c < client_lengths.size()) {
            plans.push_back({id(), true, false, client_lengths[c++]});
        } else if (t < ks.size()) {
            const std::size_t len = 2 * ks[t++] + 1 + static_cast<std::size_t>(rng.below(2));
            plans.push_back({id(), true, true, len});
        } else {
            plans.push_back({id(), true, false, client_lengths[c++]});
        }
    }
    for (int i = 0; i < 23; ++i) {
        plans.push_back({id(), false, rng.below(2) == 0, 10 + static_cast<std::size_t>(rng.below(40))});
    }
    return plans;
}

std::string annomi_csv(const std::vector<TranscriptPlan>& plans, std::uint64_t seed) {
    Rng rng(seed);
    std::string out =
        ",transcript_id,mi_quality,topic,utterance_id,interlocutor,timestamp,utterance_text,annotator_id,"
        "therapist_input_subtype,reflection_subtype,question_subtype,main_therapist_behaviour,client_talk_type\n";
    std::size_t row = 0;
    for (std::size_t p = 0; p < plans.size(); ++p) {
        const auto& plan = plans[p];
        std::optional<MiLabel> prev;
        const bool duplicated = p % 17 == 3;
        for (std::size_t i = 0; i < plan.length; ++i) {
            const bool therapist = (i % 2 == 0) == plan.therapist_first;
            std::string text = sentence(rng, 3, 14);
            Coding coding{"n/a", "", "", ""};
            if (therapist) {
                const MiLabel label = next_label(rng, prev);
                prev = label;
                coding = coding_for(label, rng);
                if (label == MiLabel::Affirm) text = "Well done, " + text;
            }
            auto emit = [&](const Coding& c, int annotator) {
                out += std::to_string(row++) + "," + plan.id + "," + (plan.high ? "high" : "low") +
                       ",reducing alcohol consumption," + std::to_string(i) + "," +
                       (therapist ? "therapist" : "client") + ",00:00:" + std::to_string(10 + i % 50) + "," +
                       csv_field(text) + "," + std::to_string(annotator) + "," + c.input_subtype + "," +
                       c.reflection_subtype + "," + c.question_subtype + "," + c.main + "," +
                       (therapist ? "n/a" : "neutral") + "\n";
            };
            emit(coding, 1);
            if (duplicated && therapist) emit(Coding{"question", "", "", "closed"}, 2);
        }
    }
    return out;
}

std::vector<ForecastExample> synthetic_forecast_examples(int window, bool insert_labels) {
    const auto transcripts = preprocess(parse_annomi(annomi_csv(annomi_layout(), 99)));
    ConversionConfig config;
    config.window = window;
    config.insert_labels = insert_labels;
    config.max_tokens = 100000;
    return convert(transcripts, config);
}

std::vector<Dialogue> kmi_replica() {
    Rng rng(1000);
    constexpr std::size_t kDialogues = 1000;
    std::vector<std::size_t> therapist(kDialogues);
    for (std::size_t i = 0; i < kDialogues; ++i) therapist[i] = i < 558 ? 10 : 9;
    for (int step = 0; step < 3000; ++step) {
        const auto a = rng.below(kDialogues);
        const auto b = rng.below(kDialogues);
        if (a == b || therapist[b] <= 3 || therapist[a] >= 16) continue;
        ++therapist[a];
        --therapist[b];
    }

    const std::array<std::size_t, kLabelCount> counts = {1269, 3055, 2305, 109, 914, 87, 43, 779};
    std::vector<std::optional<MiLabel>> pool;
    for (MiLabel l : kAllLabels) pool.insert(pool.end(), counts[index_of(l)], l);
    pool.insert(pool.end(), 997, std::nullopt);
    rng.shuffle(pool);

    const std::array<std::size_t, kCategoryCount> per_category = {200, 200, 200, 200, 100, 50, 50};
    std::vector<Dialogue> out;
    std::size_t next = 0;
    std::size_t category = 0;
    std::size_t in_category = 0;
    for (std::size_t i = 0; i < kDialogues; ++i) {
        if (in_category == per_category[category]) {
            ++category;
            in_category = 0;
        }
        ++in_category;
        Dialogue d;
        d.id = "kmi-" + std::to_string(i);
        d.category = kAllCategories[category];
        d.context = sentence(rng, 8, 20);
        d.provenance = Provenance::Ingested;
        for (std::size_t t = 0; t < therapist[i]; ++t) {
            if (t) d.turns.push_back({Interlocutor::Client, sentence(rng, 3, 12), std::nullopt});
            d.turns.push_back({Interlocutor::Therapist, sentence(rng, 3, 12), pool[next++]});
        }
        out.push_back(std::move(d));
    }
    return out;
}

std::vector<ContextPost> synthetic_posts(const std::array<std::size_t, kCategoryCount>& per_category,
                                         std::uint64_t seed, std::optional<int> score) {
    Rng rng(seed);
    std::vector<ContextPost> posts;
    for (Category c : kAllCategories) {
        for (std::size_t i = 0; i < per_category[index_of(c)]; ++i) {
            ContextPost p;
            p.id = std::string(machine_id(c)) + "-" + std::to_string(i);
            p.category = c;
            p.text = sentence(rng, 12, 30);
            p.score = score;
            posts.push_back(std::move(p));
        }
    }
    // Interleave categories the way a crawl would deliver them.
    rng.shuffle(posts);
    return posts;
}

SimulationRuntime mock_runtime() {
    static const std::shared_ptr<const Predictor> forecaster = fit_markov(synthetic_forecast_examples(6, true));
    auto rt = load_runtime_assets(assets_dir());
    rt.forecaster = forecaster;
    rt.translator = std::make_shared<IdentityTranslator>();
    rt.therapist_backend = ScriptedChatBackend::load(fixtures_dir() / "mock" / "therapist.jsonl");
    rt.client_backend = ScriptedChatBackend::load(fixtures_dir() / "mock" / "client.jsonl");
    return rt;
}

SimulationConfig mock_config() {
    SimulationConfig c;
    c.forecast_direction = {"en", "en"};
    c.seed = 7;
    return c;
}

}  // namespace misim::testing
