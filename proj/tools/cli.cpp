#include "cli.hpp"

#include "misim/context.hpp"
#include "misim/corpus.hpp"
#include "misim/dataset.hpp"
#include "misim/error.hpp"
#include "misim/evaluation.hpp"
#include "misim/forecaster.hpp"
#include "misim/gateway.hpp"
#include "misim/http.hpp"
#include "misim/server.hpp"
#include "misim/simulation.hpp"
#include "misim/util.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <set>
#include <thread>

#include <pthread.h>

namespace misim::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

class Manifest {
public:
    explicit Manifest(std::string_view subcommand) {
        doc_["subcommand"] = subcommand;
        doc_["version"] = MISIM_VERSION;
        doc_["config"] = ordered_json::object();
        doc_["inputs"] = ordered_json::array();
        doc_["outputs"] = ordered_json::array();
    }

    ordered_json& config() { return doc_["config"]; }

    void input(const fs::path& path) {
        doc_["inputs"].push_back({{"path", path.string()}, {"sha256", sha256_file(path)}});
    }
    void output(const fs::path& path) {
        doc_["outputs"].push_back({{"path", path.string()}, {"sha256", sha256_file(path)}});
    }

    // Written next to `primary` as <primary>.manifest.json.
    void write(const fs::path& primary) const {
        write_file(primary.string() + ".manifest.json", doc_.dump(2) + "\n");
    }

private:
    ordered_json doc_;
};

struct ForecasterFlags {
    std::string kind = "markov";
    fs::path train;
    double alpha = 1.0;
    std::string url;
    std::uint64_t seed = 0;

    void add(CLI::App* app) {
        app->add_option("--forecaster", kind, "Label forecaster: majority, markov, random or external")
            ->check(CLI::IsMember({"majority", "markov", "random", "external"}))
            ->capture_default_str();
        app->add_option("--train", train, "Forecast-example JSONL used to fit majority/markov forecasters")
            ->check(CLI::ExistingFile);
        app->add_option("--alpha", alpha, "Additive smoothing for the markov forecaster")->capture_default_str();
        app->add_option("--forecaster-url", url,
                        "Prediction endpoint for the external forecaster (key from MISIM_FORECASTER_API_KEY)");
    }

    std::shared_ptr<const Predictor> build() const {
        if (kind == "external") {
            if (url.empty()) throw Error(ErrorCode::InvalidArgument, "--forecaster-url is required for external");
            HttpPredictor::Options options;
            options.url = url;
            if (const char* key = std::getenv("MISIM_FORECASTER_API_KEY")) options.api_key = key;
            return std::make_shared<HttpPredictor>(std::move(options), make_http_transport());
        }
        if (kind == "random") return random_baseline(mix_seed(seed, "forecaster"), true);
        if (train.empty()) throw Error(ErrorCode::InvalidArgument, "--train is required for " + kind);
        const auto examples = read_forecast_examples(train);
        if (kind == "majority") return fit_majority(examples);
        return fit_markov(examples, alpha);
    }

    void record(Manifest& manifest) const {
        auto& c = manifest.config();
        c["forecaster"] = kind;
        if (kind == "markov") c["alpha"] = alpha;
        if (kind == "external") c["forecaster_url"] = url;
        if (!train.empty()) manifest.input(train);
    }
};

struct BackendFlags {
    fs::path therapist_script;
    fs::path client_script;
    fs::path translation_table;
    fs::path translate_script;
    fs::path credentials;

    void add(CLI::App* app, bool with_client) {
        app->add_option("--therapist-script", therapist_script,
                        "Scripted chat fixture (JSONL) replacing the LLM backend for therapist turns")
            ->check(CLI::ExistingFile);
        if (with_client) {
            app->add_option("--client-script", client_script,
                            "Scripted chat fixture (JSONL) replacing the LLM backend for client turns")
                ->check(CLI::ExistingFile);
        }
        app->add_option("--translation-table", translation_table,
                        "JSON object mapping source text to translated text")
            ->check(CLI::ExistingFile);
        app->add_option("--translate-script", translate_script,
                        "Scripted chat fixture (JSONL) used as the translation backend")
            ->check(CLI::ExistingFile);
        app->add_option("--credentials", credentials, "File whose first non-empty line is the API key")
            ->check(CLI::ExistingFile);
    }

    std::shared_ptr<ChatBackend> chat(const fs::path& script) const {
        if (!script.empty()) return ScriptedChatBackend::load(script);
        return std::make_shared<Gateway>(BackendConfig::from_env(kLlmEnvPrefix, credentials), make_http_transport());
    }

    std::shared_ptr<Translator> translator(const LanguagePair& direction) const {
        if (direction.same()) return std::make_shared<IdentityTranslator>();
        if (!translation_table.empty()) return TableTranslator::load(translation_table);
        if (!translate_script.empty()) {
            return std::make_shared<ChatTranslator>(ScriptedChatBackend::load(translate_script), std::string());
        }
        auto config = BackendConfig::from_env(kTranslateEnvPrefix, credentials);
        auto model = config.model_id;
        return std::make_shared<ChatTranslator>(std::make_shared<Gateway>(std::move(config), make_http_transport()),
                                                std::move(model));
    }

    void record(Manifest& manifest, bool with_client) const {
        auto& c = manifest.config();
        c["therapist_backend"] = therapist_script.empty() ? "gateway" : "scripted";
        if (with_client) c["client_backend"] = client_script.empty() ? "gateway" : "scripted";
        for (const auto* p : {&therapist_script, &client_script, &translation_table, &translate_script}) {
            if (!p->empty()) manifest.input(*p);
        }
    }
};

struct SimulationFlags {
    fs::path config_file;
    int window = 0;
    int max_turns = 0;
    std::string end_marker;
    std::string source_language;
    std::string forecast_language;
    std::string therapist_model;
    std::string client_model;
    double temperature = 0;
    int max_output_tokens = 0;
    CLI::Option* window_opt = nullptr;
    CLI::Option* turns_opt = nullptr;
    CLI::Option* marker_opt = nullptr;
    CLI::Option* source_opt = nullptr;
    CLI::Option* target_opt = nullptr;
    CLI::Option* tmodel_opt = nullptr;
    CLI::Option* cmodel_opt = nullptr;
    CLI::Option* temp_opt = nullptr;
    CLI::Option* tokens_opt = nullptr;

    void add(CLI::App* app) {
        app->add_option("--config", config_file, "Simulation config JSON; individual flags override it")
            ->check(CLI::ExistingFile);
        window_opt = app->add_option("--window", window, "Forecaster history window in utterances (default 6)");
        turns_opt = app->add_option("--max-therapist-turns", max_turns, "Therapist-turn cap per session (default 12)");
        marker_opt = app->add_option("--end-marker", end_marker, "Literal token that ends a session");
        source_opt = app->add_option("--source-language", source_language, "Session language (default ko)");
        target_opt = app->add_option("--forecast-language", forecast_language,
                                     "Forecaster language; translation is skipped when equal (default en)");
        tmodel_opt = app->add_option("--therapist-model", therapist_model, "Model id for therapist generation");
        cmodel_opt = app->add_option("--client-model", client_model, "Model id for client generation");
        temp_opt = app->add_option("--temperature", temperature, "Sampling temperature (default 0.7)");
        tokens_opt = app->add_option("--max-output-tokens", max_output_tokens, "Generation length cap (default 256)");
    }

    SimulationConfig resolve(std::uint64_t seed) const {
        SimulationConfig c = config_file.empty() ? SimulationConfig{}
                                                 : SimulationConfig::from_json_text(read_file(config_file));
        if (window_opt->count()) c.window = window;
        if (turns_opt->count()) c.max_therapist_turns = max_turns;
        if (marker_opt->count()) c.end_marker = end_marker;
        if (source_opt->count()) c.forecast_direction.source = source_language;
        if (target_opt->count()) c.forecast_direction.target = forecast_language;
        if (tmodel_opt->count()) c.therapist_model = therapist_model;
        if (cmodel_opt->count()) c.client_model = client_model;
        if (temp_opt->count()) c.temperature = temperature;
        if (tokens_opt->count()) c.max_output_tokens = max_output_tokens;
        c.seed = seed;
        c.validate();
        return c;
    }
};

int cmd_convert(const fs::path& input, const fs::path& output, const ConversionConfig& config,
                const fs::path& cues, std::ostream& out) {
    std::optional<LexiconAffirmClassifier> lexicon;
    if (!cues.empty()) lexicon = LexiconAffirmClassifier::load(cues);
    auto transcripts = preprocess(load_annomi(input), lexicon ? &*lexicon : nullptr);
    const auto examples = convert(transcripts, config);
    write_forecast_examples(output, examples);

    Manifest m("convert");
    m.config()["window"] = config.window;
    m.config()["insert_labels"] = config.insert_labels;
    m.config()["task_prefix"] = config.task_prefix;
    m.config()["max_tokens"] = config.max_tokens;
    m.config()["affirm_classifier"] = cues.empty() ? "lexicon:default" : "lexicon:file";
    m.input(input);
    if (!cues.empty()) m.input(cues);
    m.output(output);
    m.write(output);
    out << "transcripts: " << transcripts.size() << "\nrecords: " << examples.size() << "\n";
    return 0;
}

int cmd_cv(const fs::path& data, const std::string& predictor, double alpha, int folds, std::uint64_t seed,
           const std::vector<std::size_t>& ks, bool parallel, const fs::path& output, std::ostream& out) {
    const auto examples = read_forecast_examples(data);
    std::vector<std::string> ids;
    std::set<std::string> seen;
    for (const auto& e : examples) {
        if (seen.insert(e.transcript_id).second) ids.push_back(e.transcript_id);
    }
    const auto split = make_fold_split(ids, folds, seed);
    PredictorFactory factory;
    if (predictor == "majority") {
        factory = [](std::span<const ForecastExample> train) { return fit_majority(train); };
    } else if (predictor == "markov") {
        factory = [alpha](std::span<const ForecastExample> train) { return fit_markov(train, alpha); };
    } else {
        factory = [seed](std::span<const ForecastExample>) { return random_baseline(mix_seed(seed, "random")); };
    }
    CvOptions options;
    options.ks = ks;
    options.parallel = parallel;
    auto report = kfold_evaluate(factory, examples, split, options);
    report.predictor = predictor;
    const auto text = serialize_cv_report(report);
    if (output.empty()) {
        out << text;
        return 0;
    }
    write_file(output, text);
    Manifest m("cv");
    m.config()["predictor"] = predictor;
    if (predictor == "markov") m.config()["alpha"] = alpha;
    m.config()["folds"] = folds;
    m.config()["seed"] = seed;
    m.config()["k"] = ks;
    m.input(data);
    m.output(output);
    m.write(output);
    for (const auto& [k, s] : report.summary) {
        out << "top-" << k << ": " << fixed(100.0 * s.mean, 2) << " +/- " << fixed(100.0 * s.half_width, 2) << "\n";
    }
    return 0;
}

void write_text_output(const fs::path& output, const std::string& text, std::ostream& out) {
    if (output.empty()) {
        out << text;
    } else {
        write_file(output, text);
    }
}

std::string aggregate_report(const std::vector<LikertRating>& ratings, const std::vector<LikertRating>& against,
                             const std::string& criterion, AggregationRule rule, double alpha, bool compare) {
    auto items_for = [](const std::vector<LikertRating>& rs, const std::string& c) {
        std::set<std::string> ids;
        for (const auto& r : rs) {
            if (r.criterion == c) ids.insert(r.dialogue_id);
        }
        return std::vector<std::string>(ids.begin(), ids.end());
    };
    std::vector<std::string> criteria;
    if (!criterion.empty()) {
        criteria.push_back(criterion);
    } else {
        for (auto id : kCriterionIds) criteria.emplace_back(id);
    }
    ordered_json list = ordered_json::array();
    for (const auto& c : criteria) {
        const auto items = items_for(ratings, c);
        if (items.empty()) continue;
        const auto agg = aggregate_dataset(ratings, c, items, rule);
        ordered_json row;
        row["criterion"] = c;
        row["items"] = items.size();
        row["mean"] = agg.mean_text;
        if (compare) {
            const auto other_items = items_for(against, c);
            if (other_items.empty()) {
                row["against"] = nullptr;
            } else {
                const auto other = aggregate_dataset(against, c, other_items, rule);
                std::vector<double> a;
                std::vector<double> b;
                for (const auto& [id, v] : agg.per_item) a.push_back(v);
                for (const auto& [id, v] : other.per_item) b.push_back(v);
                ordered_json cmp;
                cmp["items"] = other_items.size();
                cmp["mean"] = other.mean_text;
                try {
                    const auto sig = pairwise_significance(a, b, alpha);
                    cmp["u"] = sig.u;
                    cmp["p"] = sig.p;
                    cmp["exact"] = sig.exact;
                    cmp["significant"] = sig.significant;
                } catch (const Error& e) {
                    if (e.code() != ErrorCode::DegenerateSamples && e.code() != ErrorCode::InvalidArgument) throw;
                    cmp["p"] = nullptr;
                    cmp["note"] = error_code_name(e.code());
                }
                row["against"] = std::move(cmp);
            }
        }
        list.push_back(std::move(row));
    }
    ordered_json doc;
    doc["rule"] = rule == AggregationRule::Median ? "median" : "majority-median";
    doc["criteria"] = std::move(list);
    return doc.dump(2) + "\n";
}

// Rewrites `path` so records follow `order`; records whose key is not in
// `order` keep their relative position at the end.
template <typename KeyOf>
void reorder_lines(const fs::path& path, const std::vector<std::string>& order, KeyOf key_of) {
    if (!fs::exists(path)) return;
    std::map<std::string, std::string> by_key;
    std::vector<std::string> unknown;
    std::set<std::string> wanted(order.begin(), order.end());
    for (const auto& line : read_nonempty_lines(path)) {
        const auto key = key_of(line.text);
        if (wanted.count(key)) {
            by_key[key] = line.text;
        } else {
            unknown.push_back(line.text);
        }
    }
    std::string text;
    for (const auto& k : order) {
        if (auto it = by_key.find(k); it != by_key.end()) text += it->second + "\n";
    }
    for (const auto& l : unknown) text += l + "\n";
    write_file(path, text);
}

std::string json_key(const std::string& line, const char* field) {
    try {
        return json::parse(line).value(field, std::string());
    } catch (const json::exception&) {
        return {};
    }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Motivational-interviewing dialogue simulation toolkit", "misim"};
    app.require_subcommand(1);
    app.set_version_flag("--version", MISIM_VERSION);

    // convert
    auto* convert_cmd = app.add_subcommand("convert", "Turn an AnnoMI CSV into forecast-example JSONL");
    fs::path conv_input, conv_output, conv_cues;
    ConversionConfig conv;
    convert_cmd->add_option("--input", conv_input, "AnnoMI CSV file")->required()->check(CLI::ExistingFile);
    convert_cmd->add_option("--output", conv_output, "Output JSONL of {input, target, transcript_id, turn_index}")
        ->required();
    convert_cmd->add_option("--window", conv.window, "Number of history utterances per example")
        ->capture_default_str();
    convert_cmd->add_flag("--insert-labels,!--no-labels", conv.insert_labels,
                          "Tag therapist history utterances with their label (default on)");
    convert_cmd->add_option("--prefix", conv.task_prefix, "Task prefix prepended to every input")
        ->capture_default_str();
    convert_cmd->add_option("--max-tokens", conv.max_tokens, "Left-truncate inputs longer than this many tokens")
        ->capture_default_str();
    convert_cmd->add_option("--affirm-cues", conv_cues,
                            "Cue list (one per line) for recovering Affirm from unlabeled therapist turns")
        ->check(CLI::ExistingFile);

    // cv
    auto* cv_cmd = app.add_subcommand("cv", "Cross-validate a forecaster baseline with transcript-level folds");
    fs::path cv_data, cv_output;
    std::string cv_predictor = "majority";
    double cv_alpha = 1.0;
    int cv_folds = 5;
    std::uint64_t cv_seed = 0;
    std::vector<std::size_t> cv_ks{1, 3};
    bool cv_parallel = false;
    cv_cmd->add_option("--data", cv_data, "Forecast-example JSONL from convert")->required()->check(CLI::ExistingFile);
    cv_cmd->add_option("--predictor", cv_predictor, "majority, markov or random")
        ->check(CLI::IsMember({"majority", "markov", "random"}))
        ->capture_default_str();
    cv_cmd->add_option("--alpha", cv_alpha, "Additive smoothing for markov")->capture_default_str();
    cv_cmd->add_option("--folds", cv_folds, "Number of folds")->capture_default_str();
    cv_cmd->add_option("--seed", cv_seed, "Seed for the fold assignment and random predictor")->capture_default_str();
    cv_cmd->add_option("--k", cv_ks, "Top-k values to score")->delimiter(',')->capture_default_str();
    cv_cmd->add_flag("--parallel", cv_parallel, "Evaluate folds concurrently");
    cv_cmd->add_option("--output", cv_output, "Write the fold/summary JSONL here instead of stdout");

    // score-contexts
    auto* score_cmd = app.add_subcommand("score-contexts", "Score context posts 1-3 for MI suitability with an LLM");
    fs::path score_input, score_output, score_prompt, score_script, score_credentials, score_assets;
    ScoringOptions score_opts;
    score_cmd->add_option("--input", score_input, "Context post JSONL")->required()->check(CLI::ExistingFile);
    score_cmd->add_option("--output", score_output, "Scored post JSONL")->required();
    score_cmd->add_option("--prompt", score_prompt, "Scoring prompt template with a {post} placeholder")
        ->check(CLI::ExistingFile);
    score_cmd->add_option("--assets", score_assets, "Asset directory holding the default prompt");
    score_cmd->add_option("--model", score_opts.model_id, "Model id sent to the backend");
    score_cmd->add_option("--parallel", score_opts.parallel, "Concurrent scoring requests")->capture_default_str();
    score_cmd->add_option("--script", score_script, "Scripted chat fixture replacing the LLM backend")
        ->check(CLI::ExistingFile);
    score_cmd->add_option("--credentials", score_credentials, "File whose first non-empty line is the API key")
        ->check(CLI::ExistingFile);

    // sample-contexts
    auto* sample_ctx_cmd = app.add_subcommand("sample-contexts", "Category-stratified sample of scored contexts");
    fs::path sc_input, sc_output;
    std::string sc_quota = "generation";
    int sc_threshold = 3;
    bool sc_unscored = false;
    std::uint64_t sc_seed = 0;
    sample_ctx_cmd->add_option("--input", sc_input, "Context post JSONL")->required()->check(CLI::ExistingFile);
    sample_ctx_cmd->add_option("--output", sc_output, "Sampled post JSONL")->required();
    sample_ctx_cmd->add_option("--quota", sc_quota,
                               "generation, evaluation, seven comma-separated counts, or category=count pairs")
        ->capture_default_str();
    sample_ctx_cmd->add_option("--threshold", sc_threshold, "Minimum suitability score kept")->capture_default_str();
    sample_ctx_cmd->add_flag("--unscored", sc_unscored, "Skip the score filter (posts need not be scored)");
    sample_ctx_cmd->add_option("--seed", sc_seed, "Sampling seed")->capture_default_str();

    // simulate
    auto* sim_cmd = app.add_subcommand("simulate", "Run a batch of simulated counseling sessions");
    fs::path sim_contexts, sim_output, sim_traces, sim_assets;
    int sim_parallel = 1;
    bool sim_fresh = false;
    std::uint64_t sim_seed = 0;
    bool sim_unscored = false;
    ForecasterFlags sim_forecaster;
    BackendFlags sim_backends;
    SimulationFlags sim_flags;
    sim_cmd->add_option("--contexts", sim_contexts, "Context post JSONL, one session per post")
        ->required()
        ->check(CLI::ExistingFile);
    sim_cmd->add_option("--output", sim_output, "Dialogue JSONL (appended as sessions finish)")->required();
    sim_cmd->add_option("--traces", sim_traces, "Per-session trace JSONL (default <output>.traces.jsonl)");
    sim_cmd->add_option("--assets", sim_assets, "Asset directory with example_bank.json, templates/, openings");
    sim_cmd->add_option("--parallel", sim_parallel, "Concurrent sessions")->capture_default_str();
    sim_cmd->add_flag("--fresh", sim_fresh, "Discard existing output instead of resuming");
    sim_cmd->add_option("--seed", sim_seed, "Seed for opening questions and the random forecaster")
        ->capture_default_str();
    sim_cmd->add_flag("--allow-unscored", sim_unscored, "Accept contexts without a suitability score of 3");
    sim_forecaster.add(sim_cmd);
    sim_backends.add(sim_cmd, true);
    sim_flags.add(sim_cmd);

    // stats
    auto* stats_cmd = app.add_subcommand("stats", "Corpus statistics: turns, label counts, R:Q ratio");
    fs::path stats_input, stats_mapping, stats_output;
    bool stats_json = false;
    stats_cmd->add_option("--input", stats_input, "Dialogue JSONL, or any corpus with --mapping")
        ->required()
        ->check(CLI::ExistingFile);
    stats_cmd->add_option("--mapping", stats_mapping, "Field mapping JSON for external corpora")
        ->check(CLI::ExistingFile);
    stats_cmd->add_flag("--json", stats_json, "Emit JSON instead of a table");
    stats_cmd->add_option("--output", stats_output, "Write the report here instead of stdout");

    // sample-eval
    auto* sample_eval_cmd = app.add_subcommand("sample-eval", "Category-stratified dialogue sample for expert rating");
    fs::path se_input, se_output;
    std::string se_quota = "evaluation";
    std::uint64_t se_seed = 0;
    sample_eval_cmd->add_option("--input", se_input, "Dialogue JSONL")->required()->check(CLI::ExistingFile);
    sample_eval_cmd->add_option("--output", se_output, "Sampled dialogue JSONL")->required();
    sample_eval_cmd->add_option("--quota", se_quota,
                                "evaluation, generation, seven comma-separated counts, or category=count pairs")
        ->capture_default_str();
    sample_eval_cmd->add_option("--seed", se_seed, "Sampling seed")->capture_default_str();

    // aggregate
    auto* agg_cmd = app.add_subcommand("aggregate", "Aggregate Likert ratings per criterion");
    fs::path agg_ratings, agg_against, agg_output;
    std::string agg_criterion;
    std::string agg_rule = "majority-median";
    double agg_alpha = 0.01;
    agg_cmd->add_option("--ratings", agg_ratings, "Rating JSONL (flat or submission lines)")
        ->required()
        ->check(CLI::ExistingFile);
    agg_cmd->add_option("--against", agg_against, "Second rating file compared per criterion (Mann-Whitney U)")
        ->check(CLI::ExistingFile);
    agg_cmd->add_option("--criterion", agg_criterion, "Restrict to one criterion id");
    agg_cmd->add_option("--rule", agg_rule, "majority-median or median")->capture_default_str();
    agg_cmd->add_option("--alpha", agg_alpha, "Significance level for --against")->capture_default_str();
    agg_cmd->add_option("--output", agg_output, "Write the JSON report here instead of stdout");

    // label-audit
    auto* audit_cmd = app.add_subcommand("label-audit", "Sample utterances per label, or score rater judgments");
    fs::path audit_dialogues, audit_judgments, audit_output;
    UtteranceSampling audit_sampling;
    std::uint64_t audit_seed = 0;
    bool audit_json = false;
    auto* audit_d = audit_cmd->add_option("--dialogues", audit_dialogues, "Dialogue JSONL to sample from")
                        ->check(CLI::ExistingFile);
    auto* audit_j = audit_cmd->add_option("--judgments", audit_judgments, "Judgment JSONL to score")
                        ->check(CLI::ExistingFile);
    audit_d->excludes(audit_j);
    audit_cmd->add_option("--per-label", audit_sampling.per_label, "Utterances sampled per label")
        ->capture_default_str();
    audit_cmd->add_flag("--include-other", audit_sampling.include_other, "Also sample the Other label");
    audit_cmd->add_option("--seed", audit_seed, "Sampling seed")->capture_default_str();
    audit_cmd->add_flag("--json", audit_json, "Emit the accuracy report as JSON");
    audit_cmd->add_option("--output", audit_output, "Output file (required with --dialogues)");

    // export-finetune
    auto* ft_cmd = app.add_subcommand("export-finetune", "Export dialogues as next-therapist-turn training pairs");
    fs::path ft_input, ft_output;
    FinetuneFormat ft_format;
    ft_cmd->add_option("--input", ft_input, "Dialogue JSONL")->required()->check(CLI::ExistingFile);
    ft_cmd->add_option("--output", ft_output, "Output JSONL of {dialogue_id, turn_index, input, output}")->required();
    ft_cmd->add_option("--preamble", ft_format.preamble, "Instruction text placed before the history");

    // serve
    auto* serve_cmd = app.add_subcommand("serve", "HTTP API for interactive sessions and expert ratings");
    std::string serve_host = "127.0.0.1";
    int serve_port = 8080;
    fs::path serve_contexts, serve_assets, serve_persist, serve_ui;
    int serve_ttl = 1800;
    std::uint64_t serve_seed = 0;
    ForecasterFlags serve_forecaster;
    BackendFlags serve_backends;
    SimulationFlags serve_flags;
    serve_cmd->add_option("--host", serve_host, "Bind address")->capture_default_str();
    serve_cmd->add_option("--port", serve_port, "Bind port (0 picks a free one)")->capture_default_str();
    serve_cmd->add_option("--contexts", serve_contexts, "Context post JSONL offered by /api/contexts")
        ->check(CLI::ExistingFile);
    serve_cmd->add_option("--assets", serve_assets, "Asset directory (bank, templates, openings, rubric)");
    serve_cmd->add_option("--persist-dir", serve_persist, "Directory for dialogues, traces and evaluations");
    serve_cmd->add_option("--ui-dir", serve_ui, "Static files served at /")->check(CLI::ExistingDirectory);
    serve_cmd->add_option("--idle-ttl", serve_ttl, "Seconds before an idle session is closed")
        ->capture_default_str();
    serve_cmd->add_option("--seed", serve_seed, "Seed for opening questions")->capture_default_str();
    serve_forecaster.add(serve_cmd);
    serve_backends.add(serve_cmd, false);
    serve_flags.add(serve_cmd);

    std::vector<std::string> argv_store;
    argv_store.reserve(args.size() + 1);
    argv_store.emplace_back("misim");
    for (const auto& a : args) argv_store.push_back(a);
    std::vector<char*> argv;
    for (auto& a : argv_store) argv.push_back(a.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: usage: " << e.what() << "\n";
        return 2;
    }

    try {
        if (convert_cmd->parsed()) return cmd_convert(conv_input, conv_output, conv, conv_cues, out);

        if (cv_cmd->parsed()) {
            return cmd_cv(cv_data, cv_predictor, cv_alpha, cv_folds, cv_seed, cv_ks, cv_parallel, cv_output, out);
        }

        if (score_cmd->parsed()) {
            const auto prompt = score_prompt.empty() ? ScoringPrompt::load_default(score_assets)
                                                     : ScoringPrompt::load(score_prompt);
            std::shared_ptr<ChatBackend> backend;
            if (!score_script.empty()) {
                backend = ScriptedChatBackend::load(score_script);
            } else {
                auto config = BackendConfig::from_env(kLlmEnvPrefix, score_credentials);
                if (score_opts.model_id.empty()) score_opts.model_id = config.model_id;
                backend = std::make_shared<Gateway>(std::move(config), make_http_transport());
            }
            const auto posts = read_posts(score_input);
            const auto scored = score_posts(posts, *backend, prompt, score_opts);
            write_posts(score_output, scored);
            Manifest m("score-contexts");
            m.config()["model"] = score_opts.model_id;
            m.config()["temperature"] = score_opts.temperature;
            m.config()["max_output_tokens"] = score_opts.max_output_tokens;
            m.config()["backend"] = score_script.empty() ? "gateway" : "scripted";
            m.config()["prompt_sha256"] = sha256_hex(prompt.text());
            m.input(score_input);
            if (!score_script.empty()) m.input(score_script);
            m.output(score_output);
            m.write(score_output);
            std::array<std::size_t, 3> hist{};
            for (const auto& p : scored) ++hist[static_cast<std::size_t>(*p.score - 1)];
            out << "scored: " << scored.size() << " (1: " << hist[0] << ", 2: " << hist[1] << ", 3: " << hist[2]
                << ")\n";
            return 0;
        }

        if (sample_ctx_cmd->parsed()) {
            auto posts = read_posts(sc_input);
            if (!sc_unscored) posts = filter_by_score(posts, sc_threshold);
            const auto quota = SamplingQuota::parse(sc_quota);
            const auto sample = stratified_sample(posts, quota, sc_seed);
            write_posts(sc_output, sample);
            Manifest m("sample-contexts");
            m.config()["quota"] = quota.per_category;
            m.config()["threshold"] = sc_unscored ? json(nullptr) : json(sc_threshold);
            m.config()["seed"] = sc_seed;
            m.input(sc_input);
            m.output(sc_output);
            m.write(sc_output);
            out << "sampled: " << sample.size() << "\n";
            return 0;
        }

        if (sim_cmd->parsed()) {
            auto config = sim_flags.resolve(sim_seed);
            if (sim_unscored) config.allow_unscored_context = true;
            sim_forecaster.seed = sim_seed;
            auto runtime = load_runtime_assets(sim_assets);
            runtime.forecaster = sim_forecaster.build();
            runtime.therapist_backend = sim_backends.chat(sim_backends.therapist_script);
            runtime.client_backend = sim_backends.chat(sim_backends.client_script);
            runtime.translator = sim_backends.translator(config.forecast_direction);
            runtime.validate();

            const fs::path traces = sim_traces.empty() ? fs::path(sim_output.string() + ".traces.jsonl") : sim_traces;
            if (sim_fresh) {
                fs::remove(sim_output);
                fs::remove(traces);
            }
            const auto contexts = read_posts(sim_contexts);
            std::set<std::string> done;
            if (fs::exists(sim_output)) {
                for (const auto& d : read_dialogues(sim_output)) done.insert(d.id);
            }
            std::vector<ContextPost> pending;
            std::vector<std::string> order;
            for (const auto& c : contexts) {
                order.push_back(c.id);
                if (!done.count(c.id)) pending.push_back(c);
            }
            std::size_t violations = 0;
            run_batch(pending, config, runtime, sim_parallel, [&](std::size_t, const SessionState& s) {
                const auto dialogue = to_dialogue(s);
                for (const auto& problem : check_dialogue_invariants(dialogue)) {
                    err << "warning: " << dialogue.id << ": " << problem << "\n";
                    ++violations;
                }
                append_line(sim_output, serialize_dialogue(dialogue));
                append_line(traces, serialize_trace(s));
            });
            if (!fs::exists(sim_output)) write_file(sim_output, "");
            if (!fs::exists(traces)) write_file(traces, "");
            reorder_lines(sim_output, order, [](const std::string& l) { return json_key(l, "id"); });
            reorder_lines(traces, order, [](const std::string& l) { return json_key(l, "session_id"); });

            Manifest m("simulate");
            m.config() = ordered_json::parse(config.to_json());
            m.config()["parallel"] = sim_parallel;
            sim_forecaster.record(m);
            sim_backends.record(m, true);
            m.config()["assets"] = resolve_assets_dir(sim_assets).string();
            m.input(sim_contexts);
            m.output(sim_output);
            m.output(traces);
            m.write(sim_output);
            out << "sessions: " << order.size() << " (new " << pending.size() << ", resumed " << done.size()
                << ")\n";
            if (violations) throw Error(ErrorCode::SchemaViolation, std::to_string(violations) + " invariant violations");
            return 0;
        }

        if (stats_cmd->parsed()) {
            const auto dialogues = stats_mapping.empty()
                                       ? read_dialogues(stats_input)
                                       : ingest_corpus(stats_input, CorpusMapping::load(stats_mapping));
            const auto stats = compute_stats(dialogues);
            write_text_output(stats_output, stats_json ? format_stats_json(stats) : format_stats_table(stats), out);
            if (!stats_output.empty()) {
                Manifest m("stats");
                m.config()["format"] = stats_json ? "json" : "table";
                m.input(stats_input);
                if (!stats_mapping.empty()) m.input(stats_mapping);
                m.output(stats_output);
                m.write(stats_output);
            }
            return 0;
        }

        if (sample_eval_cmd->parsed()) {
            const auto dialogues = read_dialogues(se_input);
            const auto quota = SamplingQuota::parse(se_quota);
            const auto sample = sample_for_eval(dialogues, quota, se_seed);
            write_dialogues(se_output, sample);
            Manifest m("sample-eval");
            m.config()["quota"] = quota.per_category;
            m.config()["seed"] = se_seed;
            m.input(se_input);
            m.output(se_output);
            m.write(se_output);
            out << "sampled: " << sample.size() << "\n";
            return 0;
        }

        if (agg_cmd->parsed()) {
            const auto rule = parse_aggregation_rule(agg_rule);
            const auto ratings = read_ratings(agg_ratings);
            std::vector<LikertRating> against;
            if (!agg_against.empty()) against = read_ratings(agg_against);
            if (!agg_criterion.empty() &&
                std::find(kCriterionIds.begin(), kCriterionIds.end(), agg_criterion) == kCriterionIds.end()) {
                throw Error(ErrorCode::InvalidArgument, "unknown criterion '" + agg_criterion + "'");
            }
            const auto text =
                aggregate_report(ratings, against, agg_criterion, rule, agg_alpha, !agg_against.empty());
            write_text_output(agg_output, text, out);
            if (!agg_output.empty()) {
                Manifest m("aggregate");
                m.config()["rule"] = agg_rule;
                m.config()["criterion"] = agg_criterion;
                m.config()["alpha"] = agg_alpha;
                m.input(agg_ratings);
                if (!agg_against.empty()) m.input(agg_against);
                m.output(agg_output);
                m.write(agg_output);
            }
            return 0;
        }

        if (audit_cmd->parsed()) {
            if (!audit_dialogues.empty()) {
                if (audit_output.empty()) throw Error(ErrorCode::InvalidArgument, "--output is required with --dialogues");
                const auto dialogues = read_dialogues(audit_dialogues);
                const auto items = sample_utterances_by_label(dialogues, audit_sampling, audit_seed);
                write_file(audit_output, serialize_sampled_utterances(items));
                Manifest m("label-audit");
                m.config()["per_label"] = audit_sampling.per_label;
                m.config()["include_other"] = audit_sampling.include_other;
                m.config()["seed"] = audit_seed;
                m.input(audit_dialogues);
                m.output(audit_output);
                m.write(audit_output);
                out << "sampled: " << items.size() << "\n";
                return 0;
            }
            if (audit_judgments.empty()) {
                throw Error(ErrorCode::InvalidArgument, "one of --dialogues or --judgments is required");
            }
            const auto report = label_accuracy(read_judgments(audit_judgments));
            write_text_output(audit_output, audit_json ? report.to_json() : report.to_table(), out);
            return 0;
        }

        if (ft_cmd->parsed()) {
            const auto dialogues = read_dialogues(ft_input);
            const auto records = export_finetune(dialogues, ft_format);
            write_file(ft_output, serialize_finetune(records));
            Manifest m("export-finetune");
            m.config()["preamble"] = ft_format.preamble;
            m.config()["therapist_prefix"] = ft_format.therapist_prefix;
            m.config()["client_prefix"] = ft_format.client_prefix;
            m.input(ft_input);
            m.output(ft_output);
            m.write(ft_output);
            out << "records: " << records.size() << "\n";
            return 0;
        }

        if (serve_cmd->parsed()) {
            ServerOptions options;
            options.host = serve_host;
            options.port = serve_port;
            options.persist_dir = serve_persist;
            options.ui_dir = serve_ui;
            options.idle_ttl = std::chrono::seconds(serve_ttl);
            options.session_defaults = serve_flags.resolve(serve_seed);
            serve_forecaster.seed = serve_seed;
            auto runtime = load_runtime_assets(serve_assets);
            runtime.forecaster = serve_forecaster.build();
            runtime.therapist_backend = serve_backends.chat(serve_backends.therapist_script);
            runtime.client_backend = runtime.therapist_backend;
            runtime.translator = serve_backends.translator(options.session_defaults.forecast_direction);
            std::vector<ContextPost> contexts;
            if (!serve_contexts.empty()) contexts = read_posts(serve_contexts);
            auto service = std::make_shared<SessionService>(std::move(runtime), std::move(contexts),
                                                            Rubric::load_default(serve_assets), options);
            sigset_t stop_signals;
            sigemptyset(&stop_signals);
            sigaddset(&stop_signals, SIGINT);
            sigaddset(&stop_signals, SIGTERM);
            pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);
            ApiServer server(service);
            const int port = server.bind();
            out << "listening on http://" << serve_host << ":" << port << std::endl;
            std::thread waiter([&server, stop_signals] {
                int sig = 0;
                sigwait(&stop_signals, &sig);
                server.stop();
            });
            server.run();
            pthread_kill(waiter.native_handle(), SIGTERM);
            waiter.join();
            pthread_sigmask(SIG_UNBLOCK, &stop_signals, nullptr);
            return 0;
        }
    } catch (const Error& e) {
        err << "error: " << error_code_name(e.code()) << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: internal: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

int run(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace misim::cli
