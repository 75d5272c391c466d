#include "misim/corpus.hpp"

#include "misim/error.hpp"
#include "misim/util.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

namespace misim {

using nlohmann::json;

std::string_view interlocutor_name(Interlocutor who) noexcept {
    return who == Interlocutor::Therapist ? "therapist" : "client";
}

namespace {

constexpr std::array<std::string_view, 5> kRequiredColumns = {
    "transcript_id", "mi_quality", "interlocutor", "utterance_text", "main_therapist_behaviour",
};

std::string dump_line(const json& record) {
    return record.dump(-1, ' ', false, json::error_handler_t::replace);
}

// Refines a coarse AnnoMI-full code with its subtype column, if any.
std::string refine_behavior(const std::string& main, const std::string& reflection_subtype,
                            const std::string& question_subtype, const std::string& input_subtype) {
    const std::string code = to_lower_ascii(trim(main));
    auto with = [](std::string_view head, const std::string& subtype) {
        const std::string sub = to_lower_ascii(trim(subtype));
        if (sub.empty() || sub == "n/a" || sub == "nan") return std::string(head);
        return std::string(head) + "_" + sub;
    };
    if (code == "reflection") return with("reflection", reflection_subtype);
    if (code == "question") return with("question", question_subtype);
    if (code == "therapist_input") return with("input", input_subtype);
    return code;
}

}  // namespace

std::vector<Transcript> parse_annomi(std::string_view content) {
    const auto header_end = content.find('\n');
    const char delimiter = sniff_delimiter(content.substr(0, header_end));
    auto rows = parse_delimited(content, delimiter);
    if (rows.empty()) {
        throw Error(ErrorCode::MissingColumn, "AnnoMI file has no header row");
    }

    const auto& header = rows.front().fields;
    std::unordered_map<std::string, std::size_t> column;
    for (std::size_t i = 0; i < header.size(); ++i) {
        std::string name = trim(header[i]);
        // tolerate a UTF-8 byte-order mark on the first column
        if (i == 0 && starts_with(name, "\xEF\xBB\xBF")) name.erase(0, 3);
        column.emplace(std::move(name), i);
    }
    for (auto required : kRequiredColumns) {
        if (!column.count(std::string(required))) {
            throw Error(ErrorCode::MissingColumn, "AnnoMI file lacks column '" + std::string(required) + "'");
        }
    }
    auto optional_column = [&](const char* name) -> std::optional<std::size_t> {
        auto it = column.find(name);
        if (it == column.end()) return std::nullopt;
        return it->second;
    };
    const auto col_id = column.at("transcript_id");
    const auto col_quality = column.at("mi_quality");
    const auto col_speaker = column.at("interlocutor");
    const auto col_text = column.at("utterance_text");
    const auto col_main = column.at("main_therapist_behaviour");
    const auto col_utt = optional_column("utterance_id");
    const auto col_refl = optional_column("reflection_subtype");
    const auto col_quest = optional_column("question_subtype");
    const auto col_input = optional_column("therapist_input_subtype");

    std::vector<Transcript> transcripts;
    std::unordered_map<std::string, std::size_t> by_id;
    std::set<std::pair<std::string, std::string>> seen_utterances;

    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (row.fields.size() != header.size()) {
            throw MalformedRow(row.line, "expected " + std::to_string(header.size()) + " fields, found " +
                                             std::to_string(row.fields.size()));
        }
        const auto& f = row.fields;
        const std::string id = trim(f[col_id]);
        if (id.empty()) throw MalformedRow(row.line, "empty transcript_id");

        if (col_utt) {
            const std::string utt = trim(f[*col_utt]);
            if (!utt.empty() && !seen_utterances.emplace(id, utt).second) {
                continue;  // repeated annotation of the same utterance
            }
        }

        const std::string quality = to_lower_ascii(trim(f[col_quality]));
        SessionQuality q;
        if (quality == "high") {
            q = SessionQuality::High;
        } else if (quality == "low") {
            q = SessionQuality::Low;
        } else {
            throw MalformedRow(row.line, "unknown mi_quality '" + f[col_quality] + "'");
        }

        const std::string speaker = to_lower_ascii(trim(f[col_speaker]));
        TranscriptTurn turn;
        if (speaker == "therapist") {
            turn.speaker = Interlocutor::Therapist;
            turn.source_behavior =
                refine_behavior(f[col_main], col_refl ? f[*col_refl] : std::string(),
                                col_quest ? f[*col_quest] : std::string(), col_input ? f[*col_input] : std::string());
        } else if (speaker == "client") {
            turn.speaker = Interlocutor::Client;
        } else {
            throw MalformedRow(row.line, "unknown interlocutor '" + f[col_speaker] + "'");
        }
        turn.text = f[col_text];

        auto [it, inserted] = by_id.emplace(id, transcripts.size());
        if (inserted) {
            transcripts.push_back(Transcript{id, q, {}});
        } else if (transcripts[it->second].quality != q) {
            throw MalformedRow(row.line, "mi_quality changes within transcript " + id);
        }
        transcripts[it->second].turns.push_back(std::move(turn));
    }
    return transcripts;
}

std::vector<Transcript> load_annomi(const std::filesystem::path& path) {
    return parse_annomi(read_file(path));
}

std::optional<MiLabel> annomi_label(std::string_view source_behavior) noexcept {
    const std::string code = to_lower_ascii(trim(source_behavior));
    for (MiLabel label : kAllLabels) {
        if (auto name = corpus_name(label); name && *name == code) return label;
    }
    return std::nullopt;
}

LexiconAffirmClassifier::LexiconAffirmClassifier() : LexiconAffirmClassifier(default_cues()) {}

LexiconAffirmClassifier::LexiconAffirmClassifier(std::vector<std::string> cues) {
    for (auto& cue : cues) {
        std::string folded = to_lower_ascii(trim(cue));
        if (!folded.empty()) cues_.push_back(std::move(folded));
    }
}

LexiconAffirmClassifier LexiconAffirmClassifier::load(const std::filesystem::path& path) {
    std::vector<std::string> cues;
    for (auto& line : read_nonempty_lines(path)) {
        std::string cue = trim(line.text);
        if (cue.empty() || cue.front() == '#') continue;
        cues.push_back(std::move(cue));
    }
    return LexiconAffirmClassifier(std::move(cues));
}

std::vector<std::string> LexiconAffirmClassifier::default_cues() {
    return {
        "good job",      "great job",    "well done",   "good for you", "proud of you",
        "you should be proud", "impressive", "i admire",   "admirable",    "commend",
        "congratulations", "that's great", "that is great", "you've done a great",
        "you have done a great", "courage",  "that took a lot", "really appreciate",
        "you're doing great", "you are doing great", "strength",
    };
}

bool LexiconAffirmClassifier::is_affirm(std::string_view utterance) const {
    const std::string text = to_lower_ascii(utterance);
    return std::any_of(cues_.begin(), cues_.end(),
                       [&](const std::string& cue) { return text.find(cue) != std::string::npos; });
}

HttpAffirmClassifier::HttpAffirmClassifier(std::string url, std::shared_ptr<HttpTransport> transport,
                                           std::chrono::milliseconds timeout)
    : url_(std::move(url)), transport_(std::move(transport)), timeout_(timeout) {}

bool HttpAffirmClassifier::is_affirm(std::string_view utterance) const {
    HttpResponse response;
    try {
        response = transport_->post_json(url_, {}, dump_line(json{{"text", utterance}}), timeout_);
    } catch (const TransportError& e) {
        throw Error(ErrorCode::ClassifierUnavailable, std::string("affirm classifier unreachable: ") + e.what());
    }
    if (response.status < 200 || response.status >= 300) {
        throw Error(ErrorCode::ClassifierUnavailable,
                    "affirm classifier returned status " + std::to_string(response.status));
    }
    try {
        const auto body = json::parse(response.body);
        if (body.contains("is_affirm")) return body.at("is_affirm").get<bool>();
        return try_parse_label(body.at("label").get<std::string>()) == MiLabel::Affirm;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ClassifierUnavailable, std::string("affirm classifier reply unreadable: ") + e.what());
    }
}

std::vector<Transcript> preprocess(std::vector<Transcript> transcripts, const AffirmClassifier* classifier) {
    const LexiconAffirmClassifier fallback;
    const AffirmClassifier& affirm = classifier ? *classifier : fallback;

    std::vector<Transcript> kept;
    kept.reserve(transcripts.size());
    for (auto& transcript : transcripts) {
        if (transcript.quality != SessionQuality::High) continue;
        for (auto& turn : transcript.turns) {
            if (turn.speaker == Interlocutor::Client) {
                turn.behavior.reset();
                continue;
            }
            if (auto label = annomi_label(turn.source_behavior)) {
                turn.behavior = *label;
            } else {
                turn.behavior = affirm.is_affirm(turn.text) ? MiLabel::Affirm : MiLabel::Other;
            }
        }
        kept.push_back(std::move(transcript));
    }
    return kept;
}

std::size_t whitespace_token_count(std::string_view text) noexcept {
    std::size_t count = 0;
    bool in_token = false;
    for (char c : text) {
        const bool space = c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
        if (!space && !in_token) ++count;
        in_token = !space;
    }
    return count;
}

void ConversionConfig::validate() const {
    if (window < 1) throw Error(ErrorCode::InvalidArgument, "window must be >= 1");
    if (max_tokens < 1) throw Error(ErrorCode::InvalidArgument, "max_tokens must be >= 1");
    if (!token_counter) throw Error(ErrorCode::InvalidArgument, "token counter not set");
}

std::string speaker_tag(Interlocutor speaker, std::optional<MiLabel> label, bool insert_labels) {
    if (speaker == Interlocutor::Client) return "[Client]";
    if (insert_labels && label) return "[Therapist: " + std::string(display_name(*label)) + "]";
    return "[Therapist]";
}

std::string target_token(MiLabel label) {
    return "[Therapist: " + std::string(display_name(label)) + "]";
}

MiLabel parse_target(std::string_view target) {
    const std::string t = trim(target);
    constexpr std::string_view head = "[Therapist:";
    if (!starts_with(t, head) || t.back() != ']') {
        throw Error(ErrorCode::UnknownLabel, "not a target token: '" + t + "'");
    }
    return parse_label(trim(std::string_view(t).substr(head.size(), t.size() - head.size() - 1)));
}

std::string render_forecast_input(std::string_view task_prefix, std::span<const HistoryItem> history,
                                  bool insert_labels) {
    std::string out(task_prefix);
    for (const auto& item : history) {
        if (!out.empty()) out.push_back(' ');
        out += speaker_tag(item.speaker, item.label, insert_labels);
        out.push_back(' ');
        out += item.text;
    }
    return out;
}

namespace {

struct TagMatch {
    std::size_t pos;
    std::size_t len;
    std::optional<MiLabel> label;
    bool therapist;
};

// Speaker tags at the start of `text` or preceded by a space.
std::vector<TagMatch> find_tags(std::string_view text) {
    std::vector<TagMatch> tags;
    std::size_t pos = 0;
    while ((pos = text.find('[', pos)) != std::string_view::npos) {
        const bool boundary = pos == 0 || text[pos - 1] == ' ';
        const auto close = text.find(']', pos);
        if (!boundary || close == std::string_view::npos) {
            ++pos;
            continue;
        }
        const auto inner = text.substr(pos + 1, close - pos - 1);
        const std::size_t len = close - pos + 1;
        if (inner == "Client") {
            tags.push_back({pos, len, std::nullopt, false});
        } else if (inner == "Therapist") {
            tags.push_back({pos, len, std::nullopt, true});
        } else if (starts_with(inner, "Therapist: ")) {
            if (auto label = try_parse_label(inner.substr(11)); label && display_name(*label) == inner.substr(11)) {
                tags.push_back({pos, len, label, true});
            }
        }
        pos = close;
    }
    return tags;
}

}  // namespace

std::vector<MiLabel> extract_therapist_labels(std::string_view input) {
    std::vector<MiLabel> labels;
    for (const auto& tag : find_tags(input)) {
        if (tag.label) labels.push_back(*tag.label);
    }
    return labels;
}

bool has_bare_therapist_tag(std::string_view input) noexcept {
    for (const auto& tag : find_tags(input)) {
        if (tag.therapist && !tag.label) return true;
    }
    return false;
}

std::vector<ForecastExample> convert(std::span<const Transcript> transcripts, const ConversionConfig& config) {
    config.validate();
    const auto window = static_cast<std::size_t>(config.window);
    std::vector<ForecastExample> examples;
    std::vector<HistoryItem> history;
    history.reserve(window);

    for (const auto& transcript : transcripts) {
        const auto& turns = transcript.turns;
        for (std::size_t i = window; i < turns.size(); ++i) {
            const auto& turn = turns[i];
            if (turn.speaker != Interlocutor::Therapist) continue;
            if (!turn.behavior) {
                throw Error(ErrorCode::InvalidArgument,
                            "transcript " + transcript.id + " is not preprocessed (unlabeled therapist turn)");
            }
            history.clear();
            for (std::size_t j = i - window; j < i; ++j) {
                history.push_back({turns[j].speaker, turns[j].text, turns[j].behavior});
            }
            ForecastExample example;
            example.input = render_forecast_input(config.task_prefix, history, config.insert_labels);
            if (config.token_counter(example.input) > config.max_tokens) {
                example.input =
                    truncate_left(example.input, config.max_tokens, config.token_counter, config.task_prefix);
            }
            example.target = target_token(*turn.behavior);
            example.transcript_id = transcript.id;
            example.turn_index = i;
            examples.push_back(std::move(example));
        }
    }
    return examples;
}

std::string truncate_left(std::string_view input, std::size_t max_tokens, const TokenCounter& counter,
                          std::string_view task_prefix) {
    if (counter(input) <= max_tokens) return std::string(input);

    std::string_view prefix;
    std::string_view body = input;
    if (!task_prefix.empty() && starts_with(input, task_prefix)) {
        prefix = input.substr(0, task_prefix.size());
        body = input.substr(task_prefix.size());
        if (!body.empty() && body.front() == ' ') body.remove_prefix(1);
    }
    if (counter(prefix) > max_tokens) return std::string(prefix);

    auto compose = [&](std::string_view rest) {
        std::string out(prefix);
        if (!out.empty() && !rest.empty()) out.push_back(' ');
        out.append(rest);
        return out;
    };

    // Drop whole utterances, oldest first.
    const auto tags = find_tags(body);
    std::vector<std::size_t> starts;
    for (const auto& tag : tags) starts.push_back(tag.pos);
    if (starts.empty() || starts.front() != 0) starts.insert(starts.begin(), 0);
    for (std::size_t s : starts) {
        std::string candidate = compose(body.substr(s));
        if (counter(candidate) <= max_tokens) return candidate;
    }

    // The newest utterance alone is still too long: keep its tag, trim the
    // text from the front at UTF-8 boundaries.
    const std::size_t last_start = starts.back();
    std::string_view last = body.substr(last_start);
    std::string_view tag_part;
    std::string_view text = last;
    if (!tags.empty() && tags.back().pos == last_start) {
        tag_part = last.substr(0, tags.back().len);
        text = last.substr(tags.back().len);
        if (!text.empty() && text.front() == ' ') text.remove_prefix(1);
    }
    auto with_text = [&](std::size_t offset) {
        std::string rest(tag_part);
        std::string_view tail = text.substr(offset);
        if (!rest.empty() && !tail.empty()) rest.push_back(' ');
        rest.append(tail);
        return compose(rest);
    };
    if (counter(with_text(text.size())) > max_tokens) return std::string(prefix);

    // Smallest character offset that fits; counts are monotone in the offset.
    std::vector<std::size_t> bounds;
    for (std::size_t i = 0; i <= text.size(); ++i) {
        if (i == text.size() || utf8_floor(text, i) == i) bounds.push_back(i);
    }
    auto first_fit = std::partition_point(bounds.begin(), bounds.end(), [&](std::size_t offset) {
        return counter(with_text(offset)) > max_tokens;
    });
    return with_text(*first_fit);
}

std::string serialize_forecast_examples(std::span<const ForecastExample> examples) {
    std::string out;
    for (const auto& e : examples) {
        json record{{"input", e.input}, {"target", e.target}};
        if (!e.transcript_id.empty()) {
            record["transcript_id"] = e.transcript_id;
            record["turn_index"] = e.turn_index;
        }
        out += dump_line(record);
        out.push_back('\n');
    }
    return out;
}

void write_forecast_examples(const std::filesystem::path& path, std::span<const ForecastExample> examples) {
    write_file(path, serialize_forecast_examples(examples));
}

std::vector<ForecastExample> read_forecast_examples(const std::filesystem::path& path) {
    std::vector<ForecastExample> examples;
    for (const auto& line : read_nonempty_lines(path)) {
        try {
            const auto record = json::parse(line.text);
            ForecastExample e;
            e.input = record.at("input").get<std::string>();
            e.target = record.at("target").get<std::string>();
            if (record.contains("transcript_id")) e.transcript_id = record.at("transcript_id").get<std::string>();
            if (record.contains("turn_index")) e.turn_index = record.at("turn_index").get<std::size_t>();
            examples.push_back(std::move(e));
        } catch (const json::exception& ex) {
            throw SchemaViolation(line.number, ex.what());
        }
    }
    return examples;
}

}  // namespace misim
