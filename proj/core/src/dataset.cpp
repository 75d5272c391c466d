#include "misim/dataset.hpp"

#include "misim/error.hpp"
#include "misim/util.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <sstream>

namespace misim {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view provenance_name(Provenance p) noexcept {
    return p == Provenance::Generated ? "generated" : "ingested";
}

namespace {

Interlocutor parse_speaker(std::string_view text, std::size_t line) {
    const std::string s = to_lower_ascii(trim(text));
    if (s == "therapist") return Interlocutor::Therapist;
    if (s == "client") return Interlocutor::Client;
    throw SchemaViolation(line, "unknown speaker '" + std::string(text) + "'");
}

// Splits on '\n' and hands non-blank lines with 1-based numbers to `fn`.
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

}  // namespace

std::string serialize_dialogue(const Dialogue& dialogue) {
    ordered_json turns = ordered_json::array();
    for (const auto& u : dialogue.turns) {
        ordered_json t;
        t["speaker"] = interlocutor_name(u.speaker);
        t["text"] = u.text;
        if (u.label) t["label"] = machine_id(*u.label);
        turns.push_back(std::move(t));
    }
    ordered_json record;
    record["id"] = dialogue.id;
    record["category"] = machine_id(dialogue.category);
    record["context"] = dialogue.context;
    record["provenance"] = provenance_name(dialogue.provenance);
    if (!dialogue.trace_ref.empty()) record["trace_ref"] = dialogue.trace_ref;
    record["turns"] = std::move(turns);
    return record.dump(-1, ' ', false, ordered_json::error_handler_t::replace);
}

std::string serialize_dialogues(std::span<const Dialogue> dialogues) {
    std::string out;
    for (const auto& d : dialogues) {
        out += serialize_dialogue(d);
        out.push_back('\n');
    }
    return out;
}

Dialogue parse_dialogue(std::string_view text, std::size_t line) {
    json record;
    try {
        record = json::parse(text);
    } catch (const json::exception& e) {
        throw SchemaViolation(line, e.what());
    }
    if (!record.is_object()) throw SchemaViolation(line, "dialogue record is not an object");
    Dialogue d;
    try {
        d.id = record.at("id").get<std::string>();
        auto category = try_parse_category(record.at("category").get<std::string>());
        if (!category) throw SchemaViolation(line, "unknown category");
        d.category = *category;
        d.context = record.value("context", std::string());
        const std::string provenance = record.value("provenance", std::string("generated"));
        if (provenance == "generated") {
            d.provenance = Provenance::Generated;
        } else if (provenance == "ingested") {
            d.provenance = Provenance::Ingested;
        } else {
            throw SchemaViolation(line, "unknown provenance '" + provenance + "'");
        }
        d.trace_ref = record.value("trace_ref", std::string());
        const auto& turns = record.at("turns");
        if (!turns.is_array() || turns.empty()) throw SchemaViolation(line, "turns must be a non-empty array");
        for (const auto& t : turns) {
            Utterance u;
            u.speaker = parse_speaker(t.at("speaker").get<std::string>(), line);
            u.text = t.at("text").get<std::string>();
            if (t.contains("label") && !t.at("label").is_null()) {
                if (u.speaker == Interlocutor::Client) throw SchemaViolation(line, "client turn carries a label");
                auto label = try_parse_label(t.at("label").get<std::string>());
                if (!label) throw SchemaViolation(line, "unknown label '" + t.at("label").get<std::string>() + "'");
                u.label = *label;
            }
            d.turns.push_back(std::move(u));
        }
    } catch (const json::exception& e) {
        throw SchemaViolation(line, e.what());
    }
    return d;
}

std::vector<Dialogue> parse_dialogues(std::string_view content) {
    std::vector<Dialogue> out;
    for_each_line(content, [&](std::string_view line, std::size_t number) {
        out.push_back(parse_dialogue(line, number));
    });
    return out;
}

void write_dialogues(const std::filesystem::path& path, std::span<const Dialogue> dialogues) {
    write_file(path, serialize_dialogues(dialogues));
}

std::vector<Dialogue> read_dialogues(const std::filesystem::path& path) { return parse_dialogues(read_file(path)); }

namespace {

const json* lookup(const json& object, const std::string& dotted) {
    const json* node = &object;
    for (const auto& key : split(dotted, '.')) {
        if (!node->is_object()) return nullptr;
        auto it = node->find(key);
        if (it == node->end()) return nullptr;
        node = &*it;
    }
    return node;
}

std::string scalar_text(const json& value) {
    if (value.is_string()) return value.get<std::string>();
    return value.dump();
}

std::string mapped(const std::map<std::string, std::string>& table, const std::string& raw) {
    auto it = table.find(raw);
    return it == table.end() ? raw : it->second;
}

std::map<std::string, std::string> string_map(const json& doc, const char* key) {
    std::map<std::string, std::string> out;
    if (doc.contains(key)) {
        for (const auto& [k, v] : doc.at(key).items()) out[k] = v.get<std::string>();
    }
    return out;
}

Utterance map_utterance(const json& node, const CorpusMapping& m, std::size_t line) {
    const json* speaker = lookup(node, m.speaker_field);
    const json* text = lookup(node, m.text_field);
    if (!speaker || !text) throw SchemaViolation(line, "utterance lacks speaker or text field");
    Utterance u;
    u.speaker = parse_speaker(mapped(m.speaker_values, scalar_text(*speaker)), line);
    u.text = scalar_text(*text);
    if (const json* label = lookup(node, m.label_field); label && !label->is_null()) {
        const std::string raw = trim(scalar_text(*label));
        if (!raw.empty() && u.speaker == Interlocutor::Therapist) {
            auto parsed = try_parse_label(mapped(m.label_values, raw));
            if (!parsed) throw SchemaViolation(line, "unknown label '" + raw + "'");
            u.label = *parsed;
        }
    }
    return u;
}

Category map_category(const json& node, const CorpusMapping& m, std::size_t line) {
    const json* value = lookup(node, m.category_field);
    if (!value) throw SchemaViolation(line, "missing category field '" + m.category_field + "'");
    const std::string raw = scalar_text(*value);
    auto category = try_parse_category(mapped(m.category_values, raw));
    if (!category) throw SchemaViolation(line, "unknown category '" + raw + "'");
    return *category;
}

}  // namespace

CorpusMapping CorpusMapping::from_json_text(std::string_view text) {
    CorpusMapping m;
    try {
        const auto doc = json::parse(text);
        m.flat = doc.value("layout", std::string("nested")) == "flat";
        m.id_field = doc.value("id_field", m.id_field);
        m.category_field = doc.value("category_field", m.category_field);
        m.context_field = doc.value("context_field", m.context_field);
        m.turns_field = doc.value("turns_field", m.turns_field);
        m.speaker_field = doc.value("speaker_field", m.speaker_field);
        m.text_field = doc.value("text_field", m.text_field);
        m.label_field = doc.value("label_field", m.label_field);
        m.speaker_values = string_map(doc, "speaker_values");
        m.category_values = string_map(doc, "category_values");
        m.label_values = string_map(doc, "label_values");
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, std::string("bad corpus mapping: ") + e.what());
    }
    return m;
}

CorpusMapping CorpusMapping::load(const std::filesystem::path& path) { return from_json_text(read_file(path)); }

std::vector<Dialogue> ingest_corpus_text(std::string_view content, const CorpusMapping& mapping) {
    std::vector<std::pair<std::size_t, json>> records;
    const auto first = content.find_first_not_of(" \t\r\n");
    if (first != std::string_view::npos && content[first] == '[') {
        json doc;
        try {
            doc = json::parse(content);
        } catch (const json::exception& e) {
            throw SchemaViolation(1, e.what());
        }
        std::size_t index = 0;
        for (auto& r : doc) records.emplace_back(++index, std::move(r));
    } else {
        for_each_line(content, [&](std::string_view line, std::size_t number) {
            try {
                records.emplace_back(number, json::parse(line));
            } catch (const json::exception& e) {
                throw SchemaViolation(number, e.what());
            }
        });
    }

    std::vector<Dialogue> out;
    try {
        if (!mapping.flat) {
            for (const auto& [line, record] : records) {
                Dialogue d;
                d.provenance = Provenance::Ingested;
                const json* id = lookup(record, mapping.id_field);
                if (!id) throw SchemaViolation(line, "missing id field '" + mapping.id_field + "'");
                d.id = scalar_text(*id);
                d.category = map_category(record, mapping, line);
                if (const json* ctx = lookup(record, mapping.context_field)) d.context = scalar_text(*ctx);
                const json* turns = lookup(record, mapping.turns_field);
                if (!turns || !turns->is_array() || turns->empty()) {
                    throw SchemaViolation(line, "missing or empty turns field '" + mapping.turns_field + "'");
                }
                for (const auto& t : *turns) d.turns.push_back(map_utterance(t, mapping, line));
                out.push_back(std::move(d));
            }
            return out;
        }
        std::map<std::string, std::size_t> position;
        for (const auto& [line, record] : records) {
            const json* id = lookup(record, mapping.id_field);
            if (!id) throw SchemaViolation(line, "missing id field '" + mapping.id_field + "'");
            const std::string key = scalar_text(*id);
            auto [it, fresh] = position.emplace(key, out.size());
            if (fresh) {
                Dialogue d;
                d.provenance = Provenance::Ingested;
                d.id = key;
                d.category = map_category(record, mapping, line);
                if (const json* ctx = lookup(record, mapping.context_field)) d.context = scalar_text(*ctx);
                out.push_back(std::move(d));
            }
            out[it->second].turns.push_back(map_utterance(record, mapping, line));
        }
    } catch (const json::exception& e) {
        throw SchemaViolation(0, e.what());
    }
    return out;
}

std::vector<Dialogue> ingest_corpus(const std::filesystem::path& path, const CorpusMapping& mapping) {
    return ingest_corpus_text(read_file(path), mapping);
}

std::string DatasetStats::avg_total() const { return ratio_half_up(total_turns, dialogues, 2); }
std::string DatasetStats::avg_therapist() const { return ratio_half_up(therapist_turns, dialogues, 2); }
std::string DatasetStats::avg_client() const { return ratio_half_up(client_turns, dialogues, 2); }

DatasetStats& DatasetStats::operator+=(const DatasetStats& other) {
    dialogues += other.dialogues;
    total_turns += other.total_turns;
    therapist_turns += other.therapist_turns;
    client_turns += other.client_turns;
    unlabeled_therapist_turns += other.unlabeled_therapist_turns;
    labels += other.labels;
    miti = labels.questions() > 0 ? std::optional(reflection_question_ratio(labels)) : std::nullopt;
    return *this;
}

DatasetStats compute_stats(std::span<const Dialogue> dialogues) {
    if (dialogues.empty()) throw Error(ErrorCode::EmptyCorpus, "no dialogues to summarize");
    DatasetStats s;
    s.dialogues = dialogues.size();
    for (const auto& d : dialogues) {
        for (const auto& u : d.turns) {
            ++s.total_turns;
            if (u.speaker == Interlocutor::Client) {
                ++s.client_turns;
                continue;
            }
            ++s.therapist_turns;
            if (u.label) {
                s.labels.add(*u.label);
            } else {
                ++s.unlabeled_therapist_turns;
            }
        }
    }
    if (s.labels.questions() > 0) s.miti = reflection_question_ratio(s.labels);
    return s;
}

std::string format_stats_table(const DatasetStats& s) {
    std::ostringstream out;
    auto row = [&](std::string_view name, const std::string& total, const std::string& therapist,
                   const std::string& client) {
        out << std::left;
        out.width(26);
        out << name;
        out << std::right;
        out.width(10);
        out << total;
        out.width(11);
        out << therapist;
        out.width(9);
        out << client << '\n';
    };
    row("", "Total", "Therapist", "Client");
    row("Dialogues", std::to_string(s.dialogues), "-", "-");
    row("Turns", std::to_string(s.total_turns), std::to_string(s.therapist_turns), std::to_string(s.client_turns));
    row("Avg. turns per dialogue", s.avg_total(), s.avg_therapist(), s.avg_client());
    out << "\nTherapist labels\n";
    const auto total = s.labels.total();
    for (MiLabel label : kAllLabels) {
        out << std::left;
        out.width(26);
        out << display_name(label);
        const std::string pct = total ? ratio_half_up(s.labels[label] * 100, total, 0) : "0";
        out << std::right;
        out.width(10);
        out << s.labels[label] << " (" << pct << "%)\n";
    }
    if (s.unlabeled_therapist_turns) out << "Unlabeled therapist turns: " << s.unlabeled_therapist_turns << '\n';
    if (s.miti) {
        out << "R:Q ratio: " << fixed(s.miti->rq_ratio, 3) << " (" << rq_band_name(s.miti->rq_band) << ")\n";
    } else {
        out << "R:Q ratio: undefined (no questions)\n";
    }
    return out.str();
}

std::string format_stats_json(const DatasetStats& s) {
    ordered_json j;
    j["dialogues"] = s.dialogues;
    j["turns"] = {{"total", s.total_turns}, {"therapist", s.therapist_turns}, {"client", s.client_turns}};
    j["avg_turns"] = {{"total", s.avg_total()}, {"therapist", s.avg_therapist()}, {"client", s.avg_client()}};
    j["unlabeled_therapist_turns"] = s.unlabeled_therapist_turns;
    ordered_json labels = ordered_json::object();
    const auto total = s.labels.total();
    for (MiLabel label : kAllLabels) {
        labels[std::string(machine_id(label))] = {
            {"count", s.labels[label]},
            {"fraction", total ? static_cast<double>(s.labels[label]) / static_cast<double>(total) : 0.0}};
    }
    j["labels"] = std::move(labels);
    j["label_total"] = total;
    if (s.miti) {
        j["rq_ratio"] = s.miti->rq_ratio;
        j["rq_band"] = rq_band_name(s.miti->rq_band);
    } else {
        j["rq_ratio"] = nullptr;
        j["rq_band"] = nullptr;
    }
    return j.dump();
}

std::vector<Dialogue> sample_for_eval(std::span<const Dialogue> dialogues, const SamplingQuota& quota,
                                      std::uint64_t seed) {
    std::vector<Category> categories;
    categories.reserve(dialogues.size());
    for (const auto& d : dialogues) categories.push_back(d.category);
    std::vector<std::size_t> picked;
    try {
        picked = stratified_indices(categories, quota, seed);
    } catch (const InsufficientCategory& e) {
        throw Error(ErrorCode::InsufficientSupply, e.what());
    }
    std::vector<Dialogue> out;
    out.reserve(picked.size());
    for (auto i : picked) out.push_back(dialogues[i]);
    return out;
}

std::vector<SampledUtterance> sample_utterances_by_label(std::span<const Dialogue> dialogues,
                                                         const UtteranceSampling& options, std::uint64_t seed) {
    using Pool = std::vector<SampledUtterance>;
    std::array<std::array<Pool, kCategoryCount>, kLabelCount> pools;
    for (const auto& d : dialogues) {
        for (std::size_t i = 0; i < d.turns.size(); ++i) {
            const auto& u = d.turns[i];
            if (u.speaker != Interlocutor::Therapist || !u.label) continue;
            pools[index_of(*u.label)][index_of(d.category)].push_back({d.id, i, d.category, *u.label, u.text});
        }
    }

    std::vector<SampledUtterance> out;
    for (MiLabel label : kAllLabels) {
        if (label == MiLabel::Other && !options.include_other) continue;
        auto& by_category = pools[index_of(label)];
        std::size_t supply = 0;
        for (auto& pool : by_category) supply += pool.size();
        if (supply < options.per_label) {
            throw Error(ErrorCode::InsufficientSupply, std::string(machine_id(label)) + " has " +
                                                           std::to_string(supply) + " utterances, " +
                                                           std::to_string(options.per_label) + " requested");
        }
        std::vector<Category> order(kAllCategories.begin(), kAllCategories.end());
        std::stable_sort(order.begin(), order.end(), [&](Category a, Category b) {
            return by_category[index_of(a)].size() > by_category[index_of(b)].size();
        });
        for (Category c : order) {
            Rng rng(mix_seed(seed, std::string(machine_id(label)) + "/" + std::string(machine_id(c))));
            rng.shuffle(by_category[index_of(c)]);
        }
        std::array<std::size_t, kCategoryCount> taken{};
        std::size_t picked = 0;
        while (picked < options.per_label) {
            for (Category c : order) {
                if (picked == options.per_label) break;
                auto& pool = by_category[index_of(c)];
                auto& next = taken[index_of(c)];
                if (next == pool.size()) continue;
                out.push_back(pool[next++]);
                ++picked;
            }
        }
    }
    return out;
}

std::string serialize_sampled_utterances(std::span<const SampledUtterance> items) {
    std::string out;
    for (const auto& item : items) {
        ordered_json j;
        j["dialogue_id"] = item.dialogue_id;
        j["turn"] = item.turn_index;
        j["category"] = machine_id(item.category);
        j["label"] = machine_id(item.label);
        j["text"] = item.text;
        out += j.dump(-1, ' ', false, ordered_json::error_handler_t::replace);
        out.push_back('\n');
    }
    return out;
}

std::vector<FinetuneRecord> export_finetune(std::span<const Dialogue> dialogues, const FinetuneFormat& format) {
    std::vector<FinetuneRecord> out;
    for (const auto& d : dialogues) {
        std::string history;
        for (std::size_t i = 0; i < d.turns.size(); ++i) {
            const auto& u = d.turns[i];
            if (u.speaker == Interlocutor::Therapist) {
                out.push_back({d.id, i, format.preamble + history, u.text});
            }
            history += format.separator;
            history += u.speaker == Interlocutor::Therapist ? format.therapist_prefix : format.client_prefix;
            history += u.text;
        }
    }
    return out;
}

std::string serialize_finetune(std::span<const FinetuneRecord> records) {
    std::string out;
    for (const auto& r : records) {
        ordered_json j;
        j["dialogue_id"] = r.dialogue_id;
        j["turn"] = r.turn_index;
        j["input"] = r.input;
        j["output"] = r.output;
        out += j.dump(-1, ' ', false, ordered_json::error_handler_t::replace);
        out.push_back('\n');
    }
    return out;
}

}  // namespace misim
