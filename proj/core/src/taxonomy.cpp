#include "misim/taxonomy.hpp"

#include "misim/error.hpp"

#include <cctype>

namespace misim {

namespace {

struct Spelling {
    std::string_view display;
    std::string_view machine;
    std::string_view corpus;  // empty when there is no one-to-one corpus code
};

constexpr std::array<Spelling, kLabelCount> kSpellings = {{
    {"Simple Reflection", "simple_reflection", "reflection_simple"},
    {"Complex Reflection", "complex_reflection", "reflection_complex"},
    {"Open Question", "open_question", "question_open"},
    {"Closed Question", "closed_question", "question_closed"},
    {"Affirm", "affirm", ""},
    {"Give Information", "give_information", "input_information"},
    {"Advise", "advise", "input_advice"},
    {"Other", "other", ""},
}};

// lower case, with ' ' and '-' folded into '_'
std::string fold(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool last_sep = true;
    for (char c : text) {
        if (c == ' ' || c == '_' || c == '-' || c == '\t') {
            if (!last_sep) out.push_back('_');
            last_sep = true;
            continue;
        }
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        last_sep = false;
    }
    while (!out.empty() && out.back() == '_') out.pop_back();
    return out;
}

}  // namespace

std::string_view display_name(MiLabel label) noexcept {
    return kSpellings[index_of(label)].display;
}

std::string_view machine_id(MiLabel label) noexcept {
    return kSpellings[index_of(label)].machine;
}

std::optional<std::string_view> corpus_name(MiLabel label) noexcept {
    const auto name = kSpellings[index_of(label)].corpus;
    if (name.empty()) return std::nullopt;
    return name;
}

std::optional<MiLabel> try_parse_label(std::string_view text) noexcept {
    const std::string key = fold(text);
    if (key.empty()) return std::nullopt;
    for (MiLabel label : kAllLabels) {
        const auto& s = kSpellings[index_of(label)];
        // display names fold to the machine id
        if (key == s.machine || (!s.corpus.empty() && key == s.corpus)) {
            return label;
        }
    }
    return std::nullopt;
}

MiLabel parse_label(std::string_view text) {
    if (auto label = try_parse_label(text)) return *label;
    throw Error(ErrorCode::UnknownLabel, "unknown MI label: '" + std::string(text) + "'");
}

std::uint64_t LabelCounts::total() const noexcept {
    std::uint64_t sum = 0;
    for (auto c : counts_) sum += c;
    return sum;
}

std::uint64_t LabelCounts::reflections() const noexcept {
    return (*this)[MiLabel::SimpleReflection] + (*this)[MiLabel::ComplexReflection];
}

std::uint64_t LabelCounts::questions() const noexcept {
    return (*this)[MiLabel::OpenQuestion] + (*this)[MiLabel::ClosedQuestion];
}

LabelCounts& LabelCounts::operator+=(const LabelCounts& other) noexcept {
    for (std::size_t i = 0; i < kLabelCount; ++i) counts_[i] += other.counts_[i];
    return *this;
}

std::string_view rq_band_name(RqBand band) noexcept {
    switch (band) {
        case RqBand::BelowFair: return "below_fair";
        case RqBand::Fair: return "fair";
        case RqBand::Good: return "good";
    }
    return "below_fair";
}

MitiSummary reflection_question_ratio(const LabelCounts& counts) {
    const auto questions = counts.questions();
    if (questions == 0) {
        throw Error(ErrorCode::NoQuestions, "R:Q ratio undefined: no question labels");
    }
    MitiSummary summary;
    summary.rq_ratio = static_cast<double>(counts.reflections()) / static_cast<double>(questions);
    summary.rq_band = classify_rq(summary.rq_ratio);
    return summary;
}

std::array<double, kLabelCount> label_distribution(const LabelCounts& counts) {
    const auto total = counts.total();
    if (total == 0) {
        throw Error(ErrorCode::EmptyCounts, "label distribution of empty counts");
    }
    std::array<double, kLabelCount> out{};
    for (MiLabel label : kAllLabels) {
        out[index_of(label)] = static_cast<double>(counts[label]) / static_cast<double>(total);
    }
    return out;
}

}  // namespace misim
