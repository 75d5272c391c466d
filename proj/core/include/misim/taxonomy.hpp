#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace misim {

// The eight therapist behavior codes, in their canonical table order. The
// enumerator order is load-bearing: tie-breaks and report rows use it.
enum class MiLabel : std::uint8_t {
    SimpleReflection,
    ComplexReflection,
    OpenQuestion,
    ClosedQuestion,
    Affirm,
    GiveInformation,
    Advise,
    Other,
};

inline constexpr std::size_t kLabelCount = 8;

inline constexpr std::array<MiLabel, kLabelCount> kAllLabels = {
    MiLabel::SimpleReflection, MiLabel::ComplexReflection, MiLabel::OpenQuestion,
    MiLabel::ClosedQuestion,   MiLabel::Affirm,            MiLabel::GiveInformation,
    MiLabel::Advise,           MiLabel::Other,
};

constexpr std::size_t index_of(MiLabel label) noexcept {
    return static_cast<std::size_t>(label);
}

constexpr bool is_question(MiLabel label) noexcept {
    return label == MiLabel::OpenQuestion || label == MiLabel::ClosedQuestion;
}

constexpr bool is_reflection(MiLabel label) noexcept {
    return label == MiLabel::SimpleReflection || label == MiLabel::ComplexReflection;
}

// "Simple Reflection"
std::string_view display_name(MiLabel label) noexcept;
// "simple_reflection"; used in every file format
std::string_view machine_id(MiLabel label) noexcept;
// AnnoMI spelling ("reflection_simple"); Affirm and Other have none.
std::optional<std::string_view> corpus_name(MiLabel label) noexcept;

// Accepts display, machine and corpus spellings, case-insensitively, with
// spaces, underscores and hyphens interchangeable. Throws UnknownLabel.
MiLabel parse_label(std::string_view text);
std::optional<MiLabel> try_parse_label(std::string_view text) noexcept;

class LabelCounts {
public:
    LabelCounts() = default;

    std::uint64_t operator[](MiLabel label) const noexcept { return counts_[index_of(label)]; }
    std::uint64_t& operator[](MiLabel label) noexcept { return counts_[index_of(label)]; }

    void add(MiLabel label, std::uint64_t n = 1) noexcept { counts_[index_of(label)] += n; }
    std::uint64_t total() const noexcept;
    std::uint64_t reflections() const noexcept;
    std::uint64_t questions() const noexcept;

    LabelCounts& operator+=(const LabelCounts& other) noexcept;
    bool operator==(const LabelCounts&) const = default;

    const std::array<std::uint64_t, kLabelCount>& raw() const noexcept { return counts_; }

private:
    std::array<std::uint64_t, kLabelCount> counts_{};
};

enum class RqBand { BelowFair, Fair, Good };

std::string_view rq_band_name(RqBand band) noexcept;

// Reflection-to-question competence band: good at >= 2.0, fair at >= 1.0.
constexpr RqBand classify_rq(double ratio) noexcept {
    if (ratio >= 2.0) return RqBand::Good;
    if (ratio >= 1.0) return RqBand::Fair;
    return RqBand::BelowFair;
}

struct MitiSummary {
    double rq_ratio = 0.0;
    RqBand rq_band = RqBand::BelowFair;
};

// Throws NoQuestions when there are no question labels.
MitiSummary reflection_question_ratio(const LabelCounts& counts);

// Fractions over counts.total(), in table order. Throws EmptyCounts.
std::array<double, kLabelCount> label_distribution(const LabelCounts& counts);

}  // namespace misim
