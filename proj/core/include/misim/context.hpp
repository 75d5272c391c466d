#pragma once

#include "misim/gateway.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace misim {

enum class Category {
    MentalHealth,
    InterpersonalRelationships,
    EgoPersonality,
    CareerEmployment,
    AcademicExamination,
    AddictionObsession,
    Family,
};

inline constexpr std::size_t kCategoryCount = 7;
inline constexpr std::array<Category, kCategoryCount> kAllCategories = {
    Category::MentalHealth,     Category::InterpersonalRelationships, Category::EgoPersonality,
    Category::CareerEmployment, Category::AcademicExamination,        Category::AddictionObsession,
    Category::Family,
};

constexpr std::size_t index_of(Category c) noexcept { return static_cast<std::size_t>(c); }

std::string_view machine_id(Category c) noexcept;    // "ego_personality"
std::string_view display_name(Category c) noexcept;  // "Ego & Personality"
// Accepts machine ids and display names, case-insensitive; "&"/"and",
// spaces, hyphens and underscores are interchangeable.
std::optional<Category> try_parse_category(std::string_view text);
Category parse_category(std::string_view text);  // InvalidArgument

struct ContextPost {
    std::string id;
    Category category = Category::MentalHealth;
    std::string text;
    std::optional<int> score;

    bool operator==(const ContextPost&) const = default;
};

// JSONL with fields id, category, text and optional score.
std::vector<ContextPost> parse_posts(std::string_view content);
std::vector<ContextPost> read_posts(const std::filesystem::path& path);
std::string serialize_posts(std::span<const ContextPost> posts);
void write_posts(const std::filesystem::path& path, std::span<const ContextPost> posts);

inline constexpr std::string_view kScoreReprompt = "Answer with a single number.";

// First standalone digit 1-3 (no adjacent digits) in the reply.
std::optional<int> extract_score(std::string_view reply) noexcept;

class ScoringPrompt {
public:
    explicit ScoringPrompt(std::string template_text);
    static ScoringPrompt load(const std::filesystem::path& path);
    // assets/scoring_prompt.txt under resolve_assets_dir(assets_dir).
    static ScoringPrompt load_default(const std::filesystem::path& assets_dir = {});

    // Substitutes {post}.
    std::string render(std::string_view post_text) const;
    const std::string& text() const noexcept { return text_; }

private:
    std::string text_;
};

struct ScoringOptions {
    std::string model_id;
    double temperature = 0.0;
    int max_output_tokens = 16;
    int parallel = 1;
};

// Scores one post; one reprompt with kScoreReprompt appended, then
// UnparsableScore.
int score_post(ChatBackend& backend, const ScoringPrompt& prompt, const ContextPost& post,
               const ScoringOptions& options = {});

// Returns copies with `score` set; order, ids and text preserved.
std::vector<ContextPost> score_posts(std::span<const ContextPost> posts, ChatBackend& backend,
                                     const ScoringPrompt& prompt, const ScoringOptions& options = {});

// Posts with score >= threshold, order preserved. UnscoredPost if any post
// lacks a score.
std::vector<ContextPost> filter_by_score(std::span<const ContextPost> posts, int threshold = 3);

struct SamplingQuota {
    std::array<std::size_t, kCategoryCount> per_category{};

    std::size_t total() const noexcept;
    std::size_t operator[](Category c) const noexcept { return per_category[index_of(c)]; }

    static SamplingQuota context_generation();  // 200/200/200/200/100/50/50
    static SamplingQuota evaluation();          // 16 then 14 for the other six
    static SamplingQuota uniform(std::size_t n);
    // "name=count,..." or seven comma-separated counts in category order;
    // also the preset names "generation" and "evaluation".
    static SamplingQuota parse(std::string_view spec);
};

std::array<std::size_t, kCategoryCount> category_counts(std::span<const Category> categories) noexcept;

// Indices (ascending) of exactly quota[c] items per category, drawn
// uniformly without replacement with a per-category stream derived from
// `seed`. Throws InsufficientCategory.
std::vector<std::size_t> stratified_indices(std::span<const Category> categories, const SamplingQuota& quota,
                                            std::uint64_t seed);

std::vector<ContextPost> stratified_sample(std::span<const ContextPost> posts, const SamplingQuota& quota,
                                           std::uint64_t seed);

}  // namespace misim
