#include "misim/context.hpp"

#include "misim/error.hpp"
#include "misim/util.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <future>

namespace misim {

using nlohmann::json;

namespace {

struct CategoryNames {
    std::string_view id;
    std::string_view display;
};

constexpr std::array<CategoryNames, kCategoryCount> kCategoryNames = {{
    {"mental_health", "Mental Health"},
    {"interpersonal_relationships", "Interpersonal Relationships"},
    {"ego_personality", "Ego & Personality"},
    {"career_employment", "Career & Employment"},
    {"academic_examination", "Academic & Examination"},
    {"addiction_obsession", "Addiction & Obsession"},
    {"family", "Family"},
}};

// Lowercase, "&" and the word "and" dropped, separators collapsed to '_'.
std::string fold_category(std::string_view text) {
    std::string lowered = to_lower_ascii(trim(text));
    std::vector<std::string> words;
    std::string word;
    for (char ch : lowered) {
        if (ch == ' ' || ch == '_' || ch == '-' || ch == '&' || ch == '/') {
            if (!word.empty()) words.push_back(std::move(word));
            word.clear();
        } else {
            word.push_back(ch);
        }
    }
    if (!word.empty()) words.push_back(std::move(word));
    std::erase(words, std::string("and"));
    return join(words, "_");
}

}  // namespace

std::string_view machine_id(Category c) noexcept { return kCategoryNames[index_of(c)].id; }

std::string_view display_name(Category c) noexcept { return kCategoryNames[index_of(c)].display; }

std::optional<Category> try_parse_category(std::string_view text) {
    const std::string folded = fold_category(text);
    for (Category c : kAllCategories) {
        if (folded == machine_id(c)) return c;
    }
    return std::nullopt;
}

Category parse_category(std::string_view text) {
    if (auto c = try_parse_category(text)) return *c;
    throw Error(ErrorCode::InvalidArgument, "unknown category '" + std::string(text) + "'");
}

std::vector<ContextPost> parse_posts(std::string_view content) {
    std::vector<ContextPost> posts;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= content.size()) {
        auto end = content.find('\n', start);
        if (end == std::string_view::npos) end = content.size();
        ++line_no;
        std::string_view line = content.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        start = end + 1;
        if (trim(line).empty()) {
            if (end == content.size()) break;
            continue;
        }
        try {
            const auto record = json::parse(line);
            ContextPost post;
            const auto& id = record.at("id");
            post.id = id.is_string() ? id.get<std::string>() : id.dump();
            auto category = try_parse_category(record.at("category").get<std::string>());
            if (!category) throw SchemaViolation(line_no, "unknown category");
            post.category = *category;
            post.text = record.at("text").get<std::string>();
            if (record.contains("score") && !record.at("score").is_null()) {
                const int score = record.at("score").get<int>();
                if (score < 1 || score > 3) throw SchemaViolation(line_no, "score outside 1-3");
                post.score = score;
            }
            posts.push_back(std::move(post));
        } catch (const json::exception& e) {
            throw SchemaViolation(line_no, e.what());
        }
        if (end == content.size()) break;
    }
    return posts;
}

std::vector<ContextPost> read_posts(const std::filesystem::path& path) { return parse_posts(read_file(path)); }

std::string serialize_posts(std::span<const ContextPost> posts) {
    std::string out;
    for (const auto& post : posts) {
        json record = {{"id", post.id}, {"category", machine_id(post.category)}, {"text", post.text}};
        if (post.score) record["score"] = *post.score;
        out += record.dump(-1, ' ', false, json::error_handler_t::replace);
        out.push_back('\n');
    }
    return out;
}

void write_posts(const std::filesystem::path& path, std::span<const ContextPost> posts) {
    write_file(path, serialize_posts(posts));
}

std::optional<int> extract_score(std::string_view reply) noexcept {
    auto is_digit = [](char ch) { return ch >= '0' && ch <= '9'; };
    for (std::size_t i = 0; i < reply.size(); ++i) {
        const char ch = reply[i];
        if (ch < '1' || ch > '3') continue;
        if (i > 0 && is_digit(reply[i - 1])) continue;
        if (i + 1 < reply.size() && is_digit(reply[i + 1])) continue;
        return ch - '0';
    }
    return std::nullopt;
}

ScoringPrompt::ScoringPrompt(std::string template_text) : text_(std::move(template_text)) {
    if (text_.find("{post}") == std::string::npos) {
        throw Error(ErrorCode::InvalidArgument, "scoring prompt has no {post} placeholder");
    }
}

ScoringPrompt ScoringPrompt::load(const std::filesystem::path& path) { return ScoringPrompt(read_file(path)); }

ScoringPrompt ScoringPrompt::load_default(const std::filesystem::path& assets_dir) {
    return load(resolve_assets_dir(assets_dir) / "scoring_prompt.txt");
}

std::string ScoringPrompt::render(std::string_view post_text) const {
    return render_placeholders(text_, {{"post", std::string(post_text)}});
}

int score_post(ChatBackend& backend, const ScoringPrompt& prompt, const ContextPost& post,
               const ScoringOptions& options) {
    if (post.text.empty()) {
        throw Error(ErrorCode::InvalidArgument, "post '" + post.id + "' has empty text");
    }
    ChatRequest request;
    request.model_id = options.model_id;
    request.temperature = options.temperature;
    request.max_output_tokens = options.max_output_tokens;
    request.messages.push_back({Role::User, prompt.render(post.text)});
    if (auto score = extract_score(backend.complete(request))) return *score;

    request.messages.back().content += "\n\n";
    request.messages.back().content += kScoreReprompt;
    if (auto score = extract_score(backend.complete(request))) return *score;
    throw Error(ErrorCode::UnparsableScore, "no score in 1-3 for post '" + post.id + "'");
}

std::vector<ContextPost> score_posts(std::span<const ContextPost> posts, ChatBackend& backend,
                                     const ScoringPrompt& prompt, const ScoringOptions& options) {
    std::vector<ContextPost> out(posts.begin(), posts.end());
    const std::size_t workers = static_cast<std::size_t>(std::max(1, options.parallel));
    if (workers == 1 || out.size() < 2) {
        for (auto& post : out) post.score = score_post(backend, prompt, post, options);
        return out;
    }
    std::vector<std::future<void>> pending;
    for (std::size_t w = 0; w < workers; ++w) {
        pending.push_back(std::async(std::launch::async, [&, w] {
            for (std::size_t i = w; i < out.size(); i += workers) {
                out[i].score = score_post(backend, prompt, out[i], options);
            }
        }));
    }
    for (auto& p : pending) p.wait();
    for (auto& p : pending) p.get();
    return out;
}

std::vector<ContextPost> filter_by_score(std::span<const ContextPost> posts, int threshold) {
    std::vector<ContextPost> kept;
    for (const auto& post : posts) {
        if (!post.score) throw Error(ErrorCode::UnscoredPost, "post '" + post.id + "' has no score");
        if (*post.score >= threshold) kept.push_back(post);
    }
    return kept;
}

std::size_t SamplingQuota::total() const noexcept {
    std::size_t sum = 0;
    for (auto n : per_category) sum += n;
    return sum;
}

SamplingQuota SamplingQuota::context_generation() { return SamplingQuota{{200, 200, 200, 200, 100, 50, 50}}; }

SamplingQuota SamplingQuota::evaluation() { return SamplingQuota{{16, 14, 14, 14, 14, 14, 14}}; }

SamplingQuota SamplingQuota::uniform(std::size_t n) {
    SamplingQuota q;
    q.per_category.fill(n);
    return q;
}

SamplingQuota SamplingQuota::parse(std::string_view spec) {
    const std::string text = trim(spec);
    if (text == "generation") return context_generation();
    if (text == "evaluation") return evaluation();
    auto to_count = [&](const std::string& s) -> std::size_t {
        const std::string t = trim(s);
        if (t.empty() || !std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; })) {
            throw Error(ErrorCode::InvalidArgument, "bad quota count '" + t + "' in '" + text + "'");
        }
        return static_cast<std::size_t>(std::stoull(t));
    };
    const auto parts = split(text, ',');
    SamplingQuota q;
    if (text.find('=') == std::string::npos) {
        if (parts.size() != kCategoryCount) {
            throw Error(ErrorCode::InvalidArgument, "quota needs 7 counts in category order");
        }
        for (std::size_t i = 0; i < kCategoryCount; ++i) q.per_category[i] = to_count(parts[i]);
        return q;
    }
    for (const auto& part : parts) {
        const auto eq = part.find('=');
        if (eq == std::string::npos) throw Error(ErrorCode::InvalidArgument, "quota entry '" + part + "' lacks '='");
        q.per_category[index_of(parse_category(part.substr(0, eq)))] = to_count(part.substr(eq + 1));
    }
    return q;
}

std::array<std::size_t, kCategoryCount> category_counts(std::span<const Category> categories) noexcept {
    std::array<std::size_t, kCategoryCount> counts{};
    for (Category c : categories) ++counts[index_of(c)];
    return counts;
}

std::vector<std::size_t> stratified_indices(std::span<const Category> categories, const SamplingQuota& quota,
                                            std::uint64_t seed) {
    std::array<std::vector<std::size_t>, kCategoryCount> pools;
    for (std::size_t i = 0; i < categories.size(); ++i) pools[index_of(categories[i])].push_back(i);

    std::vector<std::size_t> chosen;
    chosen.reserve(quota.total());
    for (Category c : kAllCategories) {
        const auto& pool = pools[index_of(c)];
        const std::size_t want = quota[c];
        if (pool.size() < want) throw InsufficientCategory(std::string(machine_id(c)), pool.size(), want);
        Rng rng(mix_seed(seed, machine_id(c)));
        for (std::size_t k : rng.sample_indices(pool.size(), want)) chosen.push_back(pool[k]);
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

std::vector<ContextPost> stratified_sample(std::span<const ContextPost> posts, const SamplingQuota& quota,
                                           std::uint64_t seed) {
    std::vector<Category> categories;
    categories.reserve(posts.size());
    for (const auto& post : posts) categories.push_back(post.category);
    std::vector<ContextPost> out;
    for (std::size_t i : stratified_indices(categories, quota, seed)) out.push_back(posts[i]);
    return out;
}

}  // namespace misim
