#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace misim {

// Seeded engine with portable draws. std::uniform_int_distribution and
// std::shuffle are implementation-defined, so sampling goes through here to
// keep outputs byte-identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    // Uniform in [0, bound). bound must be > 0.
    std::uint64_t below(std::uint64_t bound);

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    // k distinct indices from [0, n), in draw order.
    std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k);

private:
    std::mt19937_64 engine_;
};

std::uint64_t fnv1a64(std::string_view text) noexcept;
std::uint64_t mix_seed(std::uint64_t seed, std::string_view salt) noexcept;

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
// Writes through a temporary sibling and renames, so readers never see a
// half-written file.
void write_file(const std::filesystem::path& path, std::string_view content);
void append_line(const std::filesystem::path& path, std::string_view line);

// Non-empty lines with their 1-based line numbers. A trailing '\r' is dropped.
struct NumberedLine {
    std::size_t number;
    std::string text;
};
std::vector<NumberedLine> read_nonempty_lines(const std::filesystem::path& path);

std::string trim(std::string_view text);
std::string to_lower_ascii(std::string_view text);
// Collapses internal whitespace runs to one space and trims both ends.
std::string normalize_whitespace(std::string_view text);
bool starts_with(std::string_view text, std::string_view prefix) noexcept;
std::vector<std::string> split(std::string_view text, char sep);
std::string join(std::span<const std::string> parts, std::string_view sep);
void replace_all(std::string& text, std::string_view from, std::string_view to);

// Substitutes {name} placeholders in one pass; unknown names are left as-is
// and substituted text is never rescanned.
std::string render_placeholders(std::string_view tmpl, const std::map<std::string, std::string>& values);

// Largest offset <= pos that does not split a UTF-8 sequence.
std::size_t utf8_floor(std::string_view text, std::size_t pos) noexcept;

// "12.35"-style rendering of numerator/denominator rounded half-up at
// `decimals` places, computed in integer arithmetic.
std::string ratio_half_up(std::uint64_t numerator, std::uint64_t denominator, int decimals);
std::string fixed(double value, int decimals);

// Minimal RFC 4180 reader: quoted fields, doubled quotes, embedded newlines.
struct CsvRow {
    std::size_t line;  // physical line where the record starts
    std::vector<std::string> fields;
};
std::vector<CsvRow> parse_delimited(std::string_view content, char delimiter);
char sniff_delimiter(std::string_view header_line);

// Asset root: explicit override, then $MISIM_ASSETS_DIR, then the source
// tree, then the install prefix.
std::filesystem::path resolve_assets_dir(const std::filesystem::path& override_dir = {});

}  // namespace misim
