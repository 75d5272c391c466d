#include "fixtures.hpp"

#include "misim/error.hpp"
#include "misim/util.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace misim;

TEST(Rng, SameSeedSameStream) {
    Rng a(5);
    Rng b(5);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.below(1000), b.below(1000));
}

TEST(Rng, BelowStaysInRangeAndCoversIt) {
    Rng r(1);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 2000; ++i) {
        const auto v = r.below(7);
        ASSERT_LT(v, 7u);
        seen.insert(v);
    }
    EXPECT_EQ(seen.size(), 7u);
}

TEST(Rng, ShuffleIsPermutation) {
    Rng r(3);
    std::vector<int> v(50);
    for (int i = 0; i < 50; ++i) v[static_cast<std::size_t>(i)] = i;
    r.shuffle(v);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[static_cast<std::size_t>(i)], i);
}

TEST(Rng, SampleIndicesDistinct) {
    Rng r(9);
    const auto idx = r.sample_indices(20, 20);
    EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 20u);
}

TEST(Hash, KnownVectors) {
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ull);
    EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
    EXPECT_NE(mix_seed(1, "x"), mix_seed(1, "y"));
    EXPECT_EQ(mix_seed(1, "x"), mix_seed(1, "x"));
}

TEST(Strings, TrimSplitJoin) {
    EXPECT_EQ(trim("  a b \t\n"), "a b");
    EXPECT_EQ(normalize_whitespace("  a   b \n c "), "a b c");
    EXPECT_EQ(to_lower_ascii("AbC"), "abc");
    const auto parts = split("a,,b", ',');
    ASSERT_EQ(parts.size(), 3u);
    EXPECT_EQ(parts[1], "");
    EXPECT_EQ(join(parts, "|"), "a||b");
    std::string s = "xaxa";
    replace_all(s, "a", "bb");
    EXPECT_EQ(s, "xbbxbb");
}

TEST(Strings, PlaceholdersSinglePass) {
    const std::map<std::string, std::string> values = {{"a", "{b}"}, {"b", "B"}};
    EXPECT_EQ(render_placeholders("{a}-{b}-{c}", values), "{b}-B-{c}");
}

TEST(Strings, Utf8Floor) {
    const std::string text = "a\xC3\xA9z";  // a, e-acute, z
    EXPECT_EQ(utf8_floor(text, 2), 1u);
    EXPECT_EQ(utf8_floor(text, 3), 3u);
    EXPECT_EQ(utf8_floor(text, 99), text.size());
}

TEST(Numbers, RatioHalfUp) {
    EXPECT_EQ(ratio_half_up(806 * 100, 840, 1), "96.0");
    EXPECT_EQ(ratio_half_up(1, 8, 2), "0.13");
    EXPECT_EQ(ratio_half_up(18116, 1000, 2), "18.12");
    EXPECT_EQ(ratio_half_up(5, 2, 0), "3");
    EXPECT_EQ(ratio_half_up(7, 1, 2), "7.00");
    EXPECT_THROW(ratio_half_up(1, 0, 2), Error);
}

TEST(Csv, QuotesAndNewlines) {
    const auto rows = parse_delimited("a,b\n\"x, y\",\"he said \"\"hi\"\"\nthere\"\nlast,1\n", ',');
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[1].fields[0], "x, y");
    EXPECT_EQ(rows[1].fields[1], "he said \"hi\"\nthere");
    EXPECT_EQ(rows[2].line, 4u);
    EXPECT_EQ(sniff_delimiter("a\tb\tc"), '\t');
    EXPECT_EQ(sniff_delimiter("a,b,c"), ',');
}

TEST(Files, WriteAppendRead) {
    misim::testing::TempDir dir;
    write_file(dir / "f.txt", "one\n\r\n  \ntwo\r\n");
    append_line(dir / "f.txt", "three");
    const auto lines = read_nonempty_lines(dir / "f.txt");
    ASSERT_EQ(lines.size(), 3u);
    EXPECT_EQ(lines[1].text, "two");
    EXPECT_EQ(lines[1].number, 4u);
    EXPECT_EQ(lines[2].text, "three");
    EXPECT_EQ(sha256_file(dir / "f.txt"), sha256_hex(read_file(dir / "f.txt")));
    EXPECT_THROW(read_file(dir / "missing"), Error);
}

TEST(Assets, ExplicitOverrideWins) {
    EXPECT_EQ(resolve_assets_dir(misim::testing::assets_dir()), misim::testing::assets_dir());
}
