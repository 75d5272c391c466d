#pragma once

#include "misim/context.hpp"
#include "misim/corpus.hpp"
#include "misim/dataset.hpp"
#include "misim/simulation.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace misim::testing {

std::filesystem::path assets_dir();
std::filesystem::path fixtures_dir();

class TempDir {
public:
    TempDir();
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

// One transcript of a synthetic AnnoMI-format file. Speakers alternate
// strictly, starting with the therapist when `therapist_first`.
struct TranscriptPlan {
    std::string id;
    bool high = true;
    bool therapist_first = true;
    std::size_t length = 0;
};

// 110 high-quality transcripts (93 therapist-first, 17 client-first, all at
// least 20 utterances) plus 23 low-quality ones, with lengths chosen so the
// high-quality set holds 4,346 therapist turns past index 0.
std::vector<TranscriptPlan> annomi_layout();

// AnnoMI-full style CSV (coarse behaviour plus subtype columns, duplicated
// annotator rows keyed by utterance_id). Therapist behaviours follow a fixed
// first-order chain so sequence models have signal to find.
std::string annomi_csv(const std::vector<TranscriptPlan>& plans, std::uint64_t seed);

// Forecast examples from the synthetic layout, converted at `window`.
std::vector<ForecastExample> synthetic_forecast_examples(int window = 6, bool insert_labels = true);

// 1,000 dialogues whose totals match the published KMI statistics: 9,558
// therapist / 8,558 client turns; labels 1269/3055/2305/109/914/87/43/779
// with the remaining 997 therapist turns unlabeled.
std::vector<Dialogue> kmi_replica();

// `per_category[i]` posts for category i, all scored `score`.
std::vector<ContextPost> synthetic_posts(const std::array<std::size_t, kCategoryCount>& per_category,
                                         std::uint64_t seed, std::optional<int> score = 3);

// Runtime over the shipped assets, scripted therapist/client fixtures and a
// markov forecaster trained on the synthetic AnnoMI layout.
SimulationRuntime mock_runtime();
SimulationConfig mock_config();

}  // namespace misim::testing
