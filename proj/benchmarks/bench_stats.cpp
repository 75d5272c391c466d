#include "misim/dataset.hpp"
#include "misim/util.hpp"

#include <benchmark/benchmark.h>

using namespace misim;

namespace {

std::vector<Dialogue> dialogues(std::size_t count) {
    Rng rng(3);
    std::vector<Dialogue> out(count);
    for (std::size_t d = 0; d < count; ++d) {
        out[d].id = "d" + std::to_string(d);
        const std::size_t length = 11 + rng.below(14);
        for (std::size_t i = 0; i < length; ++i) {
            Utterance u;
            u.speaker = i % 2 == 0 ? Interlocutor::Therapist : Interlocutor::Client;
            u.text = "turn " + std::to_string(i);
            if (u.speaker == Interlocutor::Therapist) u.label = kAllLabels[rng.below(kAllLabels.size())];
            out[d].turns.push_back(std::move(u));
        }
    }
    return out;
}

void BM_ComputeStats(benchmark::State& state) {
    const auto ds = dialogues(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(compute_stats(ds));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ComputeStats)->Arg(1000)->Arg(10000);

void BM_ParseDialogues(benchmark::State& state) {
    const auto text = serialize_dialogues(dialogues(1000));
    for (auto _ : state) benchmark::DoNotOptimize(parse_dialogues(text));
    state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(text.size()));
}
BENCHMARK(BM_ParseDialogues)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
