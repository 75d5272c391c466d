#include "misim/corpus.hpp"
#include "misim/forecaster.hpp"
#include "misim/util.hpp"

#include <benchmark/benchmark.h>

using namespace misim;

namespace {

std::vector<Transcript> transcripts(std::size_t count, std::size_t length) {
    Rng rng(5);
    std::vector<Transcript> out(count);
    for (std::size_t t = 0; t < count; ++t) {
        out[t].id = "t" + std::to_string(t);
        out[t].quality = SessionQuality::High;
        for (std::size_t i = 0; i < length; ++i) {
            TranscriptTurn turn;
            turn.speaker = i % 2 == 0 ? Interlocutor::Therapist : Interlocutor::Client;
            turn.text = "utterance number " + std::to_string(i) + " with a few more words in it";
            if (turn.speaker == Interlocutor::Therapist) turn.behavior = kAllLabels[rng.below(kAllLabels.size())];
            out[t].turns.push_back(std::move(turn));
        }
    }
    return out;
}

void BM_Convert(benchmark::State& state) {
    const auto corpus = transcripts(110, 80);
    ConversionConfig config;
    config.window = static_cast<int>(state.range(0));
    std::size_t produced = 0;
    for (auto _ : state) {
        const auto ex = convert(corpus, config);
        produced = ex.size();
        benchmark::DoNotOptimize(ex.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(produced));
}
BENCHMARK(BM_Convert)->Arg(1)->Arg(6)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_Truncate(benchmark::State& state) {
    std::string input(kDefaultTaskPrefix);
    for (int i = 0; i < 400; ++i) input += " [Client] some words here";
    for (auto _ : state) {
        benchmark::DoNotOptimize(truncate_left(input, 512, whitespace_token_count, kDefaultTaskPrefix));
    }
}
BENCHMARK(BM_Truncate);

void BM_MarkovFitPredict(benchmark::State& state) {
    const auto ex = convert(transcripts(110, 80), ConversionConfig{});
    for (auto _ : state) {
        const auto model = fit_markov(ex);
        benchmark::DoNotOptimize(model->predict(ex.front().input));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(ex.size()));
}
BENCHMARK(BM_MarkovFitPredict)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
