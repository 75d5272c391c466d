#include "misim/forecaster.hpp"
#include "misim/util.hpp"

#include <benchmark/benchmark.h>

using namespace misim;

namespace {

struct Case {
    std::vector<MiLabel> recent;
    RankedPrediction ranked;
};

std::vector<Case> cases(std::size_t n) {
    Rng rng(11);
    std::vector<Case> out(n);
    for (auto& c : out) {
        c.recent.resize(rng.below(4));
        for (auto& l : c.recent) l = kAllLabels[rng.below(kAllLabels.size())];
        std::vector<MiLabel> order(kAllLabels.begin(), kAllLabels.end());
        rng.shuffle(order);
        c.ranked.labels = order;
    }
    return out;
}

void BM_DecideLabel(benchmark::State& state) {
    const auto all = cases(4096);
    std::size_t i = 0;
    for (auto _ : state) {
        const auto& c = all[i++ & 4095];
        benchmark::DoNotOptimize(decide_label(c.recent, c.ranked));
    }
    state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_DecideLabel);

void BM_BlockingRule(benchmark::State& state) {
    const std::vector<MiLabel> recent = {MiLabel::OpenQuestion, MiLabel::ClosedQuestion};
    for (auto _ : state) {
        for (MiLabel l : kAllLabels) benchmark::DoNotOptimize(blocking_rule(recent, l));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(kAllLabels.size()));
}
BENCHMARK(BM_BlockingRule);

}  // namespace

BENCHMARK_MAIN();
