#include "misim/evaluation.hpp"
#include "misim/util.hpp"

#include <benchmark/benchmark.h>

using namespace misim;

namespace {

std::vector<double> scores(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> out(n);
    for (auto& v : out) v = 1.0 + static_cast<double>(rng.below(5));
    return out;
}

void BM_MannWhitney(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = scores(n, 1);
    const auto b = scores(n, 2);
    for (auto _ : state) benchmark::DoNotOptimize(pairwise_significance(a, b));
}
// Pooled sizes up to 20 take the exact path.
BENCHMARK(BM_MannWhitney)->Arg(5)->Arg(10)->Arg(100)->Arg(1000);

void BM_AggregateItem(benchmark::State& state) {
    const std::vector<int> ratings = {4, 5, 4, 3, 5};
    for (auto _ : state) benchmark::DoNotOptimize(aggregate_item(ratings));
}
BENCHMARK(BM_AggregateItem);

}  // namespace

BENCHMARK_MAIN();
