// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "kvcompress/eviction.hpp"
#include "kvcompress/harness.hpp"
#include "kvcompress/merge.hpp"
#include "kvcompress/random.hpp"
#include "kvcompress/trace.hpp"

namespace {

kvc::Matrix gaussian(kvc::Rng& rng, std::size_t rows, std::size_t cols) {
    kvc::Matrix m(rows, cols);
    for (double& x : m.data()) {
        x = rng.gaussian();
    }
    return m;
}

// One attention read over a cache of `range(0)` rows, head_dim 64.
void BM_Attend(benchmark::State& state) {
    kvc::Rng rng(1);
    const auto rows = static_cast<std::size_t>(state.range(0));
    const kvc::Matrix keys = gaussian(rng, rows, 64);
    const kvc::Matrix values = gaussian(rng, rows, 64);
    const kvc::Matrix q = gaussian(rng, 1, 64);
    for (auto _ : state) {
        benchmark::DoNotOptimize(kvc::attend(q.row(0), keys, values));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Attend)->RangeMultiplier(4)->Range(64, 4096);

// Cosine matching of `range(0)` evicted rows against 256 conserved rows.
void BM_MatchNearest(benchmark::State& state) {
    kvc::Rng rng(2);
    const kvc::Matrix evicted = gaussian(rng, static_cast<std::size_t>(state.range(0)), 64);
    const kvc::Matrix conserved = gaussian(rng, 256, 64);
    for (auto _ : state) {
        benchmark::DoNotOptimize(kvc::match_nearest(evicted, conserved));
    }
}
BENCHMARK(BM_MatchNearest)->Arg(1)->Arg(64)->Arg(512);

// Whole-trace replay on the default synthetic trace (4 layers x 4 heads,
// 256 tokens), one worker thread.
void BM_Replay(benchmark::State& state) {
    const kvc::AttentionTrace trace = kvc::generate_synthetic(kvc::SyntheticOptions{});
    kvc::CachePolicyConfig config;
    config.policy = static_cast<kvc::Policy>(state.range(0));
    kvc::ReplayOptions options;
    options.threads = 1;
    for (auto _ : state) {
        benchmark::DoNotOptimize(kvc::run_replay(trace, config, options));
    }
    state.SetLabel(std::string(kvc::to_string(config.policy)));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(trace.dims().generation_len()));
}
BENCHMARK(BM_Replay)
    ->Arg(static_cast<int>(kvc::Policy::full))
    ->Arg(static_cast<int>(kvc::Policy::h2o))
    ->Arg(static_cast<int>(kvc::Policy::d2o))
    ->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
