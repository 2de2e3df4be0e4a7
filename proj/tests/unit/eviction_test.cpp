// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>
#include <vector>

#include "kvcompress/eviction.hpp"
#include "kvcompress/random.hpp"
#include "kvcompress/trace.hpp"
#include "support/oracles.hpp"

using namespace kvc;

namespace {

LayerBudget budget_of(std::size_t sinks, std::size_t important, std::size_t recent, std::size_t prompt_len) {
    const std::size_t total = sinks + important + recent;
    return {0, total, sinks, important, recent, total >= prompt_len, false};
}

Matrix rows_with_id(std::size_t n, std::size_t dim) {
    Matrix m(n, dim);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t d = 0; d < dim; ++d) {
            m(i, d) = static_cast<double>(i) + 0.01 * static_cast<double>(d);
        }
    }
    return m;
}

std::set<std::size_t> as_set(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }

SyntheticOptions small_trace(std::uint64_t seed, std::size_t prompt_len, std::size_t gen_len) {
    SyntheticOptions o;
    o.seed = seed;
    o.layers = 1;
    o.heads = 1;
    o.head_dim = 8;
    o.prompt_len = prompt_len;
    o.gen_len = gen_len;
    return o;
}

}  // namespace

TEST(InitPromptScores, SingleTokenPrompt) {
    const AttentionTrace t = generate_synthetic(small_trace(1, 1, 2));
    const auto s = init_prompt_scores(t, 0, 0);
    ASSERT_EQ(s.size(), 1u);
    EXPECT_DOUBLE_EQ(s[0], 1.0);
}

TEST(InitPromptScores, SumsToPromptLengthAndMatchesOracle) {
    const AttentionTrace t = generate_synthetic(small_trace(4, 33, 1));
    const auto s = init_prompt_scores(t, 0, 0);
    EXPECT_NEAR(std::accumulate(s.begin(), s.end(), 0.0), 33.0, 1e-9);
    const auto want = oracle::column_sums(oracle::prompt_attention(t.head(0, 0), 33));
    for (std::size_t j = 0; j < s.size(); ++j) {
        EXPECT_NEAR(s[j], want[j], 1e-12);
    }
}

TEST(InitPromptScores, AllToFirstConstruction) {
    // Every query strongly prefers key 0.
    HeadTensors h;
    h.q = Matrix::from_rows({{80, 0}, {80, 0}, {80, 0}});
    h.k = Matrix::from_rows({{1, 0}, {0, 1}, {0, -1}});
    h.v = h.k;
    const AttentionTrace t("all-to-first", TraceDims{1, 1, 2, 3, 3}, {h});
    const auto s = init_prompt_scores(t, 0, 0);
    const auto want = oracle::column_sums(oracle::prompt_attention(h, 3));
    EXPECT_NEAR(s[0], 3.0, 1e-12);
    for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_NEAR(s[j], want[j], 1e-15);
    }
}

TEST(EvictPrompt, FullBudgetKeepsEverything) {
    CacheState state(budget_of(2, 10, 10, 8), ScoreRule::accumulated);
    const Matrix k = rows_with_id(8, 3);
    const std::vector<double> scores(8, 1.0);
    const auto out = evict_prompt(state, k, k, scores);
    EXPECT_TRUE(out.empty());
    EXPECT_EQ(state.keys, k);
    EXPECT_EQ(state.origin_ids, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}));
}

TEST(EvictPrompt, WorkedExample) {
    CacheState state(budget_of(1, 2, 2, 8), ScoreRule::accumulated);
    const Matrix k = rows_with_id(8, 2);
    const std::vector<double> scores{7, 5, 1, 4, 9, 2, 0.5, 0.25};
    const auto out = evict_prompt(state, k, k, scores);
    EXPECT_EQ(state.origin_ids, (std::vector<std::size_t>{0, 1, 4, 6, 7}));
    EXPECT_EQ(out.origin_ids, (std::vector<std::size_t>{2, 3, 5}));
    EXPECT_EQ(state.attn_score, (std::vector<double>{7, 5, 9, 0.5, 0.25}));
    EXPECT_EQ(state.keys, k.gather_rows(state.origin_ids));
    EXPECT_EQ(out.keys, k.gather_rows(out.origin_ids));
    EXPECT_NO_THROW(state.check_invariants());
}

TEST(EvictPrompt, TieGoesToLowerIndex) {
    CacheState state(budget_of(1, 1, 1, 6), ScoreRule::accumulated);
    const Matrix k = rows_with_id(6, 2);
    const std::vector<double> scores{0, 3, 2, 3, 3, 0};
    evict_prompt(state, k, k, scores);
    EXPECT_EQ(state.origin_ids, (std::vector<std::size_t>{0, 1, 5}));
}

TEST(EvictPrompt, RejectsNonEmptyState) {
    CacheState state(budget_of(1, 1, 1, 6), ScoreRule::accumulated);
    const Matrix k = rows_with_id(6, 2);
    const std::vector<double> scores(6, 1.0);
    evict_prompt(state, k, k, scores);
    EXPECT_THROW(evict_prompt(state, k, k, scores), ContractViolation);
}

TEST(EvictPrompt, MatchesSortAndTakeOracle) {
    Rng rng(2024);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + rng.below(64);
        const std::size_t sinks = rng.below(5);
        const std::size_t important = 1 + rng.below(20);
        const std::size_t recent = 1 + rng.below(10);
        std::vector<double> scores(n);
        for (auto& s : scores) {
            s = static_cast<double>(rng.below(6));  // coarse values force ties
        }
        CacheState state(budget_of(sinks, important, recent, n), ScoreRule::accumulated);
        const Matrix k = rows_with_id(n, 2);
        evict_prompt(state, k, k, scores);
        EXPECT_EQ(as_set(state.origin_ids), oracle::sort_and_take(scores, sinks, important, recent))
            << "trial " << trial;
    }
}

TEST(StepGeneration, BelowBudgetGrows) {
    CacheState state(budget_of(1, 2, 2, 8), ScoreRule::accumulated);
    const Matrix k = rows_with_id(3, 2);
    const std::vector<double> scores{1, 1, 1};
    evict_prompt(state, k, k, scores);
    const std::vector<double> q{0.1, 0.2};
    const auto r = step_generation(state, 3, q, q, q);
    EXPECT_TRUE(r.evicted.empty());
    EXPECT_EQ(state.size(), 4u);
}

TEST(StepGeneration, AtBudgetEvictsExactlyOne) {
    CacheState state(budget_of(1, 2, 2, 8), ScoreRule::accumulated);
    const Matrix k = rows_with_id(8, 2);
    const std::vector<double> scores{7, 5, 1, 4, 9, 2, 0.5, 0.25};
    evict_prompt(state, k, k, scores);
    const std::vector<double> q{0.0, 0.0};
    const std::vector<double> kv{1.0, 1.0};
    const auto r = step_generation(state, 8, q, kv, kv);
    EXPECT_EQ(state.size(), 5u);
    ASSERT_EQ(r.evicted.count(), 1u);
    // Uniform attention adds 1/6 everywhere. Token 7 joins the recent window,
    // so the candidates are 1, 4 and 6; token 6 has the lowest score.
    EXPECT_EQ(r.evicted.origin_ids[0], 6u);
    EXPECT_EQ(state.origin_ids, (std::vector<std::size_t>{0, 1, 4, 7, 8}));
    EXPECT_NEAR(state.attn_score.back(), 1.0 / 6.0, 1e-15);
}

TEST(StepGeneration, EffectivelyFullNeverEvicts) {
    const AttentionTrace t = generate_synthetic(small_trace(6, 10, 20));
    CacheState state(budget_of(2, 4, 4, 10), ScoreRule::accumulated);
    ASSERT_TRUE(state.budget.effectively_full);
    const HeadTensors& h = t.head(0, 0);
    evict_prompt(state, h.k.slice_rows(0, 10), h.v.slice_rows(0, 10), init_prompt_scores(t, 0, 0));
    for (std::size_t i = 10; i < 30; ++i) {
        EXPECT_TRUE(step_generation(state, i, h.q.row(i), h.k.row(i), h.v.row(i)).evicted.empty());
    }
    EXPECT_EQ(state.size(), 30u);
}

TEST(StepGeneration, FullBudgetMatchesFullCacheReplay) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const AttentionTrace t = generate_synthetic(small_trace(seed, 12, 20));
        const HeadTensors& h = t.head(0, 0);
        CacheState state(budget_of(0, 0, 32, 12), ScoreRule::accumulated);
        evict_prompt(state, h.k.slice_rows(0, 12), h.v.slice_rows(0, 12), init_prompt_scores(t, 0, 0));
        for (std::size_t i = 12; i < 32; ++i) {
            const auto out = step_generation(state, i, h.q.row(i), h.k.row(i), h.v.row(i)).attention.output;
            std::vector<double> logits;
            for (std::size_t j = 0; j <= i; ++j) {
                logits.push_back(oracle::naive_dot(oracle::row_of(h.q, i), oracle::row_of(h.k, j)) / std::sqrt(8.0));
            }
            const auto p = oracle::naive_softmax(logits);
            double err = 0.0;
            for (std::size_t d = 0; d < 8; ++d) {
                double ref = 0.0;
                for (std::size_t j = 0; j <= i; ++j) ref += p[j] * h.v(j, d);
                err += (ref - out[d]) * (ref - out[d]);
            }
            EXPECT_LE(std::sqrt(err), 1e-9);
        }
    }
}

TEST(StepGeneration, SteadyStateSinksAndRecentsSurvive) {
    Rng rng(17);
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const std::size_t prompt_len = 20 + rng.below(30);
        const AttentionTrace t = generate_synthetic(small_trace(seed, prompt_len, 40));
        const HeadTensors& h = t.head(0, 0);
        const LayerBudget b = budget_of(2, 3 + rng.below(4), 1 + rng.below(4), prompt_len);
        CacheState state(b, ScoreRule::accumulated);
        evict_prompt(state, h.k.slice_rows(0, prompt_len), h.v.slice_rows(0, prompt_len),
                     init_prompt_scores(t, 0, 0));
        bool reached = state.size() == b.total;
        for (std::size_t i = prompt_len; i < t.total_len(); ++i) {
            const auto r = step_generation(state, i, h.q.row(i), h.k.row(i), h.v.row(i));
            EXPECT_LE(state.size(), b.total);
            reached = reached || state.size() == b.total;
            if (reached) {
                EXPECT_EQ(state.size(), b.total);
            }
            for (std::size_t s = 0; s < b.sinks; ++s) {
                EXPECT_EQ(state.origin_ids[s], s);
            }
            if (!r.evicted.empty()) {
                EXPECT_LE(r.evicted.origin_ids[0] + b.recent, i);
            }
            EXPECT_NO_THROW(state.check_invariants());
        }
    }
}

TEST(StepGeneration, MeanRuleRanksByAverage) {
    CacheState state(budget_of(0, 1, 1, 3), ScoreRule::mean);
    const Matrix k = rows_with_id(3, 2);
    // Token 0 was seen by 3 rows, token 1 by 2. Accumulated ranking would
    // keep token 0 (1.2 vs 0.9); mean ranking keeps token 1 (0.4 vs 0.45).
    const std::vector<double> scores{1.2, 0.9, 0.1};
    evict_prompt(state, k, k, scores);
    EXPECT_EQ(state.origin_ids, (std::vector<std::size_t>{1, 2}));
}

TEST(StepGeneration, RejectsStaleOriginId) {
    CacheState state(budget_of(1, 2, 2, 8), ScoreRule::accumulated);
    const Matrix k = rows_with_id(3, 2);
    evict_prompt(state, k, k, std::vector<double>{1, 1, 1});
    const std::vector<double> q{0.1, 0.2};
    EXPECT_THROW(step_generation(state, 2, q, q, q), ContractViolation);
}

// Random instances against a hand-rolled replay that tracks (id, score)
// pairs and scans for the minimum each step.
TEST(StepGeneration, MatchesBruteForceReplay) {
    Rng rng(303);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t prompt_len = 8 + rng.below(40);
        const std::size_t gen_len = 1 + rng.below(24);
        const AttentionTrace t = generate_synthetic(small_trace(100 + trial, prompt_len, gen_len));
        const std::size_t sinks = rng.below(4);
        const std::size_t important = 1 + rng.below(6);
        const std::size_t recent = 1 + rng.below(4);
        const LayerBudget b = budget_of(sinks, important, recent, prompt_len);
        const HeadTensors& h = t.head(0, 0);

        CacheState state(b, ScoreRule::accumulated);
        const auto prompt_out = evict_prompt(state, h.k.slice_rows(0, prompt_len), h.v.slice_rows(0, prompt_len),
                                             init_prompt_scores(t, 0, 0));
        std::vector<std::pair<std::size_t, std::vector<std::size_t>>> got;
        if (!prompt_out.empty()) {
            got.emplace_back(0, prompt_out.origin_ids);
        }
        for (std::size_t i = prompt_len; i < t.total_len(); ++i) {
            const auto r = step_generation(state, i, h.q.row(i), h.k.row(i), h.v.row(i));
            if (!r.evicted.empty()) {
                got.emplace_back(i - prompt_len + 1, r.evicted.origin_ids);
            }
        }
        const auto want = oracle::replay_baseline(t, 0, 0, oracle::BaselineKind::h2o, sinks, important, recent);
        EXPECT_EQ(got, want.decisions) << "trial " << trial;
    }
}
