// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "kvcompress/layer_policy.hpp"
#include "kvcompress/linalg.hpp"
#include "kvcompress/trace.hpp"

namespace kvc {

/// How cached entries are ranked when choosing what to keep.
enum class ScoreRule {
    accumulated,  // cumulative attention received
    mean          // cumulative attention / number of softmax rows observed
};

/// KV cache of one (layer, head). Rows are always ordered by origin id, so
/// the sink segment is a prefix and the recent window is a suffix.
struct CacheState {
    Matrix keys;
    Matrix values;
    std::vector<double> attn_score;
    std::vector<std::size_t> observations;
    std::vector<std::size_t> origin_ids;
    /// EMA similarity threshold; unset until the first eviction is seen by
    /// the merge step.
    std::optional<double> ema_threshold;
    LayerBudget budget;
    ScoreRule rule = ScoreRule::accumulated;
    std::size_t step = 0;

    CacheState() = default;
    CacheState(LayerBudget b, ScoreRule r) : budget(b), rule(r) {}

    std::size_t size() const { return origin_ids.size(); }
    /// Leading rows whose origin id falls inside the sink segment.
    std::size_t sink_rows() const;
    /// Value used for ranking row i under `rule`.
    double rank_score(std::size_t i) const;
    /// Throws ContractViolation if the row-alignment invariants are broken.
    void check_invariants() const;
};

/// Rows removed from a cache in one eviction.
struct EvictionOutcome {
    Matrix keys;
    Matrix values;
    std::vector<std::size_t> origin_ids;

    std::size_t count() const { return origin_ids.size(); }
    bool empty() const { return origin_ids.empty(); }
};

struct AttentionResult {
    std::vector<double> weights;  // softmax over cache rows
    std::vector<double> output;   // weights * values
};

/// Single-query scaled dot-product attention over all rows of keys/values.
AttentionResult attend(std::span<const double> query, const Matrix& keys, const Matrix& values);

/// Column sums of the causal prompt attention of one head.
std::vector<double> init_prompt_scores(const AttentionTrace& trace, std::size_t layer, std::size_t head);

/// Prompt rows kept under `budget`: the first T, the top N of the middle
/// region [T, L - M) by score (ties to the lower index), and the last M.
/// Returned in ascending order. All rows when the budget is effectively full.
std::vector<std::size_t> select_prompt_survivors(std::span<const double> rank_scores, const LayerBudget& budget);

/// Fills an empty `state` from the prompt K/V and evicts down to its budget.
EvictionOutcome evict_prompt(CacheState& state, const Matrix& keys, const Matrix& values,
                             std::span<const double> scores);

struct StepResult {
    AttentionResult attention;  // computed over the cache including the new token
    EvictionOutcome evicted;    // at most one row
};

/// Appends one generated token, attends over the cache, accumulates the
/// softmax row into the scores and, if the cache is over budget, evicts the
/// lowest-ranked row outside the sink prefix and the recent suffix.
StepResult step_generation(CacheState& state, std::size_t origin_id, std::span<const double> query,
                           std::span<const double> key, std::span<const double> value);

}  // namespace kvc
