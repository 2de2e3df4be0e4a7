// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "kvcompress/eviction.hpp"
#include "kvcompress/linalg.hpp"

namespace kvc {

/// Cosine similarities between evicted keys (rows) and conserved keys
/// (columns), with the per-row best match.
struct SimilarityMatrix {
    Matrix u;
    std::vector<std::size_t> argmax;  // lowest conserved index among ties
    std::vector<double> max;

    std::size_t evicted_count() const { return argmax.size(); }
};

/// Many-to-one nearest-neighbor matching of evicted onto conserved keys.
/// Throws ContractViolation if `conserved_keys` is empty.
SimilarityMatrix match_nearest(const Matrix& evicted_keys, const Matrix& conserved_keys);

enum class MergePhase { prompt, generation };

/// EMA similarity threshold.
///
/// prompt:     tau_0 = mean over evicted rows of the row maximum; stays unset
///             when nothing was evicted.
/// generation: tau_t = beta * max(U_t) + (1 - beta) * tau_{t-1}; if no
///             threshold exists yet it starts from the prompt formula over
///             this step's single row.
std::optional<double> update_threshold(std::optional<double> previous, const SimilarityMatrix& similarity,
                                       double beta, MergePhase phase);

/// Per evicted row: the conserved row it merges into, or nullopt when its
/// best similarity falls below the threshold and it is discarded.
struct MergeDecision {
    std::vector<std::optional<std::size_t>> target;
    double threshold = 0.0;

    std::size_t merged_count() const;
    std::size_t discarded_count() const;
};

MergeDecision decide_merges(const SimilarityMatrix& similarity, double threshold);

/// Fusion weights for one conserved row. conserved_weight plus every
/// evicted weight sums to 1.
struct MergeGroup {
    std::size_t conserved = 0;
    double conserved_weight = 1.0;
    std::vector<std::pair<std::size_t, double>> evicted;  // (evicted row, weight)
};

struct MergeWeights {
    std::vector<MergeGroup> groups;  // ascending conserved index, untouched rows omitted
};

/// Softmax over {self} and the recalled evicted rows, with the conserved
/// row's self-similarity taken as 1: Z = e + sum_i exp(u_ij),
/// w_c = e / Z, w_i = exp(u_ij) / Z.
MergeWeights merge_weights(const SimilarityMatrix& similarity, const MergeDecision& decision);

/// Folds recalled evicted K/V rows into their targets using the same weights
/// for keys and values. Row count, origin ids and scores are unchanged.
void apply_merge(CacheState& state, const EvictionOutcome& outcome, const MergeWeights& weights);

/// One logged threshold decision.
struct MergeEvent {
    std::size_t origin_id = 0;
    double max_similarity = 0.0;
    double threshold = 0.0;
    std::optional<std::size_t> target_origin_id;  // nullopt: discarded
};

/// match -> threshold update -> decide -> weights -> apply, for one
/// eviction. Updates state.ema_threshold. Returns one event per evicted row.
std::vector<MergeEvent> merge_evicted(CacheState& state, const EvictionOutcome& outcome, double beta,
                                      MergePhase phase);

}  // namespace kvc
