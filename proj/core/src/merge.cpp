// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvcompress/merge.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace kvc {

SimilarityMatrix match_nearest(const Matrix& evicted_keys, const Matrix& conserved_keys) {
    if (conserved_keys.empty()) {
        throw ContractViolation("match_nearest: no conserved keys to merge into");
    }
    SimilarityMatrix s;
    s.u = Matrix(evicted_keys.rows(), conserved_keys.rows());
    if (evicted_keys.empty()) {
        return s;
    }
    if (evicted_keys.cols() != conserved_keys.cols()) {
        throw ContractViolation("match_nearest: key width mismatch");
    }
    for (std::size_t i = 0; i < evicted_keys.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 0; j < conserved_keys.rows(); ++j) {
            s.u(i, j) = cosine_similarity(evicted_keys.row(i), conserved_keys.row(j));
            if (s.u(i, j) > s.u(i, best)) {
                best = j;
            }
        }
        s.argmax.push_back(best);
        s.max.push_back(s.u(i, best));
    }
    return s;
}

std::optional<double> update_threshold(std::optional<double> previous, const SimilarityMatrix& similarity,
                                       double beta, MergePhase phase) {
    if (!(beta >= 0.0 && beta <= 1.0)) {
        throw ContractViolation("update_threshold: beta must lie in [0, 1]");
    }
    const std::size_t n = similarity.evicted_count();
    if (phase == MergePhase::prompt) {
        if (previous.has_value()) {
            throw ContractViolation("update_threshold: prompt phase requires an unset threshold");
        }
        if (n == 0) {
            return std::nullopt;
        }
        double sum = 0.0;
        for (double m : similarity.max) {
            sum += m;
        }
        return sum / static_cast<double>(n);
    }

    if (n == 0) {
        return previous;
    }
    if (n != 1) {
        throw ContractViolation("update_threshold: generation phase expects a single similarity row");
    }
    const double current = similarity.max.front();
    if (!previous.has_value()) {
        return current;
    }
    return beta * current + (1.0 - beta) * *previous;
}

std::size_t MergeDecision::merged_count() const {
    return static_cast<std::size_t>(std::count_if(target.begin(), target.end(), [](const auto& t) { return t.has_value(); }));
}

std::size_t MergeDecision::discarded_count() const {
    return target.size() - merged_count();
}

MergeDecision decide_merges(const SimilarityMatrix& similarity, double threshold) {
    MergeDecision d;
    d.threshold = threshold;
    for (std::size_t i = 0; i < similarity.evicted_count(); ++i) {
        if (similarity.max[i] >= threshold) {
            d.target.emplace_back(similarity.argmax[i]);
        } else {
            d.target.emplace_back(std::nullopt);
        }
    }
    return d;
}

MergeWeights merge_weights(const SimilarityMatrix& similarity, const MergeDecision& decision) {
    if (decision.target.size() != similarity.evicted_count()) {
        throw ContractViolation("merge_weights: decision count does not match similarity rows");
    }
    std::map<std::size_t, std::vector<std::size_t>> recalled;
    for (std::size_t i = 0; i < decision.target.size(); ++i) {
        if (decision.target[i]) {
            recalled[*decision.target[i]].push_back(i);
        }
    }

    // exp of the conserved row's self-similarity (1), computed the same way
    // as the recalled terms so that w_c >= w_i holds exactly at u = 1.
    const double self_term = std::exp(1.0);
    MergeWeights w;
    for (const auto& [j, rows] : recalled) {
        std::vector<double> terms;
        double z = self_term;
        for (std::size_t i : rows) {
            terms.push_back(std::exp(similarity.u(i, j)));
            z += terms.back();
        }
        MergeGroup g;
        g.conserved = j;
        g.conserved_weight = self_term / z;
        for (std::size_t k = 0; k < rows.size(); ++k) {
            g.evicted.emplace_back(rows[k], terms[k] / z);
        }
        w.groups.push_back(std::move(g));
    }
    return w;
}

void apply_merge(CacheState& state, const EvictionOutcome& outcome, const MergeWeights& weights) {
    auto fuse = [](std::span<double> target, const Matrix& source, const MergeGroup& g) {
        std::vector<double> acc(target.size());
        for (std::size_t d = 0; d < target.size(); ++d) {
            acc[d] = g.conserved_weight * target[d];
        }
        for (const auto& [row, w] : g.evicted) {
            auto src = source.row(row);
            for (std::size_t d = 0; d < target.size(); ++d) {
                acc[d] += w * src[d];
            }
        }
        std::copy(acc.begin(), acc.end(), target.begin());
    };

    for (const auto& g : weights.groups) {
        if (g.conserved >= state.size()) {
            throw ContractViolation("apply_merge: conserved index out of range");
        }
        for (const auto& [row, w] : g.evicted) {
            if (row >= outcome.count()) {
                throw ContractViolation("apply_merge: evicted index out of range");
            }
        }
        fuse(state.keys.row(g.conserved), outcome.keys, g);
        fuse(state.values.row(g.conserved), outcome.values, g);
    }
}

std::vector<MergeEvent> merge_evicted(CacheState& state, const EvictionOutcome& outcome, double beta,
                                      MergePhase phase) {
    std::vector<MergeEvent> events;
    if (outcome.empty()) {
        return events;
    }
    const SimilarityMatrix sim = match_nearest(outcome.keys, state.keys);
    const std::optional<double> tau = update_threshold(
        phase == MergePhase::prompt ? std::nullopt : state.ema_threshold, sim, beta, phase);
    state.ema_threshold = tau;

    const MergeDecision decision = decide_merges(sim, *tau);
    apply_merge(state, outcome, merge_weights(sim, decision));

    for (std::size_t i = 0; i < outcome.count(); ++i) {
        MergeEvent e;
        e.origin_id = outcome.origin_ids[i];
        e.max_similarity = sim.max[i];
        e.threshold = *tau;
        if (decision.target[i]) {
            e.target_origin_id = state.origin_ids[*decision.target[i]];
        }
        events.push_back(e);
    }
    return events;
}

}  // namespace kvc
