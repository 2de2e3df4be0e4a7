// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvcompress/eviction.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kvc {

std::size_t CacheState::sink_rows() const {
    std::size_t n = 0;
    while (n < origin_ids.size() && origin_ids[n] < budget.sinks) {
        ++n;
    }
    return n;
}

double CacheState::rank_score(std::size_t i) const {
    if (rule == ScoreRule::mean) {
        return observations[i] == 0 ? 0.0 : attn_score[i] / static_cast<double>(observations[i]);
    }
    return attn_score[i];
}

void CacheState::check_invariants() const {
    const std::size_t n = origin_ids.size();
    if (keys.rows() != n || values.rows() != n || attn_score.size() != n || observations.size() != n) {
        throw ContractViolation("CacheState: row counts out of alignment");
    }
    for (std::size_t i = 1; i < n; ++i) {
        if (origin_ids[i] <= origin_ids[i - 1]) {
            throw ContractViolation("CacheState: origin ids not strictly increasing");
        }
    }
    for (double s : attn_score) {
        if (!(s >= 0.0)) {
            throw ContractViolation("CacheState: negative attention score");
        }
    }
}

AttentionResult attend(std::span<const double> query, const Matrix& keys, const Matrix& values) {
    if (keys.empty() || keys.rows() != values.rows()) {
        throw ContractViolation("attend: keys must be nonempty and aligned with values");
    }
    if (keys.cols() != query.size()) {
        throw ContractViolation("attend: head dimension mismatch");
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(query.size()));
    std::vector<double> logits(keys.rows());
    for (std::size_t j = 0; j < keys.rows(); ++j) {
        logits[j] = dot(query, keys.row(j)) * scale;
    }
    AttentionResult r;
    r.weights = softmax(logits);
    r.output.assign(values.cols(), 0.0);
    for (std::size_t j = 0; j < values.rows(); ++j) {
        const double w = r.weights[j];
        auto v = values.row(j);
        for (std::size_t d = 0; d < v.size(); ++d) {
            r.output[d] += w * v[d];
        }
    }
    return r;
}

std::vector<double> init_prompt_scores(const AttentionTrace& trace, std::size_t layer, std::size_t head) {
    return column_sums(prompt_attention(trace, layer, head));
}

std::vector<std::size_t> select_prompt_survivors(std::span<const double> rank_scores, const LayerBudget& budget) {
    const std::size_t n = rank_scores.size();
    std::vector<std::size_t> keep;
    if (budget.effectively_full || budget.total >= n) {
        keep.resize(n);
        std::iota(keep.begin(), keep.end(), std::size_t{0});
        return keep;
    }
    const std::size_t sinks = std::min(budget.sinks, n);
    const std::size_t recent_begin = n - std::min(budget.recent, n - sinks);

    std::vector<std::size_t> middle(recent_begin - sinks);
    std::iota(middle.begin(), middle.end(), sinks);
    const std::size_t take = std::min(budget.important, middle.size());
    std::partial_sort(middle.begin(), middle.begin() + static_cast<std::ptrdiff_t>(take), middle.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (rank_scores[a] != rank_scores[b]) {
                              return rank_scores[a] > rank_scores[b];
                          }
                          return a < b;
                      });
    middle.resize(take);
    std::sort(middle.begin(), middle.end());

    for (std::size_t i = 0; i < sinks; ++i) {
        keep.push_back(i);
    }
    keep.insert(keep.end(), middle.begin(), middle.end());
    for (std::size_t i = recent_begin; i < n; ++i) {
        keep.push_back(i);
    }
    return keep;
}

EvictionOutcome evict_prompt(CacheState& state, const Matrix& keys, const Matrix& values,
                             std::span<const double> scores) {
    const std::size_t n = keys.rows();
    if (state.size() != 0) {
        throw ContractViolation("evict_prompt: cache state must be empty");
    }
    if (n == 0 || values.rows() != n || scores.size() != n) {
        throw ContractViolation("evict_prompt: prompt K/V and scores must have matching nonzero length");
    }

    // Column j of a causal L x L attention matrix receives L - j rows.
    std::vector<std::size_t> observations(n);
    std::vector<double> ranks(n);
    for (std::size_t j = 0; j < n; ++j) {
        observations[j] = n - j;
        ranks[j] = state.rule == ScoreRule::mean ? scores[j] / static_cast<double>(observations[j]) : scores[j];
    }
    const auto keep = select_prompt_survivors(ranks, state.budget);

    std::vector<std::size_t> dropped;
    std::size_t next = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (next < keep.size() && keep[next] == i) {
            ++next;
        } else {
            dropped.push_back(i);
        }
    }

    state.keys = keys.gather_rows(keep);
    state.values = values.gather_rows(keep);
    state.attn_score.clear();
    state.observations.clear();
    state.origin_ids = keep;
    for (std::size_t i : keep) {
        state.attn_score.push_back(scores[i]);
        state.observations.push_back(observations[i]);
    }
    state.step = 0;

    EvictionOutcome out;
    out.keys = keys.gather_rows(dropped);
    out.values = values.gather_rows(dropped);
    out.origin_ids = std::move(dropped);
    return out;
}

StepResult step_generation(CacheState& state, std::size_t origin_id, std::span<const double> query,
                           std::span<const double> key, std::span<const double> value) {
    if (state.size() == 0) {
        throw ContractViolation("step_generation: cache state not initialized by evict_prompt");
    }
    if (origin_id <= state.origin_ids.back()) {
        throw ContractViolation("step_generation: origin id must exceed every cached id");
    }
    state.keys.append_row(key);
    state.values.append_row(value);
    state.attn_score.push_back(0.0);
    state.observations.push_back(0);
    state.origin_ids.push_back(origin_id);
    ++state.step;

    StepResult result;
    result.attention = attend(query, state.keys, state.values);
    for (std::size_t j = 0; j < state.size(); ++j) {
        state.attn_score[j] += result.attention.weights[j];
        state.observations[j] += 1;
    }

    if (state.budget.effectively_full || state.size() <= state.budget.total) {
        return result;
    }

    const std::size_t first = state.sink_rows();
    const std::size_t recent = std::min(state.budget.recent, state.size());
    const std::size_t last = state.size() - recent;
    if (first >= last) {
        throw ContractViolation("step_generation: no evictable row outside sink and recent segments");
    }
    std::size_t victim = first;
    for (std::size_t i = first + 1; i < last; ++i) {
        if (state.rank_score(i) < state.rank_score(victim)) {
            victim = i;
        }
    }

    EvictionOutcome& out = result.evicted;
    out.keys.append_row(state.keys.row(victim));
    out.values.append_row(state.values.row(victim));
    out.origin_ids.push_back(state.origin_ids[victim]);

    state.keys.erase_row(victim);
    state.values.erase_row(victim);
    state.attn_score.erase(state.attn_score.begin() + static_cast<std::ptrdiff_t>(victim));
    state.observations.erase(state.observations.begin() + static_cast<std::ptrdiff_t>(victim));
    state.origin_ids.erase(state.origin_ids.begin() + static_cast<std::ptrdiff_t>(victim));
    return result;
}

}  // namespace kvc
