// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvcompress/config.hpp"
#include "kvcompress/layer_policy.hpp"
#include "kvcompress/merge.hpp"
#include "kvcompress/trace.hpp"

namespace kvc {

struct ReplayOptions {
    bool record_decisions = false;
    bool record_merges = false;
    /// Wall-clock per phase. Off by default so reports stay byte-identical
    /// across runs.
    bool record_timings = false;
    /// Worker threads for (layer, head) replays; 0 picks hardware concurrency.
    std::size_t threads = 0;
};

/// Tokens evicted from one (layer, head) cache. step 0 is the prompt.
struct DecisionRecord {
    std::size_t step = 0;
    std::size_t layer = 0;
    std::size_t head = 0;
    std::vector<std::size_t> evicted;
};

struct MergeLogRecord {
    std::size_t step = 0;
    std::size_t layer = 0;
    std::size_t head = 0;
    MergeEvent event;
};

struct HeadSummary {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::size_t final_entries = 0;
    std::size_t evicted = 0;
    std::size_t merged = 0;
    std::size_t discarded = 0;
    std::optional<double> final_threshold;
};

/// Cache occupancy and quality after one generation step.
struct StepRecord {
    std::size_t step = 0;   // 1-based
    std::size_t token = 0;  // origin id of the generated token
    std::vector<std::size_t> entries_per_layer;  // summed over heads
    std::size_t total_entries = 0;
    double mean_retained_mass = 0.0;
    double min_retained_mass = 0.0;
    double mean_drift = 0.0;
    double max_drift = 0.0;
};

struct PhaseTimings {
    double density_ms = 0.0;
    double replay_ms = 0.0;
};

struct ReplayReport {
    std::string trace_name;
    TraceDims dims;
    CachePolicyConfig config;

    std::vector<double> densities;  // d2o only
    std::vector<LayerBudget> budgets;

    std::size_t prompt_entries = 0;  // after prompt eviction, all layers and heads
    std::vector<StepRecord> steps;
    std::vector<HeadSummary> heads;

    std::size_t peak_total_entries = 0;
    std::size_t full_peak_entries = 0;  // total_len * layers * heads
    /// Steady-state entries implied by the budgets: sum over layers of
    /// budget * heads, with effectively-full layers counted at total_len.
    std::size_t budget_entries = 0;
    double memory_reduction = 0.0;  // 1 - peak / full peak

    double mean_drift = 0.0;
    double max_drift = 0.0;
    std::vector<double> layer_mean_drift;
    double mean_retained_mass = 0.0;
    double min_retained_mass = 1.0;
    std::size_t evicted = 0;
    std::size_t merged = 0;
    std::size_t discarded = 0;

    std::vector<DecisionRecord> decisions;
    std::vector<MergeLogRecord> merges;
    std::optional<PhaseTimings> timings;
};

/// Budgets each policy replays under. Baselines ignore the gate and alpha.
std::vector<LayerBudget> policy_budgets(const AttentionTrace& trace, const CachePolicyConfig& config,
                                        std::span<const double> densities);

ReplayReport run_replay(const AttentionTrace& trace, const CachePolicyConfig& config,
                        const ReplayOptions& options = {});
ReplayReport run_replay(const std::filesystem::path& trace_path, const CachePolicyConfig& config,
                        const ReplayOptions& options = {});

std::string report_json(const ReplayReport& report, int indent = 2);
/// One JSON object per line, ordered by (step, layer, head).
std::string decision_log_jsonl(const ReplayReport& report);
std::string merge_log_jsonl(const ReplayReport& report);

struct ComparisonRow {
    CachePolicyConfig config;
    std::optional<ReplayReport> report;
    std::string error;  // set when the replay failed
};

/// Replays every config against the same trace; a failing config yields an
/// error row and the others still run. Throws ConfigError on an empty list.
std::vector<ComparisonRow> compare_policies(const AttentionTrace& trace, std::span<const CachePolicyConfig> configs,
                                            const ReplayOptions& options = {});
std::vector<ComparisonRow> compare_policies(const std::filesystem::path& trace_path,
                                            std::span<const CachePolicyConfig> configs,
                                            const ReplayOptions& options = {});

/// Column order: policy,status,ratio,alpha,beta,gate,merge_enabled,
/// peak_total_entries,full_peak_entries,budget_entries,memory_reduction,
/// mean_drift,max_drift,mean_retained_mass,min_retained_mass,evicted,merged,
/// discarded,error
std::string comparison_csv(std::span<const ComparisonRow> rows);

/// Columns: layer,density,class
std::string density_csv(const DensityReport& report);

}  // namespace kvc
