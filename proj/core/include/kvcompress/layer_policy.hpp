// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kvcompress/config.hpp"
#include "kvcompress/linalg.hpp"
#include "kvcompress/trace.hpp"

namespace kvc {

enum class DensityClass { dense, sparse };

/// Layers at or below the gate are dense and get the alpha-scaled budget.
inline DensityClass classify_density(double density, double gate) {
    return density <= gate ? DensityClass::dense : DensityClass::sparse;
}

struct DensityReport {
    double gate = 0.0;
    std::vector<double> density;  // per layer
    std::vector<DensityClass> classes;
};

/// Causal prompt attention A_p of one head (prompt_len x prompt_len).
Matrix prompt_attention(const AttentionTrace& trace, std::size_t layer, std::size_t head);

/// Variance of the column sums of the head-averaged prompt attention.
double compute_density(const AttentionTrace& trace, std::size_t layer);

DensityReport density_report(const AttentionTrace& trace, double gate);

/// Cache size of one layer and its split into sink (T), important (N) and
/// recent (M) segments. total == sinks + important + recent.
struct LayerBudget {
    std::size_t layer = 0;
    std::size_t total = 0;
    std::size_t sinks = 0;
    std::size_t important = 0;
    std::size_t recent = 0;
    /// Budget covers the whole prompt; the layer is never compressed.
    bool effectively_full = false;
    bool alpha_scaled = false;

    friend bool operator==(const LayerBudget&, const LayerBudget&) = default;
};

/// Splits `total` into min(sinks, total) sinks and an N:M division of the
/// rest using largest-remainder rounding (N wins ties). When at least two
/// slots remain, N and M are each kept >= 1.
LayerBudget split_budget(std::size_t layer, std::size_t total, std::size_t sinks, std::uint32_t important_weight,
                         std::uint32_t recent_weight, std::size_t prompt_len);

/// Base budget S = round(r * prompt_len).
std::size_t base_budget(double ratio, std::size_t prompt_len);

/// Per-layer budgets: S for layers above the gate, min(round(alpha * S),
/// prompt_len) for layers at or below it. Throws ConfigError when S cannot
/// host T sinks plus one important and one recent token (unless S already
/// covers the prompt).
std::vector<LayerBudget> resolve_budgets(std::span<const double> densities, const CachePolicyConfig& config,
                                         std::size_t prompt_len);

}  // namespace kvc
