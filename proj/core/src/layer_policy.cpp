// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvcompress/layer_policy.hpp"

#include <algorithm>
#include <cmath>

namespace kvc {

Matrix prompt_attention(const AttentionTrace& trace, std::size_t layer, std::size_t head) {
    const auto& t = trace.head(layer, head);
    const std::size_t n = trace.prompt_len();
    return causal_softmax(attention_logits(t.q.slice_rows(0, n), t.k.slice_rows(0, n)));
}

double compute_density(const AttentionTrace& trace, std::size_t layer) {
    if (layer >= trace.num_layers()) {
        throw ContractViolation("compute_density: layer " + std::to_string(layer) + " out of range");
    }
    const std::size_t n = trace.prompt_len();
    Matrix mean(n, n);
    for (std::size_t h = 0; h < trace.num_heads(); ++h) {
        const Matrix a = prompt_attention(trace, layer, h);
        for (std::size_t i = 0; i < a.data().size(); ++i) {
            mean.data()[i] += a.data()[i];
        }
    }
    const double inv = 1.0 / static_cast<double>(trace.num_heads());
    for (double& x : mean.data()) {
        x *= inv;
    }
    return column_sum_variance(mean);
}

DensityReport density_report(const AttentionTrace& trace, double gate) {
    DensityReport report;
    report.gate = gate;
    for (std::size_t l = 0; l < trace.num_layers(); ++l) {
        const double fd = compute_density(trace, l);
        report.density.push_back(fd);
        report.classes.push_back(classify_density(fd, gate));
    }
    return report;
}

LayerBudget split_budget(std::size_t layer, std::size_t total, std::size_t sinks, std::uint32_t important_weight,
                         std::uint32_t recent_weight, std::size_t prompt_len) {
    LayerBudget b;
    b.layer = layer;
    b.total = total;
    b.sinks = std::min(sinks, total);
    b.effectively_full = total >= prompt_len;

    const std::size_t rest = total - b.sinks;
    const std::size_t den = std::size_t{important_weight} + recent_weight;
    b.important = rest * important_weight / den;
    b.recent = rest * recent_weight / den;
    if (b.important + b.recent < rest) {
        // At most one slot is left over; it goes to the larger remainder.
        const std::size_t rem_n = rest * important_weight % den;
        const std::size_t rem_m = rest * recent_weight % den;
        (rem_n >= rem_m ? b.important : b.recent) += 1;
    }
    if (rest >= 2) {
        if (b.recent == 0) {
            b.recent = 1;
            b.important -= 1;
        } else if (b.important == 0) {
            b.important = 1;
            b.recent -= 1;
        }
    }
    return b;
}

std::size_t base_budget(double ratio, std::size_t prompt_len) {
    return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(prompt_len)));
}

std::vector<LayerBudget> resolve_budgets(std::span<const double> densities, const CachePolicyConfig& config,
                                         std::size_t prompt_len) {
    config.validate();
    if (prompt_len == 0) {
        throw ContractViolation("resolve_budgets: prompt_len must be >= 1");
    }
    const std::size_t base = base_budget(config.ratio, prompt_len);
    if (base < config.sinks + 2 && base < prompt_len) {
        throw ConfigError("budget round(r * prompt_len) = " + std::to_string(base) + " cannot host " +
                          std::to_string(config.sinks) + " sinks plus one important and one recent token");
    }

    std::vector<LayerBudget> budgets;
    budgets.reserve(densities.size());
    for (std::size_t l = 0; l < densities.size(); ++l) {
        if (!std::isfinite(densities[l]) || densities[l] < 0.0) {
            throw ContractViolation("resolve_budgets: density must be finite and >= 0");
        }
        const bool scaled = classify_density(densities[l], config.gate) == DensityClass::dense;
        std::size_t total = base;
        if (scaled) {
            const auto grown = static_cast<std::size_t>(std::llround(config.alpha * static_cast<double>(base)));
            total = std::min(grown, prompt_len);
        }
        LayerBudget b = split_budget(l, total, config.sinks, config.important_weight, config.recent_weight, prompt_len);
        b.alpha_scaled = scaled;
        budgets.push_back(b);
    }
    return budgets;
}

}  // namespace kvc
