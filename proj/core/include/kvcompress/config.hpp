// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace kvc {

/// Invalid hyperparameters or a budget that cannot be realized.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class Policy {
    full,          // no compression
    local_window,  // last S tokens
    streaming,     // T sinks + last S - T tokens
    h2o,           // T sinks + top-N accumulated score + last M
    roco,          // as h2o, ranked by mean score per observation
    d2o            // variance-gated budgets + h2o-style eviction + EMA-thresholded merging
};

std::string_view to_string(Policy policy);
std::optional<Policy> parse_policy(std::string_view name);

/// Full hyperparameter surface of a replay. Defaults: g = 100, alpha = 2,
/// beta = 0.7, N:M = 3:1, T = 4, r = 0.2.
struct CachePolicyConfig {
    Policy policy = Policy::d2o;
    double ratio = 0.2;              // r: base budget S = round(r * prompt_len)
    std::uint32_t important_weight = 3;  // N in N:M
    std::uint32_t recent_weight = 1;     // M in N:M
    std::size_t sinks = 4;           // T
    double gate = 100.0;             // g
    double alpha = 2.0;
    double beta = 0.7;
    bool merge_enabled = true;
    std::uint64_t seed = 0;          // carried into reports, unused by the engine

    /// Throws ConfigError on any out-of-domain field.
    void validate() const;
};

}  // namespace kvc
