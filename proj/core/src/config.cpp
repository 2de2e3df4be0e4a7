// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvcompress/config.hpp"

#include <array>
#include <cmath>
#include <utility>

namespace kvc {

namespace {

constexpr std::array<std::pair<Policy, std::string_view>, 6> kPolicyNames{{
    {Policy::full, "full"},
    {Policy::local_window, "local_window"},
    {Policy::streaming, "streaming"},
    {Policy::h2o, "h2o"},
    {Policy::roco, "roco"},
    {Policy::d2o, "d2o"},
}};

}  // namespace

std::string_view to_string(Policy policy) {
    for (const auto& [p, name] : kPolicyNames) {
        if (p == policy) {
            return name;
        }
    }
    return "unknown";
}

std::optional<Policy> parse_policy(std::string_view name) {
    for (const auto& [p, n] : kPolicyNames) {
        if (n == name) {
            return p;
        }
    }
    return std::nullopt;
}

void CachePolicyConfig::validate() const {
    if (!std::isfinite(ratio) || ratio <= 0.0 || ratio > 1.0) {
        throw ConfigError("ratio r must lie in (0, 1], got " + std::to_string(ratio));
    }
    if (important_weight == 0 || recent_weight == 0) {
        throw ConfigError("N:M ratio must be two positive integers");
    }
    if (!std::isfinite(gate)) {
        throw ConfigError("gate g must be finite");
    }
    if (!std::isfinite(alpha) || alpha < 1.0) {
        throw ConfigError("alpha must be >= 1, got " + std::to_string(alpha));
    }
    if (!std::isfinite(beta) || beta < 0.0 || beta > 1.0) {
        throw ConfigError("beta must lie in [0, 1], got " + std::to_string(beta));
    }
}

}  // namespace kvc
