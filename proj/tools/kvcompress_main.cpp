// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

// kvcompress: generate synthetic attention traces and replay them under KV
// cache compression policies.
//
// Exit codes: 0 success, 1 I/O or internal error, 2 usage/config error,
// 3 trace parse error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kvcompress/config.hpp"
#include "kvcompress/harness.hpp"
#include "kvcompress/layer_policy.hpp"
#include "kvcompress/trace.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitTrace = 3;

struct PolicyFlags {
    std::string policy = "d2o";
    std::string nm = "3:1";
    kvc::CachePolicyConfig config;
    bool no_merge = false;
};

void add_policy_flags(CLI::App& cmd, PolicyFlags& f, bool with_policy) {
    if (with_policy) {
        cmd.add_option("--policy", f.policy, "full | local_window | streaming | h2o | roco | d2o")->capture_default_str();
    }
    cmd.add_option("--ratio,-r", f.config.ratio, "Base budget fraction r of the prompt length")->capture_default_str();
    cmd.add_option("--nm", f.nm, "Important:recent split N:M")->capture_default_str();
    cmd.add_option("--sinks,-T", f.config.sinks, "Attention-sink tokens kept permanently")->capture_default_str();
    cmd.add_option("--gate,-g", f.config.gate, "Density gate; layers at or below it get alpha * S")
        ->capture_default_str();
    cmd.add_option("--alpha", f.config.alpha, "Budget scale for dense layers")->capture_default_str();
    cmd.add_option("--beta", f.config.beta, "EMA smoothing constant for the merge threshold")->capture_default_str();
    cmd.add_flag("--no-merge", f.no_merge, "Disable token merging (d2o only)");
    cmd.add_option("--seed", f.config.seed, "Seed recorded in the report")->capture_default_str();
}

void parse_nm(const std::string& nm, kvc::CachePolicyConfig& c) {
    const auto colon = nm.find(':');
    try {
        if (colon == std::string::npos) {
            throw std::invalid_argument(nm);
        }
        const long n = std::stol(nm.substr(0, colon));
        const long m = std::stol(nm.substr(colon + 1));
        if (n <= 0 || m <= 0) {
            throw std::invalid_argument(nm);
        }
        c.important_weight = static_cast<std::uint32_t>(n);
        c.recent_weight = static_cast<std::uint32_t>(m);
    } catch (const std::logic_error&) {
        throw kvc::ConfigError("--nm expects two positive integers like 3:1, got '" + nm + "'");
    }
}

kvc::CachePolicyConfig resolve_flags(const PolicyFlags& f, const std::string& policy) {
    kvc::CachePolicyConfig c = f.config;
    const auto p = kvc::parse_policy(policy);
    if (!p) {
        throw kvc::ConfigError("unknown policy '" + policy + "'");
    }
    c.policy = *p;
    parse_nm(f.nm, c);
    c.merge_enabled = !f.no_merge;
    c.validate();
    return c;
}

/// Fields absent from an entry fall back to `base`.
kvc::CachePolicyConfig config_from_json(const nlohmann::json& j, const kvc::CachePolicyConfig& base) {
    kvc::CachePolicyConfig c = base;
    try {
        if (!j.is_object()) {
            throw kvc::ConfigError("each config entry must be a JSON object");
        }
        if (j.contains("policy")) {
            const auto p = kvc::parse_policy(j.at("policy").get<std::string>());
            if (!p) {
                throw kvc::ConfigError("unknown policy '" + j.at("policy").get<std::string>() + "'");
            }
            c.policy = *p;
        }
        c.ratio = j.value("ratio", c.ratio);
        c.important_weight = j.value("important_weight", c.important_weight);
        c.recent_weight = j.value("recent_weight", c.recent_weight);
        c.sinks = j.value("sinks", c.sinks);
        c.gate = j.value("gate", c.gate);
        c.alpha = j.value("alpha", c.alpha);
        c.beta = j.value("beta", c.beta);
        c.merge_enabled = j.value("merge_enabled", c.merge_enabled);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw kvc::ConfigError(std::string("bad config entry: ") + e.what());
    }
    return c;
}

void write_text(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open output file " + path);
    }
    out << text;
    if (!out) {
        throw std::runtime_error("write failed for " + path);
    }
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == ',') {
            if (!cur.empty()) {
                out.push_back(cur);
            }
            cur.clear();
        } else {
            cur += ch;
        }
    }
    if (!cur.empty()) {
        out.push_back(cur);
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV cache compression trace replay"};
    app.require_subcommand(1);

    // generate
    kvc::SyntheticOptions gen;
    std::string gen_out;
    auto* generate = app.add_subcommand("generate", "Write a synthetic attention trace");
    generate->add_option("--out,-o", gen_out, "Output trace path")->required();
    generate->add_option("--seed", gen.seed)->capture_default_str();
    generate->add_option("--layers", gen.layers)->capture_default_str();
    generate->add_option("--heads", gen.heads)->capture_default_str();
    generate->add_option("--head-dim", gen.head_dim)->capture_default_str();
    generate->add_option("--prompt-len", gen.prompt_len)->capture_default_str();
    generate->add_option("--gen-len", gen.gen_len)->capture_default_str();
    generate->add_option("--sink-boost", gen.sink_logit_boost, "Token-0 logit boost in the deepest layer")
        ->capture_default_str();
    generate->add_option("--token-correlation", gen.token_correlation,
                         "AR(1) coefficient between consecutive token embeddings, in [0, 1)")
        ->capture_default_str();

    // replay
    std::string replay_trace;
    std::string replay_out;
    std::string decisions_out;
    std::string merges_out;
    bool timings = false;
    std::size_t threads = 0;
    PolicyFlags replay_flags;
    auto* replay = app.add_subcommand("replay", "Replay a trace under one policy and emit a JSON report");
    replay->add_option("trace", replay_trace, "Trace file")->required();
    add_policy_flags(*replay, replay_flags, true);
    replay->add_option("--out,-o", replay_out, "Report path (default stdout)");
    replay->add_option("--log-decisions", decisions_out, "Write the eviction decision log (JSON lines)");
    replay->add_option("--log-merges", merges_out, "Write the merge/discard event log (JSON lines)");
    replay->add_flag("--timings", timings, "Include wall-clock per phase in the report");
    replay->add_option("--threads", threads, "Worker threads (0 = hardware concurrency)");

    // compare
    std::string compare_trace;
    std::string compare_out;
    std::string policies = "full,local_window,streaming,h2o,d2o";
    std::string configs_path;
    PolicyFlags compare_flags;
    auto* compare = app.add_subcommand("compare", "Replay several policies on one trace and emit a CSV table");
    compare->add_option("trace", compare_trace, "Trace file")->required();
    compare->add_option("--policies", policies, "Comma-separated policies sharing the flags below")
        ->capture_default_str();
    compare->add_option("--configs", configs_path, "JSON array of config objects (overrides --policies)");
    add_policy_flags(*compare, compare_flags, false);
    compare->add_option("--out,-o", compare_out, "CSV path (default stdout)");
    compare->add_option("--threads", threads, "Worker threads (0 = hardware concurrency)");

    // density-report
    std::string density_trace;
    std::string density_out;
    double gate = kvc::CachePolicyConfig{}.gate;
    auto* density = app.add_subcommand("density-report", "Per-layer attention density as CSV");
    density->add_option("trace", density_trace, "Trace file")->required();
    density->add_option("--gate,-g", gate, "Density gate for the class column")->capture_default_str();
    density->add_option("--out,-o", density_out, "CSV path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (*generate) {
            kvc::write_trace(kvc::generate_synthetic(gen), gen_out);
        } else if (*replay) {
            const auto config = resolve_flags(replay_flags, replay_flags.policy);
            kvc::ReplayOptions opts;
            opts.record_decisions = !decisions_out.empty();
            opts.record_merges = !merges_out.empty();
            opts.record_timings = timings;
            opts.threads = threads;
            const auto report = kvc::run_replay(std::filesystem::path(replay_trace), config, opts);
            write_text(replay_out, kvc::report_json(report));
            if (!decisions_out.empty()) {
                write_text(decisions_out, kvc::decision_log_jsonl(report));
            }
            if (!merges_out.empty()) {
                write_text(merges_out, kvc::merge_log_jsonl(report));
            }
        } else if (*compare) {
            std::vector<kvc::CachePolicyConfig> configs;
            const auto base = resolve_flags(compare_flags, "d2o");
            if (!configs_path.empty()) {
                std::ifstream in(configs_path);
                if (!in) {
                    throw kvc::ConfigError("cannot open config file " + configs_path);
                }
                nlohmann::json j;
                try {
                    in >> j;
                } catch (const nlohmann::json::exception& e) {
                    throw kvc::ConfigError(std::string("config file is not valid JSON: ") + e.what());
                }
                if (!j.is_array()) {
                    throw kvc::ConfigError("config file must hold a JSON array");
                }
                for (const auto& entry : j) {
                    configs.push_back(config_from_json(entry, base));
                }
            } else {
                for (const auto& name : split_list(policies)) {
                    configs.push_back(resolve_flags(compare_flags, name));
                }
            }
            kvc::ReplayOptions opts;
            opts.threads = threads;
            const auto rows = kvc::compare_policies(std::filesystem::path(compare_trace), configs, opts);
            write_text(compare_out, kvc::comparison_csv(rows));
            for (const auto& row : rows) {
                if (!row.report) {
                    std::cerr << "kvcompress: " << kvc::to_string(row.config.policy) << ": " << row.error << '\n';
                    return kExitConfig;
                }
            }
        } else if (*density) {
            const auto trace = kvc::read_trace(density_trace);
            write_text(density_out, kvc::density_csv(kvc::density_report(trace, gate)));
        }
    } catch (const kvc::ConfigError& e) {
        std::cerr << "kvcompress: config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const kvc::TraceParseError& e) {
        std::cerr << "kvcompress: trace error: " << e.what() << '\n';
        return kExitTrace;
    } catch (const kvc::ContractViolation& e) {
        std::cerr << "kvcompress: invalid input: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "kvcompress: " << e.what() << '\n';
        return kExitError;
    }
    return kExitOk;
}
