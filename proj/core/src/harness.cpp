// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvcompress/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace kvc {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
    return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

ScoreRule score_rule_for(Policy p) {
    return p == Policy::roco ? ScoreRule::mean : ScoreRule::accumulated;
}

/// Everything one (layer, head) replay produces.
struct HeadRun {
    HeadSummary summary;
    std::size_t prompt_entries = 0;
    std::vector<std::size_t> entries;  // per generation step
    std::vector<double> drift;
    std::vector<double> retained;
    std::vector<DecisionRecord> decisions;
    std::vector<MergeLogRecord> merges;
};

HeadRun replay_head(const AttentionTrace& trace, std::size_t layer, std::size_t head, const LayerBudget& budget,
                    const CachePolicyConfig& config, const ReplayOptions& options) {
    const HeadTensors& t = trace.head(layer, head);
    const std::size_t prompt_len = trace.prompt_len();
    const bool merging = config.policy == Policy::d2o && config.merge_enabled;

    HeadRun run;
    run.summary.layer = layer;
    run.summary.head = head;

    auto record_merges = [&](std::size_t step, const std::vector<MergeEvent>& events) {
        for (const auto& e : events) {
            (e.target_origin_id ? run.summary.merged : run.summary.discarded) += 1;
            if (options.record_merges) {
                run.merges.push_back({step, layer, head, e});
            }
        }
    };

    CacheState state(budget, score_rule_for(config.policy));
    const Matrix prompt_keys = t.k.slice_rows(0, prompt_len);
    const Matrix prompt_values = t.v.slice_rows(0, prompt_len);
    const auto scores = init_prompt_scores(trace, layer, head);
    const EvictionOutcome prompt_out = evict_prompt(state, prompt_keys, prompt_values, scores);
    run.summary.evicted += prompt_out.count();
    if (options.record_decisions && !prompt_out.empty()) {
        run.decisions.push_back({0, layer, head, prompt_out.origin_ids});
    }
    if (merging) {
        record_merges(0, merge_evicted(state, prompt_out, config.beta, MergePhase::prompt));
    }
    run.prompt_entries = state.size();

    // Uncompressed reference cache replayed alongside.
    Matrix full_keys = prompt_keys;
    Matrix full_values = prompt_values;

    for (std::size_t token = prompt_len; token < trace.total_len(); ++token) {
        const std::size_t step = token - prompt_len + 1;
        full_keys.append_row(t.k.row(token));
        full_values.append_row(t.v.row(token));
        const AttentionResult reference = attend(t.q.row(token), full_keys, full_values);

        StepResult r = step_generation(state, token, t.q.row(token), t.k.row(token), t.v.row(token));
        run.drift.push_back(l2_distance(r.attention.output, reference.output));

        // Mass the full softmax puts on tokens the compressed cache attended to.
        double mass = 0.0;
        for (std::size_t id : state.origin_ids) {
            mass += reference.weights[id];
        }
        for (std::size_t id : r.evicted.origin_ids) {
            mass += reference.weights[id];
        }
        run.retained.push_back(std::clamp(mass, 0.0, 1.0));

        run.summary.evicted += r.evicted.count();
        if (options.record_decisions && !r.evicted.empty()) {
            run.decisions.push_back({step, layer, head, r.evicted.origin_ids});
        }
        if (merging) {
            record_merges(step, merge_evicted(state, r.evicted, config.beta, MergePhase::generation));
        }
        run.entries.push_back(state.size());
    }

    state.check_invariants();
    run.summary.final_entries = state.size();
    run.summary.final_threshold = state.ema_threshold;
    return run;
}

template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
    if (threads == 0) {
        threads = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    }
    threads = std::min(threads, count);
    if (threads <= 1) {
        for (std::size_t i = 0; i < count; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    {
        std::vector<std::jthread> workers;
        for (std::size_t w = 0; w < threads; ++w) {
            workers.emplace_back([&] {
                for (std::size_t i = next++; i < count; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        std::lock_guard lock(failure_mutex);
                        if (!failure) {
                            failure = std::current_exception();
                        }
                    }
                }
            });
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        out += c;
        if (c == '"') {
            out += '"';
        }
    }
    return out + "\"";
}

}  // namespace

std::vector<LayerBudget> policy_budgets(const AttentionTrace& trace, const CachePolicyConfig& config,
                                        std::span<const double> densities) {
    config.validate();
    const std::size_t layers = trace.num_layers();
    const std::size_t prompt_len = trace.prompt_len();
    const std::size_t base = base_budget(config.ratio, prompt_len);
    std::vector<LayerBudget> budgets;

    switch (config.policy) {
        case Policy::full:
            for (std::size_t l = 0; l < layers; ++l) {
                budgets.push_back({l, trace.total_len(), 0, 0, trace.total_len(), true, false});
            }
            return budgets;
        case Policy::local_window:
        case Policy::streaming: {
            const std::size_t sinks = config.policy == Policy::streaming ? config.sinks : 0;
            if (base < sinks + 1 && base < prompt_len) {
                throw ConfigError("budget round(r * prompt_len) = " + std::to_string(base) + " cannot host " +
                                  std::to_string(sinks) + " sinks plus a recent window");
            }
            for (std::size_t l = 0; l < layers; ++l) {
                const std::size_t kept_sinks = std::min(sinks, base);
                budgets.push_back({l, base, kept_sinks, 0, base - kept_sinks, base >= prompt_len, false});
            }
            return budgets;
        }
        case Policy::h2o:
        case Policy::roco: {
            CachePolicyConfig uniform = config;
            uniform.alpha = 1.0;
            const std::vector<double> flat(layers, 0.0);
            auto b = resolve_budgets(flat, uniform, prompt_len);
            for (auto& x : b) {
                x.alpha_scaled = false;
            }
            return b;
        }
        case Policy::d2o:
            if (densities.size() != layers) {
                throw ContractViolation("policy_budgets: d2o needs one density per layer");
            }
            return resolve_budgets(densities, config, prompt_len);
    }
    throw ContractViolation("policy_budgets: unknown policy");
}

ReplayReport run_replay(const AttentionTrace& trace, const CachePolicyConfig& config, const ReplayOptions& options) {
    config.validate();
    const auto& dims = trace.dims();

    ReplayReport report;
    report.trace_name = trace.model_name();
    report.dims = dims;
    report.config = config;

    auto started = Clock::now();
    if (config.policy == Policy::d2o) {
        report.densities.resize(dims.num_layers);
        parallel_for(dims.num_layers, options.threads,
                     [&](std::size_t l) { report.densities[l] = compute_density(trace, l); });
    }
    report.budgets = policy_budgets(trace, config, report.densities);
    const double density_ms = elapsed_ms(started);

    started = Clock::now();
    const std::size_t pairs = dims.num_layers * dims.num_heads;
    std::vector<HeadRun> runs(pairs);
    // Generated tokens come from the trace, so (layer, head) caches never
    // interact and each can be replayed start to finish independently.
    parallel_for(pairs, options.threads, [&](std::size_t i) {
        const std::size_t layer = i / dims.num_heads;
        const std::size_t head = i % dims.num_heads;
        runs[i] = replay_head(trace, layer, head, report.budgets[layer], config, options);
    });
    const double replay_ms = elapsed_ms(started);

    const std::size_t gen = dims.generation_len();
    report.steps.resize(gen);
    for (std::size_t s = 0; s < gen; ++s) {
        auto& rec = report.steps[s];
        rec.step = s + 1;
        rec.token = dims.prompt_len + s;
        rec.entries_per_layer.assign(dims.num_layers, 0);
        rec.min_retained_mass = 1.0;
    }

    double drift_sum = 0.0;
    double retained_sum = 0.0;
    report.layer_mean_drift.assign(dims.num_layers, 0.0);
    for (const auto& run : runs) {
        const std::size_t layer = run.summary.layer;
        for (double d : run.drift) {
            report.layer_mean_drift[layer] += d;
        }
        report.prompt_entries += run.prompt_entries;
        for (std::size_t s = 0; s < gen; ++s) {
            auto& rec = report.steps[s];
            rec.entries_per_layer[layer] += run.entries[s];
            rec.total_entries += run.entries[s];
            rec.mean_drift += run.drift[s];
            rec.max_drift = std::max(rec.max_drift, run.drift[s]);
            rec.mean_retained_mass += run.retained[s];
            rec.min_retained_mass = std::min(rec.min_retained_mass, run.retained[s]);
            drift_sum += run.drift[s];
            retained_sum += run.retained[s];
        }
        report.evicted += run.summary.evicted;
        report.merged += run.summary.merged;
        report.discarded += run.summary.discarded;
        report.heads.push_back(run.summary);
        report.decisions.insert(report.decisions.end(), run.decisions.begin(), run.decisions.end());
        report.merges.insert(report.merges.end(), run.merges.begin(), run.merges.end());
    }

    const auto n_pairs = static_cast<double>(pairs);
    report.peak_total_entries = report.prompt_entries;
    for (auto& rec : report.steps) {
        rec.mean_drift /= n_pairs;
        rec.mean_retained_mass /= n_pairs;
        report.peak_total_entries = std::max(report.peak_total_entries, rec.total_entries);
        report.max_drift = std::max(report.max_drift, rec.max_drift);
        report.min_retained_mass = std::min(report.min_retained_mass, rec.min_retained_mass);
    }
    const double samples = n_pairs * static_cast<double>(gen);
    report.mean_drift = drift_sum / samples;
    for (double& d : report.layer_mean_drift) {
        d /= static_cast<double>(dims.num_heads * gen);
    }
    report.mean_retained_mass = retained_sum / samples;

    report.full_peak_entries = dims.total_len * pairs;
    for (const auto& b : report.budgets) {
        report.budget_entries += (b.effectively_full ? dims.total_len : b.total) * dims.num_heads;
    }
    report.memory_reduction =
        1.0 - static_cast<double>(report.peak_total_entries) / static_cast<double>(report.full_peak_entries);

    auto by_position = [](const auto& a, const auto& b) {
        return std::tie(a.step, a.layer, a.head) < std::tie(b.step, b.layer, b.head);
    };
    std::stable_sort(report.decisions.begin(), report.decisions.end(), by_position);
    std::stable_sort(report.merges.begin(), report.merges.end(), by_position);

    if (options.record_timings) {
        report.timings = PhaseTimings{density_ms, replay_ms};
    }
    return report;
}

ReplayReport run_replay(const std::filesystem::path& trace_path, const CachePolicyConfig& config,
                        const ReplayOptions& options) {
    config.validate();
    return run_replay(read_trace(trace_path), config, options);
}

std::string report_json(const ReplayReport& r, int indent) {
    using nlohmann::ordered_json;
    ordered_json j;
    j["trace"] = {{"name", r.trace_name},
                  {"num_layers", r.dims.num_layers},
                  {"num_heads", r.dims.num_heads},
                  {"head_dim", r.dims.head_dim},
                  {"prompt_len", r.dims.prompt_len},
                  {"total_len", r.dims.total_len}};
    const auto& c = r.config;
    j["config"] = {{"policy", std::string(to_string(c.policy))},
                   {"ratio", c.ratio},
                   {"important_weight", c.important_weight},
                   {"recent_weight", c.recent_weight},
                   {"sinks", c.sinks},
                   {"gate", c.gate},
                   {"alpha", c.alpha},
                   {"beta", c.beta},
                   {"merge_enabled", c.merge_enabled},
                   {"seed", c.seed}};

    ordered_json layers = ordered_json::array();
    for (std::size_t l = 0; l < r.budgets.size(); ++l) {
        const auto& b = r.budgets[l];
        ordered_json entry = {{"layer", l}};
        if (!r.densities.empty()) {
            entry["density"] = r.densities[l];
            entry["class"] = classify_density(r.densities[l], c.gate) == DensityClass::dense ? "dense" : "sparse";
        }
        entry["mean_drift"] = r.layer_mean_drift[l];
        entry["budget"] = {{"total", b.total},
                           {"sinks", b.sinks},
                           {"important", b.important},
                           {"recent", b.recent},
                           {"effectively_full", b.effectively_full},
                           {"alpha_scaled", b.alpha_scaled}};
        layers.push_back(std::move(entry));
    }
    j["layers"] = std::move(layers);

    j["aggregate"] = {{"prompt_entries", r.prompt_entries},
                      {"peak_total_entries", r.peak_total_entries},
                      {"full_peak_entries", r.full_peak_entries},
                      {"budget_entries", r.budget_entries},
                      {"memory_reduction", r.memory_reduction},
                      {"mean_drift", r.mean_drift},
                      {"max_drift", r.max_drift},
                      {"mean_retained_mass", r.mean_retained_mass},
                      {"min_retained_mass", r.min_retained_mass},
                      {"evicted", r.evicted},
                      {"merged", r.merged},
                      {"discarded", r.discarded}};

    ordered_json steps = ordered_json::array();
    for (const auto& s : r.steps) {
        steps.push_back({{"step", s.step},
                         {"token", s.token},
                         {"entries_per_layer", s.entries_per_layer},
                         {"total_entries", s.total_entries},
                         {"mean_retained_mass", s.mean_retained_mass},
                         {"min_retained_mass", s.min_retained_mass},
                         {"mean_drift", s.mean_drift},
                         {"max_drift", s.max_drift}});
    }
    j["steps"] = std::move(steps);

    ordered_json heads = ordered_json::array();
    for (const auto& h : r.heads) {
        heads.push_back({{"layer", h.layer},
                         {"head", h.head},
                         {"final_entries", h.final_entries},
                         {"evicted", h.evicted},
                         {"merged", h.merged},
                         {"discarded", h.discarded},
                         {"final_threshold", h.final_threshold ? ordered_json(*h.final_threshold) : ordered_json()}});
    }
    j["heads"] = std::move(heads);

    if (r.timings) {
        j["timings_ms"] = {{"density", r.timings->density_ms}, {"replay", r.timings->replay_ms}};
    }
    return j.dump(indent) + "\n";
}

std::string decision_log_jsonl(const ReplayReport& report) {
    std::string out;
    for (const auto& d : report.decisions) {
        nlohmann::ordered_json j = {{"step", d.step},
                                    {"phase", d.step == 0 ? "prompt" : "generation"},
                                    {"layer", d.layer},
                                    {"head", d.head},
                                    {"evicted", d.evicted}};
        out += j.dump() + "\n";
    }
    return out;
}

std::string merge_log_jsonl(const ReplayReport& report) {
    std::string out;
    for (const auto& m : report.merges) {
        const auto& e = m.event;
        nlohmann::ordered_json j = {{"step", m.step},
                                    {"layer", m.layer},
                                    {"head", m.head},
                                    {"origin_id", e.origin_id},
                                    {"max_similarity", e.max_similarity},
                                    {"tau", e.threshold},
                                    {"decision", e.target_origin_id ? "merge" : "discard"},
                                    {"target", e.target_origin_id ? nlohmann::ordered_json(*e.target_origin_id)
                                                                  : nlohmann::ordered_json()}};
        out += j.dump() + "\n";
    }
    return out;
}

std::vector<ComparisonRow> compare_policies(const AttentionTrace& trace, std::span<const CachePolicyConfig> configs,
                                            const ReplayOptions& options) {
    if (configs.empty()) {
        throw ConfigError("compare needs at least one policy config");
    }
    std::vector<ComparisonRow> rows;
    for (const auto& c : configs) {
        ComparisonRow row;
        row.config = c;
        try {
            row.report = run_replay(trace, c, options);
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<ComparisonRow> compare_policies(const std::filesystem::path& trace_path,
                                            std::span<const CachePolicyConfig> configs,
                                            const ReplayOptions& options) {
    if (configs.empty()) {
        throw ConfigError("compare needs at least one policy config");
    }
    return compare_policies(read_trace(trace_path), configs, options);
}

std::string comparison_csv(std::span<const ComparisonRow> rows) {
    std::ostringstream out;
    out << "policy,status,ratio,alpha,beta,gate,merge_enabled,peak_total_entries,full_peak_entries,"
           "budget_entries,memory_reduction,mean_drift,max_drift,mean_retained_mass,min_retained_mass,"
           "evicted,merged,discarded,error\n";
    for (const auto& row : rows) {
        const auto& c = row.config;
        out << to_string(c.policy) << ',' << (row.report ? "ok" : "error") << ',' << format_double(c.ratio) << ','
            << format_double(c.alpha) << ',' << format_double(c.beta) << ',' << format_double(c.gate) << ','
            << (c.merge_enabled ? "true" : "false") << ',';
        if (row.report) {
            const auto& r = *row.report;
            out << r.peak_total_entries << ',' << r.full_peak_entries << ',' << r.budget_entries << ','
                << format_double(r.memory_reduction) << ',' << format_double(r.mean_drift) << ','
                << format_double(r.max_drift) << ',' << format_double(r.mean_retained_mass) << ','
                << format_double(r.min_retained_mass) << ',' << r.evicted << ',' << r.merged << ',' << r.discarded
                << ",\n";
        } else {
            out << ",,,,,,,,,,," << csv_escape(row.error) << '\n';
        }
    }
    return out.str();
}

std::string density_csv(const DensityReport& report) {
    std::ostringstream out;
    out << "layer,density,class\n";
    for (std::size_t l = 0; l < report.density.size(); ++l) {
        out << l << ',' << format_double(report.density[l]) << ','
            << (report.classes[l] == DensityClass::dense ? "dense" : "sparse") << '\n';
    }
    return out.str();
}

}  // namespace kvc
