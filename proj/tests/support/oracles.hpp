// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

// Brute-force reference implementations used by the tests. They only touch
// the trace's raw Q/K/V rows and plain std containers so that they stay
// independent of the engine code they check.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <utility>
#include <vector>

#include "kvcompress/linalg.hpp"
#include "kvcompress/random.hpp"
#include "kvcompress/trace.hpp"

namespace kvc::oracle {

using Rows = std::vector<std::vector<double>>;

inline Rows to_rows(const Matrix& m) {
    Rows out(m.rows(), std::vector<double>(m.cols()));
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            out[i][j] = m(i, j);
        }
    }
    return out;
}

inline Rows triple_loop_matmul(const Rows& a, const Rows& b) {
    const std::size_t n = a.size();
    const std::size_t k = b.size();
    const std::size_t m = b.empty() ? 0 : b[0].size();
    Rows out(n, std::vector<double>(m, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            for (std::size_t p = 0; p < k; ++p) {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    return out;
}

inline double naive_dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline double naive_cosine(const std::vector<double>& a, const std::vector<double>& b) {
    const double na = std::sqrt(naive_dot(a, a));
    const double nb = std::sqrt(naive_dot(b, b));
    if (na < 1e-12 || nb < 1e-12) {
        return 0.0;
    }
    return std::clamp(naive_dot(a, b) / (na * nb), -1.0, 1.0);
}

inline std::vector<double> naive_softmax(const std::vector<double>& logits) {
    double peak = logits[0];
    for (double x : logits) {
        peak = std::max(peak, x);
    }
    std::vector<double> p;
    double z = 0.0;
    for (double x : logits) {
        p.push_back(std::exp(x - peak));
        z += p.back();
    }
    for (double& x : p) {
        x /= z;
    }
    return p;
}

inline std::vector<double> row_of(const Matrix& m, std::size_t r) {
    return {m.row(r).begin(), m.row(r).end()};
}

/// Causal prompt attention materialized entry by entry.
inline Rows prompt_attention(const HeadTensors& t, std::size_t prompt_len) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(t.q.cols()));
    Rows a(prompt_len, std::vector<double>(prompt_len, 0.0));
    for (std::size_t i = 0; i < prompt_len; ++i) {
        std::vector<double> logits;
        for (std::size_t j = 0; j <= i; ++j) {
            logits.push_back(naive_dot(row_of(t.q, i), row_of(t.k, j)) * scale);
        }
        const auto p = naive_softmax(logits);
        for (std::size_t j = 0; j <= i; ++j) {
            a[i][j] = p[j];
        }
    }
    return a;
}

inline std::vector<double> column_sums(const Rows& a) {
    std::vector<double> s(a.empty() ? 0 : a[0].size(), 0.0);
    for (const auto& r : a) {
        for (std::size_t j = 0; j < r.size(); ++j) {
            s[j] += r[j];
        }
    }
    return s;
}

/// Sort the middle segment by score (desc, then index asc) and take N.
inline std::set<std::size_t> sort_and_take(const std::vector<double>& scores, std::size_t sinks, std::size_t important,
                                           std::size_t recent) {
    const std::size_t n = scores.size();
    std::set<std::size_t> keep;
    if (sinks + important + recent >= n) {
        for (std::size_t i = 0; i < n; ++i) {
            keep.insert(i);
        }
        return keep;
    }
    for (std::size_t i = 0; i < sinks; ++i) {
        keep.insert(i);
    }
    for (std::size_t i = n - recent; i < n; ++i) {
        keep.insert(i);
    }
    std::vector<std::pair<double, std::size_t>> middle;
    for (std::size_t i = sinks; i < n - recent; ++i) {
        middle.emplace_back(-scores[i], i);
    }
    std::sort(middle.begin(), middle.end());
    for (std::size_t k = 0; k < important && k < middle.size(); ++k) {
        keep.insert(middle[k].second);
    }
    return keep;
}

enum class BaselineKind { local_window, streaming, h2o };

struct BaselineRun {
    /// (step, evicted ids) in step order; step 0 is the prompt.
    std::vector<std::pair<std::size_t, std::vector<std::size_t>>> decisions;
    std::vector<double> drift;  // per generation step
};

/// Simple-minded replay of one (layer, head) under a baseline policy with a
/// cache of `sinks + important + recent` tokens. Keys are never modified, so
/// each step recomputes attention straight from the trace rows.
inline BaselineRun replay_baseline(const AttentionTrace& trace, std::size_t layer, std::size_t head, BaselineKind kind,
                                   std::size_t sinks, std::size_t important, std::size_t recent) {
    const HeadTensors& t = trace.head(layer, head);
    const std::size_t prompt_len = trace.prompt_len();
    const std::size_t budget = sinks + important + recent;
    const double scale = 1.0 / std::sqrt(static_cast<double>(trace.head_dim()));
    BaselineRun run;

    std::vector<std::size_t> cached;
    std::map<std::size_t, double> score;
    const auto sums = column_sums(prompt_attention(t, prompt_len));
    std::set<std::size_t> keep;
    if (kind == BaselineKind::h2o) {
        keep = sort_and_take(sums, sinks, important, recent);
    } else {
        for (std::size_t i = 0; i < prompt_len; ++i) {
            const bool is_sink = kind == BaselineKind::streaming && i < sinks;
            if (budget >= prompt_len || is_sink || i + recent >= prompt_len) {
                keep.insert(i);
            }
        }
    }
    std::vector<std::size_t> dropped;
    for (std::size_t i = 0; i < prompt_len; ++i) {
        if (keep.count(i)) {
            cached.push_back(i);
            score[i] = sums[i];
        } else {
            dropped.push_back(i);
        }
    }
    if (!dropped.empty()) {
        run.decisions.emplace_back(0, dropped);
    }
    const bool full = budget >= prompt_len;

    for (std::size_t tok = prompt_len; tok < trace.total_len(); ++tok) {
        cached.push_back(tok);
        score[tok] = 0.0;
        const auto q = row_of(t.q, tok);

        std::vector<double> logits;
        for (std::size_t id : cached) {
            logits.push_back(naive_dot(q, row_of(t.k, id)) * scale);
        }
        const auto p = naive_softmax(logits);
        std::vector<double> out(trace.head_dim(), 0.0);
        for (std::size_t j = 0; j < cached.size(); ++j) {
            score[cached[j]] += p[j];
            for (std::size_t d = 0; d < out.size(); ++d) {
                out[d] += p[j] * t.v(cached[j], d);
            }
        }

        std::vector<double> full_logits;
        for (std::size_t id = 0; id <= tok; ++id) {
            full_logits.push_back(naive_dot(q, row_of(t.k, id)) * scale);
        }
        const auto fp = naive_softmax(full_logits);
        double drift = 0.0;
        for (std::size_t d = 0; d < out.size(); ++d) {
            double ref = 0.0;
            for (std::size_t id = 0; id <= tok; ++id) {
                ref += fp[id] * t.v(id, d);
            }
            drift += (out[d] - ref) * (out[d] - ref);
        }
        run.drift.push_back(std::sqrt(drift));

        if (!full && cached.size() > budget) {
            const std::size_t protected_sinks = kind == BaselineKind::local_window ? 0 : sinks;
            std::size_t first = 0;
            while (first < cached.size() && cached[first] < protected_sinks) {
                ++first;
            }
            const std::size_t last = cached.size() - recent;
            std::size_t victim = first;
            if (kind == BaselineKind::h2o) {
                for (std::size_t j = first; j < last; ++j) {
                    if (score[cached[j]] < score[cached[victim]]) {
                        victim = j;
                    }
                }
            }
            run.decisions.emplace_back(tok - prompt_len + 1, std::vector<std::size_t>{cached[victim]});
            score.erase(cached[victim]);
            cached.erase(cached.begin() + static_cast<std::ptrdiff_t>(victim));
        }
    }
    return run;
}

inline Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (double& x : m.data()) {
        x = rng.gaussian();
    }
    return m;
}

}  // namespace kvc::oracle
