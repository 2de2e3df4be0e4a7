// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvcompress/trace.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "kvcompress/random.hpp"

namespace kvc {

AttentionTrace::AttentionTrace(std::string model_name, TraceDims dims, std::vector<HeadTensors> heads,
                               std::uint32_t flags)
    : m_model_name(std::move(model_name)), m_dims(dims), m_flags(flags), m_heads(std::move(heads)) {
    if (dims.num_layers == 0 || dims.num_heads == 0 || dims.head_dim == 0) {
        throw ContractViolation("AttentionTrace: layers, heads and head_dim must be >= 1");
    }
    if (dims.prompt_len == 0 || dims.total_len < dims.prompt_len) {
        throw ContractViolation("AttentionTrace: requires total_len >= prompt_len >= 1");
    }
    if (m_heads.size() != dims.num_layers * dims.num_heads) {
        throw ContractViolation("AttentionTrace: expected " + std::to_string(dims.num_layers * dims.num_heads) +
                                " head blocks, got " + std::to_string(m_heads.size()));
    }
    for (const auto& h : m_heads) {
        for (const Matrix* m : {&h.q, &h.k, &h.v}) {
            if (m->rows() != dims.total_len || m->cols() != dims.head_dim) {
                throw ContractViolation("AttentionTrace: Q/K/V block must be total_len x head_dim");
            }
            require_finite(m->data(), "AttentionTrace");
        }
    }
}

const HeadTensors& AttentionTrace::head(std::size_t layer, std::size_t head) const {
    if (layer >= m_dims.num_layers || head >= m_dims.num_heads) {
        throw ContractViolation("AttentionTrace::head: index (" + std::to_string(layer) + ", " +
                                std::to_string(head) + ") out of range");
    }
    return m_heads[layer * m_dims.num_heads + head];
}

// Synthetic generator --------------------------------------------------------

namespace {

Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
    Matrix m(rows, cols);
    for (double& x : m.data()) {
        x = rng.gaussian() * scale;
    }
    return m;
}

Matrix rms_normalized(const Matrix& x) {
    Matrix out = x;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        const double rms = std::sqrt(dot(r, r) / static_cast<double>(r.size()) + 1e-6);
        for (double& v : r) {
            v /= rms;
        }
    }
    return out;
}

}  // namespace

AttentionTrace generate_synthetic(const SyntheticOptions& options) {
    if (options.layers == 0 || options.heads == 0 || options.head_dim == 0 || options.prompt_len == 0 ||
        options.gen_len == 0) {
        throw ContractViolation("generate_synthetic: all counts must be >= 1");
    }
    if (!(options.token_correlation >= 0.0 && options.token_correlation < 1.0)) {
        throw ContractViolation("generate_synthetic: token_correlation must lie in [0, 1)");
    }
    if (!std::isfinite(options.sink_logit_boost) || options.sink_logit_boost < 0.0) {
        throw ContractViolation("generate_synthetic: sink_logit_boost must be finite and >= 0");
    }

    Rng rng(options.seed);
    const std::size_t total_len = options.prompt_len + options.gen_len;
    const std::size_t head_dim = options.head_dim;
    const std::size_t model_dim = options.heads * head_dim;
    const double proj_scale = 1.0 / std::sqrt(static_cast<double>(model_dim));

    Matrix hidden = gaussian_matrix(rng, total_len, model_dim, 1.0);
    const double rho = options.token_correlation;
    const double innovation = std::sqrt(1.0 - rho * rho);
    for (std::size_t i = 1; i < total_len; ++i) {
        for (std::size_t d = 0; d < model_dim; ++d) {
            hidden(i, d) = rho * hidden(i - 1, d) + innovation * hidden(i, d);
        }
    }
    std::vector<HeadTensors> heads;
    heads.reserve(options.layers * options.heads);

    for (std::size_t layer = 0; layer < options.layers; ++layer) {
        // 0 at the first layer, 1 at the last.
        const double depth =
            options.layers > 1 ? static_cast<double>(layer) / static_cast<double>(options.layers - 1) : 0.0;
        const double boost = options.sink_logit_boost * depth;
        const double query_gain = 0.5 + 1.5 * depth;
        const double sink_shift = std::sqrt(boost * std::sqrt(static_cast<double>(head_dim)));

        const Matrix normed = rms_normalized(hidden);
        Matrix mixed(total_len, model_dim);

        for (std::size_t h = 0; h < options.heads; ++h) {
            const Matrix wq = gaussian_matrix(rng, model_dim, head_dim, proj_scale * query_gain);
            const Matrix wk = gaussian_matrix(rng, model_dim, head_dim, proj_scale);
            const Matrix wv = gaussian_matrix(rng, model_dim, head_dim, proj_scale);
            std::vector<double> sink_dir(head_dim);
            for (double& x : sink_dir) {
                x = rng.gaussian();
            }
            const double dir_norm = l2_norm(sink_dir);
            for (double& x : sink_dir) {
                x /= dir_norm;
            }

            HeadTensors t{matmul(normed, wq), matmul(normed, wk), matmul(normed, wv)};
            // Every query leans toward a shared direction that token 0's key
            // also carries: q_i . k_0 / sqrt(D) gains roughly `boost`.
            for (std::size_t i = 0; i < total_len; ++i) {
                auto q = t.q.row(i);
                for (std::size_t d = 0; d < head_dim; ++d) {
                    q[d] += sink_shift * sink_dir[d];
                }
            }
            auto k0 = t.k.row(0);
            for (std::size_t d = 0; d < head_dim; ++d) {
                k0[d] += sink_shift * sink_dir[d];
            }

            const Matrix probs = causal_softmax(attention_logits(t.q, t.k));
            const Matrix out = matmul(probs, t.v);
            for (std::size_t i = 0; i < total_len; ++i) {
                std::copy_n(out.row(i).begin(), head_dim, mixed.row(i).begin() + static_cast<std::ptrdiff_t>(h * head_dim));
            }
            heads.push_back(std::move(t));
        }

        // Residual attention projection followed by a tanh MLP, so the next
        // layer sees a different hidden state.
        const Matrix wo = gaussian_matrix(rng, model_dim, model_dim, proj_scale);
        const Matrix attn_out = matmul(mixed, wo);
        for (std::size_t i = 0; i < hidden.data().size(); ++i) {
            hidden.data()[i] += attn_out.data()[i];
        }
        const Matrix w_up = gaussian_matrix(rng, model_dim, model_dim, proj_scale);
        const Matrix w_down = gaussian_matrix(rng, model_dim, model_dim, proj_scale);
        Matrix act = matmul(rms_normalized(hidden), w_up);
        for (double& x : act.data()) {
            x = std::tanh(x);
        }
        const Matrix mlp_out = matmul(act, w_down);
        for (std::size_t i = 0; i < hidden.data().size(); ++i) {
            hidden.data()[i] += mlp_out.data()[i];
        }
    }

    TraceDims dims{options.layers, options.heads, head_dim, options.prompt_len, total_len};
    return AttentionTrace("synthetic-seed" + std::to_string(options.seed), dims, std::move(heads));
}

// Binary format ------------------------------------------------------------

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
}

void put_f64(std::vector<unsigned char>& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
    }
}

std::uint32_t get_u32(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    }
    return v;
}

double get_f64(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
        bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    }
    return std::bit_cast<double>(bits);
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
    if (v > std::numeric_limits<std::uint32_t>::max()) {
        throw ContractViolation(std::string("write_trace: ") + what + " does not fit in u32");
    }
    return static_cast<std::uint32_t>(v);
}

std::string printable(const unsigned char* p, std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) {
        const char c = static_cast<char>(p[i]);
        s += (c >= 0x20 && c < 0x7f) ? c : '?';
    }
    return s;
}

}  // namespace

std::vector<unsigned char> encode_trace(const AttentionTrace& trace) {
    const auto& d = trace.dims();
    std::vector<unsigned char> out;
    const std::size_t payload = d.num_layers * d.num_heads * 3 * d.total_len * d.head_dim * 8;
    out.reserve(kTraceFixedHeaderBytes + trace.model_name().size() + payload);

    for (char c : kTraceMagic) {
        out.push_back(static_cast<unsigned char>(c));
    }
    put_u32(out, kTraceVersion);
    put_u32(out, trace.flags());
    put_u32(out, checked_u32(d.num_layers, "num_layers"));
    put_u32(out, checked_u32(d.num_heads, "num_heads"));
    put_u32(out, checked_u32(d.head_dim, "head_dim"));
    put_u32(out, checked_u32(d.prompt_len, "prompt_len"));
    put_u32(out, checked_u32(d.total_len, "total_len"));
    put_u32(out, checked_u32(trace.model_name().size(), "model name length"));
    for (char c : trace.model_name()) {
        out.push_back(static_cast<unsigned char>(c));
    }

    for (const auto& h : trace.all_heads()) {
        for (const Matrix* m : {&h.q, &h.k, &h.v}) {
            for (double x : m->data()) {
                put_f64(out, x);
            }
        }
    }
    return out;
}

AttentionTrace decode_trace(const std::vector<unsigned char>& bytes) {
    using Kind = TraceParseError::Kind;
    if (bytes.size() < sizeof(kTraceMagic)) {
        throw TraceParseError(Kind::truncated, "truncated trace: expected at least " +
                                                   std::to_string(kTraceFixedHeaderBytes) + " header bytes, got " +
                                                   std::to_string(bytes.size()));
    }
    if (std::memcmp(bytes.data(), kTraceMagic, sizeof(kTraceMagic)) != 0) {
        throw TraceParseError(Kind::bad_magic, "bad magic: expected 'KVTRACE1', found '" +
                                                   printable(bytes.data(), sizeof(kTraceMagic)) + "'");
    }
    if (bytes.size() < kTraceFixedHeaderBytes) {
        throw TraceParseError(Kind::truncated, "truncated trace: expected at least " +
                                                   std::to_string(kTraceFixedHeaderBytes) + " header bytes, got " +
                                                   std::to_string(bytes.size()));
    }
    const unsigned char* p = bytes.data() + sizeof(kTraceMagic);
    const std::uint32_t version = get_u32(p);
    if (version != kTraceVersion) {
        throw TraceParseError(Kind::version_mismatch, "unsupported trace version " + std::to_string(version) +
                                                          " (reader supports " + std::to_string(kTraceVersion) + ")");
    }
    const std::uint32_t flags = get_u32(p + 4);
    TraceDims dims{get_u32(p + 8), get_u32(p + 12), get_u32(p + 16), get_u32(p + 20), get_u32(p + 24)};
    const std::uint32_t name_len = get_u32(p + 28);

    if (dims.num_layers == 0 || dims.num_heads == 0 || dims.head_dim == 0 || dims.prompt_len == 0 ||
        dims.total_len < dims.prompt_len) {
        throw TraceParseError(Kind::invalid_dims,
                              "invalid trace dims: layers=" + std::to_string(dims.num_layers) +
                                  " heads=" + std::to_string(dims.num_heads) + " head_dim=" +
                                  std::to_string(dims.head_dim) + " prompt_len=" + std::to_string(dims.prompt_len) +
                                  " total_len=" + std::to_string(dims.total_len));
    }

    std::uint64_t expected = 0;
    {
        std::uint64_t values = 3;
        bool overflow = false;
        for (std::uint64_t f : {std::uint64_t{dims.num_layers}, std::uint64_t{dims.num_heads},
                                std::uint64_t{dims.total_len}, std::uint64_t{dims.head_dim}, std::uint64_t{8}}) {
            overflow = overflow || values > std::numeric_limits<std::uint64_t>::max() / f;
            values *= f;
        }
        if (overflow || values > std::numeric_limits<std::uint64_t>::max() - kTraceFixedHeaderBytes - name_len) {
            throw TraceParseError(Kind::invalid_dims, "invalid trace dims: payload size overflows");
        }
        expected = kTraceFixedHeaderBytes + name_len + values;
    }
    if (bytes.size() < expected) {
        throw TraceParseError(Kind::truncated, "truncated trace: expected " + std::to_string(expected) +
                                                   " bytes, got " + std::to_string(bytes.size()));
    }
    if (bytes.size() > expected) {
        throw TraceParseError(Kind::trailing_bytes, "trailing bytes in trace: expected " + std::to_string(expected) +
                                                        " bytes, got " + std::to_string(bytes.size()));
    }

    std::string name(reinterpret_cast<const char*>(bytes.data() + kTraceFixedHeaderBytes), name_len);
    const unsigned char* cursor = bytes.data() + kTraceFixedHeaderBytes + name_len;
    const std::size_t block = dims.total_len * dims.head_dim;

    auto read_block = [&]() {
        std::vector<double> values(block);
        for (double& x : values) {
            x = get_f64(cursor);
            cursor += 8;
            if (!std::isfinite(x)) {
                throw TraceParseError(Kind::non_finite, "trace payload contains a non-finite value");
            }
        }
        return Matrix(dims.total_len, dims.head_dim, std::move(values));
    };

    std::vector<HeadTensors> heads;
    heads.reserve(dims.num_layers * dims.num_heads);
    for (std::size_t i = 0; i < dims.num_layers * dims.num_heads; ++i) {
        HeadTensors t;
        t.q = read_block();
        t.k = read_block();
        t.v = read_block();
        heads.push_back(std::move(t));
    }
    return AttentionTrace(std::move(name), dims, std::move(heads), flags);
}

void write_trace(const AttentionTrace& trace, const std::filesystem::path& path) {
    const auto bytes = encode_trace(trace);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("write_trace: cannot open " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw std::runtime_error("write_trace: write failed for " + path.string());
    }
}

AttentionTrace read_trace(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw TraceParseError(TraceParseError::Kind::io, "cannot open trace file " + path.string());
    }
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_trace(bytes);
}

}  // namespace kvc
