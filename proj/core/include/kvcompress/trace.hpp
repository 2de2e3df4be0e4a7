// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "kvcompress/linalg.hpp"

namespace kvc {

/// Query/key/value rows of one attention head, one row per token.
struct HeadTensors {
    Matrix q;
    Matrix k;
    Matrix v;

    friend bool operator==(const HeadTensors&, const HeadTensors&) = default;
};

/// Header flag bits. The engine's math ignores them; they record how an
/// external exporter produced the tensors.
enum TraceFlags : std::uint32_t {
    kTraceFlagNone = 0,
    kTraceFlagPostPositional = 1u << 0,   // keys/queries captured after positional encoding
    kTraceFlagReplicatedKvHeads = 1u << 1 // grouped K/V heads replicated to query heads
};

struct TraceDims {
    std::size_t num_layers = 0;
    std::size_t num_heads = 0;
    std::size_t head_dim = 0;
    std::size_t prompt_len = 0;
    std::size_t total_len = 0;

    std::size_t generation_len() const { return total_len - prompt_len; }
    friend bool operator==(const TraceDims&, const TraceDims&) = default;
};

/// Per-layer, per-head Q/K/V for a prompt followed by generated tokens.
/// Immutable once constructed.
class AttentionTrace {
public:
    AttentionTrace() = default;
    /// `heads` is layer-major, head-minor. Throws ContractViolation when the
    /// shapes or values break the trace invariants.
    AttentionTrace(std::string model_name, TraceDims dims, std::vector<HeadTensors> heads,
                   std::uint32_t flags = kTraceFlagNone);

    const std::string& model_name() const { return m_model_name; }
    const TraceDims& dims() const { return m_dims; }
    std::uint32_t flags() const { return m_flags; }

    std::size_t num_layers() const { return m_dims.num_layers; }
    std::size_t num_heads() const { return m_dims.num_heads; }
    std::size_t head_dim() const { return m_dims.head_dim; }
    std::size_t prompt_len() const { return m_dims.prompt_len; }
    std::size_t total_len() const { return m_dims.total_len; }

    const HeadTensors& head(std::size_t layer, std::size_t head) const;
    const std::vector<HeadTensors>& all_heads() const { return m_heads; }

    friend bool operator==(const AttentionTrace&, const AttentionTrace&) = default;

private:
    std::string m_model_name;
    TraceDims m_dims;
    std::uint32_t m_flags = kTraceFlagNone;
    std::vector<HeadTensors> m_heads;
};

struct SyntheticOptions {
    std::uint64_t seed = 1;
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t head_dim = 16;
    std::size_t prompt_len = 192;
    std::size_t gen_len = 64;
    /// Extra logit every query gives token 0 in the deepest layer. Scales
    /// linearly with depth from 0 at layer 0.
    double sink_logit_boost = 12.0;
    /// AR(1) coefficient linking consecutive token embeddings; 0 gives
    /// independent tokens.
    double token_correlation = 0.5;
};

/// Builds a trace from a small random-weight causal transformer. Output is a
/// pure function of `options`.
AttentionTrace generate_synthetic(const SyntheticOptions& options);

// Binary format ------------------------------------------------------------

inline constexpr char kTraceMagic[8] = {'K', 'V', 'T', 'R', 'A', 'C', 'E', '1'};
inline constexpr std::uint32_t kTraceVersion = 1;
/// Fixed part of the header, before the model name bytes.
inline constexpr std::size_t kTraceFixedHeaderBytes = 40;

class TraceParseError : public std::runtime_error {
public:
    enum class Kind { io, bad_magic, version_mismatch, invalid_dims, truncated, trailing_bytes, non_finite };

    TraceParseError(Kind kind, const std::string& message) : std::runtime_error(message), m_kind(kind) {}

    Kind kind() const { return m_kind; }

private:
    Kind m_kind;
};

void write_trace(const AttentionTrace& trace, const std::filesystem::path& path);
AttentionTrace read_trace(const std::filesystem::path& path);

/// In-memory forms of the file format; the file functions wrap these.
std::vector<unsigned char> encode_trace(const AttentionTrace& trace);
AttentionTrace decode_trace(const std::vector<unsigned char>& bytes);

}  // namespace kvc
