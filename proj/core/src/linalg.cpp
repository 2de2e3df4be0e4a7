// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvcompress/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace kvc {

Matrix::Matrix(std::size_t rows, std::size_t cols) : m_rows(rows), m_cols(cols), m_data(rows * cols, 0.0) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : m_rows(rows), m_cols(cols), m_data(std::move(data)) {
    if (m_data.size() != rows * cols) {
        throw ContractViolation("Matrix: data length " + std::to_string(m_data.size()) + " != " +
                                std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix m;
    for (const auto& r : rows) {
        m.append_row(std::span<const double>(r.begin(), r.size()));
    }
    return m;
}

void Matrix::append_row(std::span<const double> values) {
    if (m_rows == 0 && m_cols == 0) {
        m_cols = values.size();
    }
    if (values.size() != m_cols) {
        throw ContractViolation("Matrix::append_row: width " + std::to_string(values.size()) + " != " +
                                std::to_string(m_cols));
    }
    m_data.insert(m_data.end(), values.begin(), values.end());
    ++m_rows;
}

void Matrix::erase_row(std::size_t r) {
    if (r >= m_rows) {
        throw ContractViolation("Matrix::erase_row: row " + std::to_string(r) + " out of range");
    }
    auto first = m_data.begin() + static_cast<std::ptrdiff_t>(r * m_cols);
    m_data.erase(first, first + static_cast<std::ptrdiff_t>(m_cols));
    --m_rows;
}

Matrix Matrix::slice_rows(std::size_t first, std::size_t count) const {
    if (first + count > m_rows) {
        throw ContractViolation("Matrix::slice_rows: range exceeds row count");
    }
    auto begin = m_data.begin() + static_cast<std::ptrdiff_t>(first * m_cols);
    return Matrix(count, m_cols, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(count * m_cols)));
}

Matrix Matrix::gather_rows(std::span<const std::size_t> indices) const {
    Matrix out(indices.size(), m_cols);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= m_rows) {
            throw ContractViolation("Matrix::gather_rows: row index out of range");
        }
        std::copy_n(row(indices[i]).begin(), m_cols, out.row(i).begin());
    }
    return out;
}

void require_finite(std::span<const double> values, const std::string& what) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw ContractViolation(what + ": non-finite value");
        }
    }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ContractViolation("matmul: dimension mismatch " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " * " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out_row = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            auto b_row = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                out_row[j] += aik * b_row[j];
            }
        }
    }
    require_finite(out.data(), "matmul");
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ContractViolation("dot: length mismatch");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

double l2_norm(std::span<const double> a) {
    return std::sqrt(dot(a, a));
}

double l2_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ContractViolation("l2_distance: length mismatch");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) {
        throw ContractViolation("softmax: empty row");
    }
    const double peak = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double total = 0.0;
    for (std::size_t j = 0; j < logits.size(); ++j) {
        out[j] = std::exp(logits[j] - peak);
        total += out[j];
    }
    for (double& p : out) {
        p /= total;
    }
    require_finite(out, "softmax");
    return out;
}

Matrix causal_softmax(const Matrix& scores) {
    if (scores.empty() || scores.cols() == 0) {
        throw ContractViolation("causal_softmax: empty matrix");
    }
    if (scores.rows() == 1) {
        auto row = softmax(scores.row(0));
        const std::size_t width = row.size();
        return Matrix(1, width, std::move(row));
    }
    if (scores.rows() != scores.cols()) {
        throw ContractViolation("causal_softmax: expected L x L or 1 x L scores");
    }
    const std::size_t n = scores.rows();
    Matrix out(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        auto probs = softmax(scores.row(i).first(i + 1));
        std::copy(probs.begin(), probs.end(), out.row(i).begin());
    }
    return out;
}

Matrix attention_logits(const Matrix& q, const Matrix& k) {
    if (q.cols() != k.cols()) {
        throw ContractViolation("attention_logits: head dimension mismatch");
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Matrix out(q.rows(), k.rows());
    for (std::size_t i = 0; i < q.rows(); ++i) {
        for (std::size_t j = 0; j < k.rows(); ++j) {
            out(i, j) = dot(q.row(i), k.row(j)) * scale;
        }
    }
    require_finite(out.data(), "attention_logits");
    return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ContractViolation("cosine_similarity: length mismatch");
    }
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na < kZeroNormEpsilon || nb < kZeroNormEpsilon) {
        return 0.0;
    }
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

std::vector<double> column_sums(const Matrix& a) {
    std::vector<double> sums(a.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto r = a.row(i);
        for (std::size_t j = 0; j < a.cols(); ++j) {
            sums[j] += r[j];
        }
    }
    return sums;
}

double population_variance(std::span<const double> values) {
    if (values.empty()) {
        throw ContractViolation("population_variance: no values");
    }
    double mean = 0.0;
    for (double v : values) {
        mean += v;
    }
    mean /= static_cast<double>(values.size());
    double acc = 0.0;
    for (double v : values) {
        acc += (v - mean) * (v - mean);
    }
    return acc / static_cast<double>(values.size());
}

double column_sum_variance(const Matrix& a) {
    if (a.cols() < 1) {
        throw ContractViolation("column_sum_variance: matrix has no columns");
    }
    return population_variance(column_sums(a));
}

}  // namespace kvc
