// Copyright (C) 2026 The kvcompress Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kvc {

/// Raised when a caller breaks an operation's precondition (shape mismatch,
/// empty input, out-of-range index).
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const { return m_rows; }
    std::size_t cols() const { return m_cols; }
    bool empty() const { return m_rows == 0; }

    double& operator()(std::size_t r, std::size_t c) { return m_data[r * m_cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return m_data[r * m_cols + c]; }

    std::span<double> row(std::size_t r) { return {m_data.data() + r * m_cols, m_cols}; }
    std::span<const double> row(std::size_t r) const { return {m_data.data() + r * m_cols, m_cols}; }

    std::span<const double> data() const { return m_data; }
    std::span<double> data() { return m_data; }

    /// Appends a row; an empty matrix adopts the row's width.
    void append_row(std::span<const double> values);
    /// Removes row `r`, shifting later rows up.
    void erase_row(std::size_t r);
    /// Copy of rows [first, first + count).
    Matrix slice_rows(std::size_t first, std::size_t count) const;
    /// Copy of the listed rows, in the given order.
    Matrix gather_rows(std::span<const std::size_t> indices) const;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t m_rows = 0;
    std::size_t m_cols = 0;
    std::vector<double> m_data;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);
double l2_distance(std::span<const double> a, std::span<const double> b);

/// Numerically stable softmax of one logit row.
std::vector<double> softmax(std::span<const double> logits);

/// Row softmax with causal masking. A square L x L input is treated as
/// prompt-mode scores (entries j > i masked to exactly 0); a 1 x L input is a
/// single generation-mode row with no mask.
Matrix causal_softmax(const Matrix& scores);

/// Q K^T / sqrt(head_dim), with head_dim = q.cols().
Matrix attention_logits(const Matrix& q, const Matrix& k);

/// Cosine similarity clamped to [-1, 1]. Returns 0 when either norm is below
/// kZeroNormEpsilon.
double cosine_similarity(std::span<const double> a, std::span<const double> b);
inline constexpr double kZeroNormEpsilon = 1e-12;

std::vector<double> column_sums(const Matrix& a);

/// Population variance of the per-column sums.
double column_sum_variance(const Matrix& a);

double population_variance(std::span<const double> values);

/// Throws ContractViolation if any entry is NaN or infinite.
void require_finite(std::span<const double> values, const std::string& what);

}  // namespace kvc
