#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dtk/tensor.hpp"

namespace dtk {

// Differentiable operations. Every op validates shapes, rejects non-finite
// results and records a backward rule on the active tape when needed.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// x[m×n] + row[1×n], the row broadcast over all m rows.
template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& row);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
/// s[1×1] · x, differentiable in both.
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, const Tensor<T>& s);

/// GELU, tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

/// [n×D] -> [1×D] column means.
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x);
/// Sum of all elements -> [1×1].
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
/// [m×n] -> [m×1] row sums.
template <typename T>
Tensor<T> sum_cols(const Tensor<T>& x);
/// [n×n] -> [n×1] diagonal.
template <typename T>
Tensor<T> diag(const Tensor<T>& x);

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count);
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count);
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
/// Embedding lookup: rows of `table` selected by `ids`.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::int32_t> ids);

/// 1-D convolution over time, stride 1, zero "same" padding.
/// x: [T×c_in], weight: [c_out×c_in×k] (k odd), bias: [c_out] -> [T×c_out].
template <typename T>
Tensor<T> conv1d_same(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Row-wise l2 normalization; a zero row is a NumericError.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x);
/// Per-row log-sum-exp over entries where mask is nonzero -> [m×1].
template <typename T>
Tensor<T> logsumexp_rows_masked(const Tensor<T>& x, std::span<const std::uint8_t> mask);
/// Summed softmax cross-entropy over the rows of logits [m×C].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// x·W + b, with W stored [in×out] and b [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    return add_row(matmul(x, weight), bias);
}

}  // namespace dtk
