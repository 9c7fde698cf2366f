#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rinv/tensor.hpp"

namespace rinv {

// Differentiable operations. Every function validates shapes and throws
// DimensionError on mismatch.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value);

// x[N x M] + bias[M] broadcast over rows.
template <typename T>
Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& bias);

// x[B x C x H x W] + bias[C] broadcast over batch and space.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias);

// Gradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& a);

template <typename T>
Tensor<T> exp(const Tensor<T>& a);

template <typename T>
Tensor<T> log(const Tensor<T>& a);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> mean(const Tensor<T>& a);

// out[i] = <a_i, b_i> for row-aligned matrices.
template <typename T>
Tensor<T> rowwise_dot(const Tensor<T>& a, const Tensor<T>& b);

// Stride-1 cross-correlation with zero padding.
// x[B x C x H x W], w[F x C x k x k] -> [B x F x (H+2p-k+1) x (W+2p-k+1)].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t padding);

// 2x2 window, stride 2. H and W must be even.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x);

// [B x C x H x W] -> [B x C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

inline constexpr double kNormFloor = 1e-12;

// Rows scaled to unit Euclidean norm; throws DegenerateEmbeddingError when a
// row norm is at or below kNormFloor.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x);

// log sum_j exp(x_ij) with a per-row max shift. [N x M] -> [N]
template <typename T>
Tensor<T> log_sum_exp_rows(const Tensor<T>& x);

// Same, restricted to entries whose mask byte is nonzero. Every row must keep
// at least one entry.
template <typename T>
Tensor<T> log_sum_exp_rows_masked(const Tensor<T>& x, std::span<const std::uint8_t> mask);

// Mean softmax cross-entropy. logits[N x C], labels in [0, C).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace rinv
