#pragma once

#include <cstddef>
#include <span>

#include "etl/tensor.hpp"

// Differentiable operators. Every op validates shapes, rejects non-finite
// results, and records a backward closure when any input requires grad.
namespace etl::ops {

// Elementwise binary ops. `b` either matches `a` or matches a trailing
// suffix of a's shape, in which case it is broadcast over the leading axes
// (bias vectors, channel masks, a trigger added to an image batch).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

// [M,K] x [K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);

// NHWC convolution. x: [B,H,W,Cin], weight: [Cout,K,K,Cin], bias: [Cout].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride = 1, std::size_t padding = 0);

Tensor relu(const Tensor& a);
// Non-overlapping 2x2 mean pooling on [B,H,W,C]; H and W must be even.
Tensor avgpool2x2(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
// [B, ...] -> [B, prod(...)]
Tensor flatten(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Mean softmax cross-entropy of logits [N,C] against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

// Unit-normalizes along the last axis; throws DegenerateEmbeddingError when
// a row norm is <= 1e-12.
Tensor l2_normalize(const Tensor& a);

// 1-D inner product -> scalar.
Tensor dot(const Tensor& a, const Tensor& b);
// Row-wise inner product of [N,D] with [N,D] or [D] -> [N].
Tensor rowwise_dot(const Tensor& a, const Tensor& b);

// Clamp to [lo, hi]. The gradient passes wherever lo <= x <= hi and is zero
// where the clamp saturates.
Tensor clip(const Tensor& a, double lo, double hi);

// cos(a, b) for equal-length vectors -> scalar in [-1, 1].
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
// Row-wise cosine of [N,D] against [N,D] or a single [D] -> [N].
Tensor rowwise_cosine(const Tensor& a, const Tensor& b);

}  // namespace etl::ops
