#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "starformer/rng.hpp"
#include "starformer/tensor.hpp"

// Differentiable primitives. Every function computes values eagerly and, when
// a tape is active and some input requires a gradient, records a backward
// rule onto it. Binary arithmetic broadcasts trailing-aligned extents
// (equal or 1); the backward rule reduces over broadcast dims.
namespace starformer::ops {

Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x); // exact erf form
Tensor clamp_min(const Tensor& x, double floor);

// Batched matrix product a[..,m,k] * b[..,k,n] -> [..,m,n], leading extents
// broadcastable. Backward: dA += dC*B^T, dB += A^T*dC.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& x, std::int64_t axis0, std::int64_t axis1);
Tensor reshape(const Tensor& x, Shape shape);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis);
Tensor slice(const Tensor& x, std::int64_t axis, std::int64_t start, std::int64_t length);
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& indices);
Tensor diag_part(const Tensor& x); // [n,n] -> [n]

// Replaces entries where mask is true with `value`; gradient is zero there.
Tensor masked_fill(const Tensor& x, const BoolMask& mask, double value);

Tensor sum_all(const Tensor& x);  // -> rank-0
Tensor mean_all(const Tensor& x); // -> rank-0
Tensor sum_axis(const Tensor& x, std::int64_t axis);
Tensor mean_axis(const Tensor& x, std::int64_t axis);

// Numerically stable softmax over the last axis. With a mask (same shape,
// true = participates) masked entries are exactly 0 and each slice
// renormalizes over its surviving entries; a fully masked slice is an error.
Tensor softmax_lastdim(const Tensor& x, const BoolMask* mask = nullptr);

// Per-row normalization over the last axis followed by the affine gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Train-mode inverted dropout; rate 0 is the identity. The keep mask is
// drawn from `rng` element by element, so a reseeded rng reproduces it.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

// out[b,f] = sum_t w[b,t] * x[b,t,f]; w is a constant (no gradient).
Tensor weighted_sum_rows(const Tensor& x, const Tensor& w);

// Mean over batch of -log softmax(logits)[label]; fused stable forward and
// backward. logits [B,C], labels in [0,C).
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<std::int64_t>& labels);

// Binary cross entropy on a single logit per row ([B] or [B,1]), labels 0/1.
Tensor binary_cross_entropy_logits(const Tensor& logits, const std::vector<std::int64_t>& labels);

} // namespace starformer::ops

namespace starformer {
inline Tensor operator+(const Tensor& a, const Tensor& b) { return ops::add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return ops::sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return ops::mul(a, b); }
} // namespace starformer
