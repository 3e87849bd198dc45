#pragma once

#include <vector>

#include "evircod/tensor.hpp"

// Differentiable tensor operations. Binary elementwise ops broadcast with
// numpy semantics; image-like tensors are NCHW; token sequences are B x N x D.
namespace evircod {

// --- elementwise, broadcasting -------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
/// s - a
Tensor rsub_scalar(double s, const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator-(double s, const Tensor& a) { return rsub_scalar(s, a); }

// --- elementwise, unary ----------------------------------------------------
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
/// log(1 + e^x), smooth and strictly positive.
Tensor softplus(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
/// x^p for x >= 0.
Tensor pow_scalar(const Tensor& x, double p);
/// Identity inside [lo, hi] with unit gradient there, zero gradient outside.
Tensor clamp(const Tensor& x, double lo, double hi);
/// Elementwise digamma; gradient via trigamma.
Tensor digamma(const Tensor& x);

/// Numerically stable per-element binary cross-entropy on logits.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// --- reductions -----------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axes(const Tensor& x, std::vector<int> axes, bool keepdim);
Tensor mean_axes(const Tensor& x, std::vector<int> axes, bool keepdim);

// --- layout -----------------------------------------------------------------
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, std::vector<int> order);
Tensor transpose(const Tensor& x, int a, int b);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int length);

// --- linear algebra --------------------------------------------------------
/// [..., M, K] x [K, N] (shared right operand) or [..., M, K] x [..., K, N].
Tensor matmul(const Tensor& a, const Tensor& b);
/// [..., M, K] x [..., N, K]^T -> [..., M, N].
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor softmax_last(const Tensor& x);
Tensor layer_norm_last(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// --- image ops (NCHW) --------------------------------------------------------
/// weight: OC x IC x KH x KW; bias may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding);

/// Batch normalization over (N, H, W). In training mode the running
/// statistics are updated in place.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training,
                    double momentum = 0.1, double eps = 1e-5);

/// Bilinear resize with half-pixel centers (align_corners = false).
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);

/// Resamples per-head token features laid out on a side x side grid.
/// values: B x H x N x d, offsets: B x H x N x 2 (dx, dy in token units).
/// Token j is read back from grid position (j % side, j / side) + scale * offset
/// by bilinear interpolation; out-of-grid taps contribute zero.
Tensor sample_token_grid(const Tensor& values, const Tensor& offsets, int side, double scale);

// --- fixed filters ------------------------------------------------------------
/// Horizontal and vertical 3x3 Sobel responses of a single-channel map with zero
/// padding, returned as B x 2 x H x W.
Tensor sobel_xy(const Tensor& x);

}  // namespace evircod
