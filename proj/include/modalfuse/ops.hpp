#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "modalfuse/autograd.hpp"
#include "modalfuse/rng.hpp"

// Differentiable primitives. Layout conventions:
//   token tensors are channel-last [B, ..., C];
//   feature maps are channel-first [B, C, H, W];
//   weight matrices are [out, in].
namespace modalfuse::ops {

// Elementwise, equal shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var abs(const Var& x);
Var relu(const Var& x);
Var gelu(const Var& x);
Var sigmoid(const Var& x);

/// x * v + shift broadcast along the last axis (v, shift have length C).
Var mul_lastdim(const Var& x, const Var& v);
Var add_lastdim(const Var& x, const Var& v);

/// x + t where t matches the trailing dims of x (broadcast over leading dims).
Var add_broadcast(const Var& x, const Var& t);

/// y = x W^T + b over the last axis; bias may be undefined.
Var linear(const Var& x, const Var& weight, const Var& bias);

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);

/// Multi-head scaled dot-product self-attention on packed qkv [B, ..., 3C].
/// Every position in the middle dims attends to every other.
Var self_attention(const Var& qkv, std::int64_t heads);

/// Inverted dropout. Identity when rng is null or rate is 0.
Var dropout(const Var& x, double rate, Rng* rng);

Var concat(const std::vector<Var>& parts, std::size_t axis);

/// [B, H, W, C] -> [B, C, H, W] and back.
Var channels_first(const Var& x);
Var channels_last(const Var& x);

/// [B, ..., C] -> [B, N, C] style reshapes with gradient passthrough.
Var reshape(const Var& x, Shape shape);

/// 1x1 convolution on [B, Cin, H, W] with weight [Cout, Cin].
Var conv1x1(const Var& x, const Var& weight, const Var& bias);

/// 3x3 convolution, stride 1, zero padding 1, weight [Cout, Cin, 3, 3].
Var conv3x3(const Var& x, const Var& weight, const Var& bias);

Var group_norm(const Var& x, std::int64_t groups, const Var& gamma, const Var& beta, double eps);

Var adaptive_avg_pool(const Var& x, std::int64_t out_h, std::int64_t out_w);

/// Bilinear resize of [B, C, H, W] with corner-aligned sampling
/// (source = target * (in - 1) / (out - 1)).
Var resize_bilinear(const Var& x, std::int64_t out_h, std::int64_t out_w);

/// g * x + (1 - g) * y.
Var gated_mix(const Var& g, const Var& x, const Var& y);

/// Non-overlapping p x p patches of [B, Cin, H, W] flattened to
/// [B, H/p, W/p, Cin*p*p] in (channel, row, col) order.
Var patchify(const Var& image, std::int64_t patch);

/// Mean per-pixel cross-entropy of logits [B, K, H, W] against labels
/// [B, H, W]. Pixels equal to ignore_index, or with include[i] == 0 when an
/// include mask is given, are skipped. Zero (with zero gradient) when no pixel
/// is selected.
Var cross_entropy(const Var& logits, const std::vector<std::int32_t>& labels,
                  std::int32_t ignore_index, const std::vector<std::uint8_t>* include = nullptr);

/// sum(x * weights) as a scalar; convenient for gradient checks.
Var weighted_sum(const Var& x, const Tensor& weights);
Var sum(const Var& x);

// Non-differentiable helpers.

/// Bicubic resample of a channel-last grid [H0, W0, C] to [H, W, C] with
/// half-pixel centres, kernel coefficient a = -0.75 and edge clamping.
Tensor resize_bicubic(const Tensor& grid, std::int64_t out_h, std::int64_t out_w);

/// Cubic convolution kernel used by resize_bicubic.
double cubic_kernel(double distance, double a = -0.75);

}  // namespace modalfuse::ops
