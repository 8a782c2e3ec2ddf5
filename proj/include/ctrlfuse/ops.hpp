// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Image-like tensors are C x H x W; token
// matrices are N x D. Binary elementwise ops accept `b` of the same shape as
// `a`, a single element, or `a`'s shape with a run of trailing 1s
// (e.g. C x 1 x 1 against C x H x W). Nothing else broadcasts.
#pragma once

#include <cstddef>
#include <vector>

#include "ctrlfuse/tensor.hpp"

namespace ctrlfuse::ad {

inline constexpr double kLeakySlope = 0.2;

// elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
/// Gradient goes to the larger operand; ties go to `a`.
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor leaky_relu(const Tensor& a, double slope = kLeakySlope);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
/// Subgradient at 0 is 0.
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor log(const Tensor& a);
/// Values clipped to [lo, hi]; gradient is zero where clipping is active.
Tensor clamp(const Tensor& a, double lo, double hi);

// reductions
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// x[N x D] + b[D] added to every row.
Tensor add_row_bias(const Tensor& x, const Tensor& b);
/// Mean over rows: [N x D] -> [1 x D].
Tensor mean_rows(const Tensor& x);
Tensor softmax_rows(const Tensor& x);
/// softmax(q k^T / sqrt(d)) v per head, d = D / heads; heads split the
/// feature dimension into contiguous slices.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads = 1);

// spatial
enum class Padding { zeros, replicate };

/// Cross-correlation. x[Cin x H x W], w[Cout x Cin x k x k], optional bias[Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t padding);
/// Per-channel k x k filter (w[C x k x k]) with "same" output size.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, Padding padding);
/// Mean over window x window tiles; ragged edges are padded by replicating
/// the last row/column.
Tensor avg_pool2d(const Tensor& x, std::size_t window);
/// C x H x W -> C x 1 x 1
Tensor global_avg_pool(const Tensor& x);
Tensor downsample_avg(const Tensor& x);
Tensor upsample_nearest(const Tensor& x, std::size_t factor);
/// Keep the top-left h x w window.
Tensor crop_spatial(const Tensor& x, std::size_t h, std::size_t w);

// reshaping
/// C x H x W -> (H*W) x C
Tensor flatten_spatial(const Tensor& x);
/// (H*W) x C -> C x H x W
Tensor view_spatial(const Tensor& x, std::size_t h, std::size_t w);
Tensor reshape(const Tensor& x, Shape shape);
/// Concatenate along the leading dimension; trailing extents must agree.
Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end);
/// C x 1 x 1 (or C) -> C x H x W
Tensor broadcast_spatial(const Tensor& x, std::size_t h, std::size_t w);
/// 1 x H x W (or H x W) -> C x H x W
Tensor broadcast_channels(const Tensor& x, std::size_t c);

}  // namespace ctrlfuse::ad
