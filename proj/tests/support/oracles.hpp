// SPDX-License-Identifier: Apache-2.0
//
// Deliberately naive reference implementations used to cross-check the
// library: images are nested vectors, borders are materialised as padded
// copies, and every statistic is a plain summation loop.
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "ctrlfuse/tensor.hpp"

namespace oracle {

using Image = std::vector<std::vector<double>>;  // [row][col]

Image to_image(const ctrlfuse::ad::Tensor& t);
ctrlfuse::ad::Tensor to_tensor(const Image& img);

/// Uniform [0, 1) image, optionally smoothed so edges and flat areas coexist.
Image random_image(std::mt19937_64& rng, std::size_t h, std::size_t w, bool smooth = false);

/// sqrt(gx^2 + gy^2 + eps) with 3x3 Sobel kernels and replicated borders.
Image sobel_magnitude(const Image& img, double eps);

double mse(const Image& a, const Image& b);
double psnr(const Image& a, const Image& b);
double ssim(const Image& a, const Image& b);
double ssim_block(const Image& a, const Image& b);
double qabf(const Image& f, const Image& a, const Image& b);
double qabf_block(const Image& f, const Image& a, const Image& b);
double nabf(const Image& f, const Image& a, const Image& b);
double scd(const Image& f, const Image& a, const Image& b);
double scd_block(const Image& f, const Image& a, const Image& b);

struct Iou {
    std::vector<std::optional<double>> per_class;
    double miou = 0.0;
};
Iou iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt, std::size_t classes);

/// max |a - b| over two equally sized tensors.
double linf(const ctrlfuse::ad::Tensor& a, const ctrlfuse::ad::Tensor& b);
/// sum |a - b|.
double l1(const ctrlfuse::ad::Tensor& a, const ctrlfuse::ad::Tensor& b);

}  // namespace oracle
