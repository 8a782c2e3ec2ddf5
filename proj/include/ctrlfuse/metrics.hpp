// SPDX-License-Identifier: Apache-2.0
//
// Fusion quality metrics over single-channel 1 x H x W images in [0, 1].
// Block variants tile the image into 8 x 8 blocks (edge blocks may be
// smaller) and average with uniform weights.
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ctrlfuse/tensor.hpp"

namespace ctrlfuse::metrics {

using ad::Tensor;

inline constexpr std::size_t kBlock = 8;
inline constexpr double kPsnrCap = 100.0;
inline constexpr double kNabfC = 1e-6;

double mse(const Tensor& a, const Tensor& b);
/// 10 log10(max^2 / mse), capped at 100 dB.
double psnr_from_mse(double mse, double max_val = 1.0);
double psnr(const Tensor& a, const Tensor& b, double max_val = 1.0);

/// Global-statistics SSIM, C1 = (0.01 max)^2, C2 = (0.03 max)^2.
double ssim(const Tensor& x, const Tensor& y, double max_val = 1.0);
double ssim_block(const Tensor& x, const Tensor& y, double max_val = 1.0);

/// Xydeas-Petrovic edge-transfer measure with Sobel strength/orientation and
/// gradient-magnitude weights; 0 when neither source has an edge.
double qabf(const Tensor& fused, const Tensor& ir, const Tensor& vis);
/// Block mean of (Q(F, ir) + Q(F, vis)) / 2 with Q the SSIM-like product
/// of luminance and covariance factors.
double qabf_block(const Tensor& fused, const Tensor& ir, const Tensor& vis, double max_val = 1.0);

/// Block mean of sigma_n / (|cov(ir, vis)| + C); sigma_n is the standard
/// deviation of fused minus its 3x3 mean filter (replicate border).
double nabf(const Tensor& fused, const Tensor& ir, const Tensor& vis);

/// Pearson correlation; 0 when either side has zero variance.
double pearson(const double* a, const double* b, std::size_t n);
/// r(F - vis, ir) + r(F - ir, vis).
double scd(const Tensor& fused, const Tensor& ir, const Tensor& vis);
/// Block mean of |r(ir, F) + r(vis, F) - 2|.
double scd_block(const Tensor& fused, const Tensor& ir, const Tensor& vis);

struct IouResult {
    std::vector<std::optional<double>> per_class;  // empty when the union is empty
    double miou = 0.0;                              // over classes present in gt
    std::size_t classes_counted = 0;
};

IouResult iou_miou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                   std::size_t num_classes);

struct MetricReport {
    double mse = 0, psnr = 0, qabf = 0, nabf = 0, ssim = 0, scd = 0;

    /// mse / psnr / ssim average the (F, ir) and (F, vis) comparisons; qabf is
    /// the gradient form and scd the whole-image correlation form.
    static MetricReport evaluate(const Tensor& fused, const Tensor& ir, const Tensor& vis_y);
    static const char* qabf_variant() { return "xydeas"; }
    static const char* scd_variant() { return "classical"; }
};

struct NamedReport {
    std::string image_id;
    MetricReport report;
};

MetricReport aggregate_mean(const std::vector<NamedReport>& reports);
/// Header image_id,mse,psnr,qabf,nabf,ssim,scd.
void write_csv(std::ostream& out, const std::vector<NamedReport>& reports);
std::string aggregate_json(const std::vector<NamedReport>& reports);

}  // namespace ctrlfuse::metrics
