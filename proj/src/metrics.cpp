// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include "json.hpp"
#include <numbers>
#include <ostream>

#include "ctrlfuse/errors.hpp"

namespace ctrlfuse::metrics {

namespace {

struct Plane {
    std::size_t h = 0, w = 0;
    const double* p = nullptr;

    double at(std::ptrdiff_t y, std::ptrdiff_t x) const {
        y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(h) - 1);
        x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(w) - 1);
        return p[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
    }
};

Plane plane(const Tensor& t) {
    if (t.ndim() != 3 || t.dim(0) != 1)
        throw ShapeError("metrics expect 1 x H x W images, got " + ad::to_string(t.shape()));
    return {t.dim(1), t.dim(2), t.data().data()};
}

void same_size(const Plane& a, const Plane& b) {
    if (a.h != b.h || a.w != b.w) throw ShapeError("metric inputs differ in size");
}

struct Stats {
    double mu_a = 0, mu_b = 0, var_a = 0, var_b = 0, cov = 0;
};

// Population moments over rows [y0, y1) x cols [x0, x1).
Stats moments(const Plane& a, const Plane& b, std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1) {
    Stats s;
    const double n = static_cast<double>((y1 - y0) * (x1 - x0));
    for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) {
            s.mu_a += a.p[y * a.w + x];
            s.mu_b += b.p[y * b.w + x];
        }
    s.mu_a /= n;
    s.mu_b /= n;
    for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) {
            const double da = a.p[y * a.w + x] - s.mu_a, db = b.p[y * b.w + x] - s.mu_b;
            s.var_a += da * da;
            s.var_b += db * db;
            s.cov += da * db;
        }
    s.var_a /= n;
    s.var_b /= n;
    s.cov /= n;
    return s;
}

double ssim_of(const Stats& s, double c1, double c2) {
    return (2 * s.mu_a * s.mu_b + c1) * (2 * s.cov + c2) /
           ((s.mu_a * s.mu_a + s.mu_b * s.mu_b + c1) * (s.var_a + s.var_b + c2));
}

template <typename F>
double block_mean(const Plane& p, F&& per_block) {
    double total = 0;
    std::size_t count = 0;
    for (std::size_t y0 = 0; y0 < p.h; y0 += kBlock)
        for (std::size_t x0 = 0; x0 < p.w; x0 += kBlock) {
            total += per_block(y0, std::min(p.h, y0 + kBlock), x0, std::min(p.w, x0 + kBlock));
            ++count;
        }
    return total / static_cast<double>(count);
}

struct Gradient {
    std::vector<double> strength, angle;
};

Gradient sobel(const Plane& p) {
    Gradient g;
    g.strength.resize(p.h * p.w);
    g.angle.resize(p.h * p.w);
    for (std::size_t y = 0; y < p.h; ++y)
        for (std::size_t x = 0; x < p.w; ++x) {
            const auto Y = static_cast<std::ptrdiff_t>(y), X = static_cast<std::ptrdiff_t>(x);
            const double gx = (p.at(Y - 1, X + 1) + 2 * p.at(Y, X + 1) + p.at(Y + 1, X + 1)) -
                              (p.at(Y - 1, X - 1) + 2 * p.at(Y, X - 1) + p.at(Y + 1, X - 1));
            const double gy = (p.at(Y + 1, X - 1) + 2 * p.at(Y + 1, X) + p.at(Y + 1, X + 1)) -
                              (p.at(Y - 1, X - 1) + 2 * p.at(Y - 1, X) + p.at(Y - 1, X + 1));
            g.strength[y * p.w + x] = std::sqrt(gx * gx + gy * gy);
            g.angle[y * p.w + x] = gx == 0.0 ? std::numbers::pi / 2 : std::atan(gy / gx);
        }
    return g;
}

// Edge preservation Q^{AF} at one pixel.
double edge_transfer(double g_src, double a_src, double g_f, double a_f) {
    constexpr double tg = 0.9994, kg = -15, dg = 0.5, ta = 0.9879, ka = -22, da = 0.8;
    double g = 0.0;
    if (g_src > g_f)
        g = g_f / g_src;
    else if (g_f > 0.0)
        g = g_src / g_f;
    const double a = 1.0 - std::abs(a_src - a_f) / (std::numbers::pi / 2);
    return tg / (1.0 + std::exp(kg * (g - dg))) * ta / (1.0 + std::exp(ka * (a - da)));
}

}  // namespace

double mse(const Tensor& a, const Tensor& b) {
    const Plane pa = plane(a), pb = plane(b);
    same_size(pa, pb);
    double s = 0;
    for (std::size_t i = 0; i < pa.h * pa.w; ++i) s += (pa.p[i] - pb.p[i]) * (pa.p[i] - pb.p[i]);
    return s / static_cast<double>(pa.h * pa.w);
}

double psnr_from_mse(double m, double max_val) {
    if (m <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(max_val * max_val / m));
}

double psnr(const Tensor& a, const Tensor& b, double max_val) { return psnr_from_mse(mse(a, b), max_val); }

double ssim(const Tensor& x, const Tensor& y, double max_val) {
    const Plane px = plane(x), py = plane(y);
    same_size(px, py);
    const double c1 = (0.01 * max_val) * (0.01 * max_val), c2 = (0.03 * max_val) * (0.03 * max_val);
    return ssim_of(moments(px, py, 0, px.h, 0, px.w), c1, c2);
}

double ssim_block(const Tensor& x, const Tensor& y, double max_val) {
    const Plane px = plane(x), py = plane(y);
    same_size(px, py);
    const double c1 = (0.01 * max_val) * (0.01 * max_val), c2 = (0.03 * max_val) * (0.03 * max_val);
    return block_mean(px, [&](auto y0, auto y1, auto x0, auto x1) {
        return ssim_of(moments(px, py, y0, y1, x0, x1), c1, c2);
    });
}

double qabf(const Tensor& fused, const Tensor& ir, const Tensor& vis) {
    const Plane pf = plane(fused), pa = plane(ir), pb = plane(vis);
    same_size(pf, pa);
    same_size(pf, pb);
    const Gradient gf = sobel(pf), ga = sobel(pa), gb = sobel(pb);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < pf.h * pf.w; ++i) {
        const double wa = ga.strength[i], wb = gb.strength[i];
        num += edge_transfer(ga.strength[i], ga.angle[i], gf.strength[i], gf.angle[i]) * wa +
               edge_transfer(gb.strength[i], gb.angle[i], gf.strength[i], gf.angle[i]) * wb;
        den += wa + wb;
    }
    return den > 0.0 ? num / den : 0.0;
}

double qabf_block(const Tensor& fused, const Tensor& ir, const Tensor& vis, double max_val) {
    const Plane pf = plane(fused), pa = plane(ir), pb = plane(vis);
    same_size(pf, pa);
    same_size(pf, pb);
    const double c1 = (0.01 * max_val) * (0.01 * max_val), c2 = (0.03 * max_val) * (0.03 * max_val);
    return block_mean(pf, [&](auto y0, auto y1, auto x0, auto x1) {
        return 0.5 * (ssim_of(moments(pf, pa, y0, y1, x0, x1), c1, c2) +
                      ssim_of(moments(pf, pb, y0, y1, x0, x1), c1, c2));
    });
}

double nabf(const Tensor& fused, const Tensor& ir, const Tensor& vis) {
    const Plane pf = plane(fused), pa = plane(ir), pb = plane(vis);
    same_size(pf, pa);
    same_size(pf, pb);
    std::vector<double> residual(pf.h * pf.w);
    for (std::size_t y = 0; y < pf.h; ++y)
        for (std::size_t x = 0; x < pf.w; ++x) {
            double s = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    s += pf.at(static_cast<std::ptrdiff_t>(y) + dy, static_cast<std::ptrdiff_t>(x) + dx);
            residual[y * pf.w + x] = pf.p[y * pf.w + x] - s / 9.0;
        }
    const Plane pr{pf.h, pf.w, residual.data()};
    return block_mean(pf, [&](auto y0, auto y1, auto x0, auto x1) {
        const double sigma_n = std::sqrt(moments(pr, pr, y0, y1, x0, x1).var_a);
        return sigma_n / (std::abs(moments(pa, pb, y0, y1, x0, x1).cov) + kNabfC);
    });
}

double pearson(const double* a, const double* b, std::size_t n) {
    if (n == 0) return 0.0;
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa <= 0.0 || sbb <= 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

double scd(const Tensor& fused, const Tensor& ir, const Tensor& vis) {
    const Plane pf = plane(fused), pa = plane(ir), pb = plane(vis);
    same_size(pf, pa);
    same_size(pf, pb);
    const std::size_t n = pf.h * pf.w;
    std::vector<double> d_vis(n), d_ir(n);
    for (std::size_t i = 0; i < n; ++i) {
        d_vis[i] = pf.p[i] - pb.p[i];
        d_ir[i] = pf.p[i] - pa.p[i];
    }
    return pearson(d_vis.data(), pa.p, n) + pearson(d_ir.data(), pb.p, n);
}

double scd_block(const Tensor& fused, const Tensor& ir, const Tensor& vis) {
    const Plane pf = plane(fused), pa = plane(ir), pb = plane(vis);
    same_size(pf, pa);
    same_size(pf, pb);
    return block_mean(pf, [&](auto y0, auto y1, auto x0, auto x1) {
        std::vector<double> f, a, b;
        for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t x = x0; x < x1; ++x) {
                f.push_back(pf.p[y * pf.w + x]);
                a.push_back(pa.p[y * pa.w + x]);
                b.push_back(pb.p[y * pb.w + x]);
            }
        return std::abs(pearson(a.data(), f.data(), f.size()) + pearson(b.data(), f.data(), f.size()) - 2.0);
    });
}

IouResult iou_miou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                   std::size_t num_classes) {
    if (pred.size() != gt.size()) throw ShapeError("label maps differ in size");
    std::vector<std::size_t> inter(num_classes, 0), uni(num_classes, 0), in_gt(num_classes, 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] >= num_classes || gt[i] >= num_classes) throw ContractError("class id out of range");
        if (pred[i] == gt[i]) {
            ++inter[gt[i]];
            ++uni[gt[i]];
        } else {
            ++uni[gt[i]];
            ++uni[pred[i]];
        }
        ++in_gt[gt[i]];
    }
    IouResult r;
    r.per_class.resize(num_classes);
    double total = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (uni[c] == 0) continue;
        r.per_class[c] = static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
        if (in_gt[c] > 0) {
            total += *r.per_class[c];
            ++r.classes_counted;
        }
    }
    r.miou = r.classes_counted ? total / static_cast<double>(r.classes_counted) : 0.0;
    return r;
}

MetricReport MetricReport::evaluate(const Tensor& fused, const Tensor& ir, const Tensor& vis_y) {
    MetricReport r;
    r.mse = 0.5 * (metrics::mse(fused, ir) + metrics::mse(fused, vis_y));
    r.psnr = psnr_from_mse(r.mse);
    r.ssim = 0.5 * (metrics::ssim(fused, ir) + metrics::ssim(fused, vis_y));
    r.qabf = metrics::qabf(fused, ir, vis_y);
    r.nabf = metrics::nabf(fused, ir, vis_y);
    r.scd = metrics::scd(fused, ir, vis_y);
    return r;
}

MetricReport aggregate_mean(const std::vector<NamedReport>& reports) {
    MetricReport m;
    if (reports.empty()) return m;
    for (const auto& r : reports) {
        m.mse += r.report.mse;
        m.psnr += r.report.psnr;
        m.qabf += r.report.qabf;
        m.nabf += r.report.nabf;
        m.ssim += r.report.ssim;
        m.scd += r.report.scd;
    }
    const double inv = 1.0 / static_cast<double>(reports.size());
    for (double* v : {&m.mse, &m.psnr, &m.qabf, &m.nabf, &m.ssim, &m.scd}) *v *= inv;
    return m;
}

void write_csv(std::ostream& out, const std::vector<NamedReport>& reports) {
    out << "image_id,mse,psnr,qabf,nabf,ssim,scd\n";
    const auto flags = out.flags();
    out << std::setprecision(10);
    for (const auto& r : reports)
        out << r.image_id << ',' << r.report.mse << ',' << r.report.psnr << ',' << r.report.qabf << ','
            << r.report.nabf << ',' << r.report.ssim << ',' << r.report.scd << '\n';
    out.flags(flags);
}

std::string aggregate_json(const std::vector<NamedReport>& reports) {
    const MetricReport m = aggregate_mean(reports);
    nlohmann::ordered_json j;
    j["count"] = reports.size();
    j["mse"] = m.mse;
    j["psnr"] = m.psnr;
    j["qabf"] = m.qabf;
    j["nabf"] = m.nabf;
    j["ssim"] = m.ssim;
    j["scd"] = m.scd;
    j["qabf_variant"] = MetricReport::qabf_variant();
    j["scd_variant"] = MetricReport::scd_variant();
    return j.dump(2);
}

}  // namespace ctrlfuse::metrics
