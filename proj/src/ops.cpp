// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ctrlfuse/errors.hpp"
#include "ctrlfuse/simd/kernels.hpp"

namespace ctrlfuse::ad {

using detail::make_result;

namespace {

const simd::KernelTable& K() { return simd::active_kernels(); }

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

// Number of consecutive elements of `a` that share one element of `b`.
std::size_t broadcast_block(const Shape& a, const Shape& b, const char* op) {
    if (a == b) return 1;
    if (numel(b) == 1) return std::max<std::size_t>(numel(a), 1);
    if (a.size() == b.size()) {
        std::size_t split = b.size();
        while (split > 0 && b[split - 1] == 1) --split;
        bool ok = true;
        for (std::size_t d = 0; d < split; ++d) ok = ok && a[d] == b[d];
        if (ok) {
            std::size_t block = 1;
            for (std::size_t d = split; d < a.size(); ++d) block *= a[d];
            return block;
        }
    }
    shape_error(op, a, b);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.ndim() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(t.shape()));
}

template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA da, DB db) {
    const std::size_t block = broadcast_block(a.shape(), b.shape(), op);
    const auto& av = a.node().data;
    const auto& bv = b.node().data;
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i / block]);
    Node* pa = &a.node();
    Node* pb = &b.node();
    return make_result(a.shape(), std::move(out), {a, b}, op, [pa, pb, block, da, db](Node& self) {
        const auto& g = self.grad;
        const auto& x = pa->data;
        const auto& y = pb->data;
        if (pa->requires_grad) {
            auto& ga = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(x[i], y[i / block]);
        }
        if (pb->requires_grad) {
            auto& gb = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i / block] += g[i] * db(x[i], y[i / block]);
        }
    });
}

// `df(x, y)` is the derivative given input x and output y.
template <class F, class DF>
Tensor unary(const Tensor& a, const char* op, F f, DF df) {
    const auto& av = a.node().data;
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    Node* pa = &a.node();
    return make_result(a.shape(), std::move(out), {a}, op, [pa, df](Node& self) {
        auto& ga = pa->grad_buffer();
        const auto& g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(pa->data[i], self.data[i]);
    });
}

std::vector<double> transposed(const double* src, std::size_t rows, std::size_t cols) {
    std::vector<double> t(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = src[r * cols + c];
    return t;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "maximum", [](double x, double y) { return x >= y ? x : y; },
        [](double x, double y) { return x >= y ? 1.0 : 0.0; }, [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Tensor scale(const Tensor& a, double factor) {
    return unary(
        a, "scale", [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary(
        a, "add_scalar", [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    return unary(
        a, "leaky_relu", [slope](double x) { return x > 0.0 ? x : slope * x; },
        [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        a, "sigmoid",
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
    return unary(
        a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor abs(const Tensor& a) {
    return unary(
        a, "abs", [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
    return unary(
        a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
    return unary(
        a, "sqrt",
        [](double x) {
            if (x < 0.0) throw ContractError("sqrt of negative value");
            return std::sqrt(x);
        },
        [](double, double y) { return 0.5 / y; });
}

Tensor log(const Tensor& a) {
    return unary(
        a, "log",
        [](double x) {
            if (x <= 0.0) throw ContractError("log of non-positive value");
            return std::log(x);
        },
        [](double x, double) { return 1.0 / x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    return unary(
        a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ----------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
    const auto& av = a.node().data;
    const double s = K().sum(av.data(), av.size());
    Node* pa = &a.node();
    return make_result({1}, {s}, {a}, "sum", [pa](Node& self) {
        auto& ga = pa->grad_buffer();
        const double g = self.grad[0];
        for (auto& v : ga) v += g;
    });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// -------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), kk = a.dim(1), n = b.dim(1);
    if (b.dim(0) != kk) shape_error("matmul", a.shape(), b.shape());
    std::vector<double> out(m * n);
    K().gemm(m, n, kk, a.node().data.data(), kk, b.node().data.data(), n, out.data(), n, false);
    Node* pa = &a.node();
    Node* pb = &b.node();
    return make_result({m, n}, std::move(out), {a, b}, "matmul", [pa, pb, m, n, kk](Node& self) {
        const auto& g = self.grad;
        if (pa->requires_grad) {
            const auto bt = transposed(pb->data.data(), kk, n);
            K().gemm(m, kk, n, g.data(), n, bt.data(), kk, pa->grad_buffer().data(), kk, true);
        }
        if (pb->requires_grad) {
            const auto at = transposed(pa->data.data(), m, kk);
            K().gemm(kk, n, m, at.data(), m, g.data(), n, pb->grad_buffer().data(), n, true);
        }
    });
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    Node* pa = &a.node();
    return make_result({c, r}, transposed(a.node().data.data(), r, c), {a}, "transpose", [pa, r, c](Node& self) {
        auto& ga = pa->grad_buffer();
        const auto gt = transposed(self.grad.data(), c, r);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gt[i];
    });
}

Tensor add_row_bias(const Tensor& x, const Tensor& b) {
    require_rank(x, 2, "add_row_bias");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (b.numel() != cols) shape_error("add_row_bias", x.shape(), b.shape());
    std::vector<double> out(x.node().data);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += b.node().data[c];
    Node* px = &x.node();
    Node* pb = &b.node();
    return make_result(x.shape(), std::move(out), {x, b}, "add_row_bias", [px, pb, rows, cols](Node& self) {
        const auto& g = self.grad;
        if (px->requires_grad) K().axpy(1.0, g.data(), px->grad_buffer().data(), g.size());
        if (pb->requires_grad) {
            auto& gb = pb->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) K().axpy(1.0, g.data() + r * cols, gb.data(), cols);
        }
    });
}

Tensor mean_rows(const Tensor& x) {
    require_rank(x, 2, "mean_rows");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (rows == 0) throw ShapeError("mean_rows of empty matrix");
    std::vector<double> out(cols, 0.0);
    const double inv = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) K().axpy(inv, x.node().data.data() + r * cols, out.data(), cols);
    Node* px = &x.node();
    return make_result({1, cols}, std::move(out), {x}, "mean_rows", [px, rows, cols, inv](Node& self) {
        auto& gx = px->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) K().axpy(inv, self.grad.data(), gx.data() + r * cols, cols);
    });
}

namespace {

void softmax_rows_inplace(double* s, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = s + r * cols;
        const double mx = *std::max_element(row, row + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            row[c] = std::exp(row[c] - mx);
            z += row[c];
        }
        const double inv = 1.0 / z;
        for (std::size_t c = 0; c < cols; ++c) row[c] *= inv;
    }
}

// dS = P * (dP - rowsum(dP * P)), written over dp.
void softmax_rows_backward(const double* p, double* dp, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* pr = p + r * cols;
        double* dr = dp + r * cols;
        const double inner = K().dot(pr, dr, cols);
        for (std::size_t c = 0; c < cols; ++c) dr[c] = pr[c] * (dr[c] - inner);
    }
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
    require_rank(x, 2, "softmax_rows");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (cols == 0) throw ShapeError("softmax over empty rows");
    std::vector<double> out(x.node().data);
    softmax_rows_inplace(out.data(), rows, cols);
    Node* px = &x.node();
    return make_result(x.shape(), std::move(out), {x}, "softmax_rows", [px, rows, cols](Node& self) {
        std::vector<double> d(self.grad);
        softmax_rows_backward(self.data.data(), d.data(), rows, cols);
        K().axpy(1.0, d.data(), px->grad_buffer().data(), d.size());
    });
}

namespace {

// Copy columns [off, off + width) of a rows x stride matrix into a dense block.
std::vector<double> column_block(const std::vector<double>& src, std::size_t rows, std::size_t stride,
                                 std::size_t off, std::size_t width) {
    std::vector<double> out(rows * width);
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(src.data() + r * stride + off, width, out.data() + r * width);
    return out;
}

void add_column_block(std::vector<double>& dst, const std::vector<double>& block, std::size_t rows,
                      std::size_t stride, std::size_t off, std::size_t width) {
    for (std::size_t r = 0; r < rows; ++r)
        K().axpy(1.0, block.data() + r * width, dst.data() + r * stride + off, width);
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
    require_rank(q, 2, "attention");
    require_rank(k, 2, "attention");
    require_rank(v, 2, "attention");
    const std::size_t nq = q.dim(0), nk = k.dim(0), dm = q.dim(1);
    if (k.dim(1) != dm) shape_error("attention", q.shape(), k.shape());
    if (v.dim(0) != nk || v.dim(1) != dm) shape_error("attention", k.shape(), v.shape());
    if (heads == 0 || dm % heads != 0) throw ShapeError("attention: feature dim not divisible by head count");
    if (nk == 0) throw ShapeError("attention: no keys");
    const std::size_t hd = dm / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<double> out(nq * dm);
    std::vector<std::vector<double>> probs(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const auto qh = column_block(q.node().data, nq, dm, h * hd, hd);
        const auto kh = column_block(k.node().data, nk, dm, h * hd, hd);
        const auto vh = column_block(v.node().data, nk, dm, h * hd, hd);
        const auto kt = transposed(kh.data(), nk, hd);
        auto& p = probs[h];
        p.resize(nq * nk);
        K().gemm(nq, nk, hd, qh.data(), hd, kt.data(), nk, p.data(), nk, false);
        for (auto& s : p) s *= sc;
        softmax_rows_inplace(p.data(), nq, nk);
        std::vector<double> oh(nq * hd);
        K().gemm(nq, hd, nk, p.data(), nk, vh.data(), hd, oh.data(), hd, false);
        for (std::size_t r = 0; r < nq; ++r) std::copy_n(oh.data() + r * hd, hd, out.data() + r * dm + h * hd);
    }

    Node* pq = &q.node();
    Node* pk = &k.node();
    Node* pv = &v.node();
    return make_result(
        {nq, dm}, std::move(out), {q, k, v}, "attention",
        [pq, pk, pv, probs = std::move(probs), heads, nq, nk, dm, hd, sc](Node& self) {
            for (std::size_t h = 0; h < heads; ++h) {
                const auto& p = probs[h];
                const auto go = column_block(self.grad, nq, dm, h * hd, hd);
                if (pv->requires_grad) {
                    const auto pt = transposed(p.data(), nq, nk);
                    std::vector<double> gv(nk * hd);
                    K().gemm(nk, hd, nq, pt.data(), nq, go.data(), hd, gv.data(), hd, false);
                    add_column_block(pv->grad_buffer(), gv, nk, dm, h * hd, hd);
                }
                if (!pq->requires_grad && !pk->requires_grad) continue;
                const auto vh = column_block(pv->data, nk, dm, h * hd, hd);
                const auto vt = transposed(vh.data(), nk, hd);
                std::vector<double> ds(nq * nk);
                K().gemm(nq, nk, hd, go.data(), hd, vt.data(), nk, ds.data(), nk, false);
                softmax_rows_backward(p.data(), ds.data(), nq, nk);
                for (auto& s : ds) s *= sc;
                if (pq->requires_grad) {
                    const auto kh = column_block(pk->data, nk, dm, h * hd, hd);
                    std::vector<double> gq(nq * hd);
                    K().gemm(nq, hd, nk, ds.data(), nk, kh.data(), hd, gq.data(), hd, false);
                    add_column_block(pq->grad_buffer(), gq, nq, dm, h * hd, hd);
                }
                if (pk->requires_grad) {
                    const auto qh = column_block(pq->data, nq, dm, h * hd, hd);
                    const auto dst = transposed(ds.data(), nq, nk);
                    std::vector<double> gk(nk * hd);
                    K().gemm(nk, hd, nq, dst.data(), nq, qh.data(), hd, gk.data(), hd, false);
                    add_column_block(pk->grad_buffer(), gk, nk, dm, h * hd, hd);
                }
            }
        });
}

// --------------------------------------------------------------------- spatial

namespace {

struct ConvGeom {
    std::size_t cin, h, w, cout, k, stride, pad, ho, wo;
    std::size_t rows() const { return cin * k * k; }
    std::size_t cols() const { return ho * wo; }
};

void im2col(const double* x, const ConvGeom& g, double* cols) {
    const std::size_t n = g.cols();
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                double* dst = cols + ((c * g.k + ky) * g.k + kx) * n;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    double* drow = dst + oy * g.wo;
                    if (iy < 0 || iy >= static_cast<long>(g.h)) {
                        std::fill_n(drow, g.wo, 0.0);
                        continue;
                    }
                    const double* srow = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        drow[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : srow[ix];
                    }
                }
            }
}

void col2im_add(const double* cols, const ConvGeom& g, double* dx) {
    const std::size_t n = g.cols();
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const double* src = cols + ((c * g.k + ky) * g.k + kx) * n;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    double* drow = dx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        if (ix >= 0 && ix < static_cast<long>(g.w)) drow[ix] += src[oy * g.wo + ox];
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t padding) {
    require_rank(x, 3, "conv2d");
    require_rank(w, 4, "conv2d");
    if (w.dim(1) != x.dim(0)) shape_error("conv2d", x.shape(), w.shape());
    if (w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0) throw ShapeError("conv2d: kernel must be square with odd size");
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    ConvGeom g{x.dim(0), x.dim(1), x.dim(2), w.dim(0), w.dim(2), stride, padding, 0, 0};
    if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) throw ShapeError("conv2d: input smaller than kernel");
    g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
    g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
    if (bias.defined() && bias.numel() != g.cout) shape_error("conv2d", w.shape(), bias.shape());

    const bool pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
    std::vector<double> cols;
    const double* colp = x.node().data.data();
    if (!pointwise) {
        cols.resize(g.rows() * g.cols());
        im2col(x.node().data.data(), g, cols.data());
        colp = cols.data();
    }
    std::vector<double> out(g.cout * g.cols());
    K().gemm(g.cout, g.cols(), g.rows(), w.node().data.data(), g.rows(), colp, g.cols(), out.data(), g.cols(), false);
    if (bias.defined())
        for (std::size_t o = 0; o < g.cout; ++o) {
            const double b = bias.node().data[o];
            double* row = out.data() + o * g.cols();
            for (std::size_t i = 0; i < g.cols(); ++i) row[i] += b;
        }

    Node* px = &x.node();
    Node* pw = &w.node();
    Node* pb = bias.defined() ? &bias.node() : nullptr;
    std::vector<Tensor> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_result({g.cout, g.ho, g.wo}, std::move(out), parents, "conv2d", [px, pw, pb, g, pointwise](Node& self) {
        const auto& go = self.grad;
        const std::size_t n = g.cols(), r = g.rows();
        if (pb != nullptr && pb->requires_grad) {
            auto& gb = pb->grad_buffer();
            for (std::size_t o = 0; o < g.cout; ++o) gb[o] += K().sum(go.data() + o * n, n);
        }
        if (pw->requires_grad) {
            std::vector<double> cols;
            const double* colp = px->data.data();
            if (!pointwise) {
                cols.resize(r * n);
                im2col(px->data.data(), g, cols.data());
                colp = cols.data();
            }
            auto& gw = pw->grad_buffer();
            for (std::size_t o = 0; o < g.cout; ++o)
                for (std::size_t j = 0; j < r; ++j) gw[o * r + j] += K().dot(go.data() + o * n, colp + j * n, n);
        }
        if (px->requires_grad) {
            const auto wt = transposed(pw->data.data(), g.cout, r);
            auto& gx = px->grad_buffer();
            if (pointwise) {
                K().gemm(r, n, g.cout, wt.data(), g.cout, go.data(), n, gx.data(), n, true);
            } else {
                std::vector<double> dcols(r * n);
                K().gemm(r, n, g.cout, wt.data(), g.cout, go.data(), n, dcols.data(), n, false);
                col2im_add(dcols.data(), g, gx.data());
            }
        }
    });
}

namespace {

std::size_t sample_index(long i, std::size_t extent, Padding padding, bool& inside) {
    inside = true;
    if (i >= 0 && i < static_cast<long>(extent)) return static_cast<std::size_t>(i);
    if (padding == Padding::zeros) {
        inside = false;
        return 0;
    }
    return i < 0 ? 0 : extent - 1;
}

}  // namespace

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, Padding padding) {
    require_rank(x, 3, "depthwise_conv2d");
    require_rank(w, 3, "depthwise_conv2d");
    const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2), k = w.dim(1);
    if (w.dim(0) != c || w.dim(2) != k || k % 2 == 0) shape_error("depthwise_conv2d", x.shape(), w.shape());
    const long half = static_cast<long>(k / 2);
    std::vector<double> out(c * h * wd, 0.0);
    const auto& xv = x.node().data;
    const auto& wv = w.node().data;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < wd; ++xx) {
                // Positive and negative taps accumulate apart so a zero-sum
                // kernel (Sobel) maps a constant patch to exactly 0.
                double pos = 0.0, neg = 0.0;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    bool iny = false;
                    const auto sy = sample_index(static_cast<long>(y + ky) - half, h, padding, iny);
                    if (!iny) continue;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        bool inx = false;
                        const auto sx = sample_index(static_cast<long>(xx + kx) - half, wd, padding, inx);
                        if (!inx) continue;
                        const double wt = wv[(ch * k + ky) * k + kx];
                        const double v = xv[(ch * h + sy) * wd + sx];
                        if (wt >= 0.0)
                            pos += wt * v;
                        else
                            neg -= wt * v;
                    }
                }
                out[(ch * h + y) * wd + xx] = pos - neg;
            }
    Node* px = &x.node();
    Node* pw = &w.node();
    return make_result(x.shape(), std::move(out), {x, w}, "depthwise_conv2d",
                       [px, pw, c, h, wd, k, half, padding](Node& self) {
                           const auto& go = self.grad;
                           std::vector<double>* gx = px->requires_grad ? &px->grad_buffer() : nullptr;
                           std::vector<double>* gw = pw->requires_grad ? &pw->grad_buffer() : nullptr;
                           for (std::size_t ch = 0; ch < c; ++ch)
                               for (std::size_t y = 0; y < h; ++y)
                                   for (std::size_t xx = 0; xx < wd; ++xx) {
                                       const double g = go[(ch * h + y) * wd + xx];
                                       if (g == 0.0) continue;
                                       for (std::size_t ky = 0; ky < k; ++ky) {
                                           bool iny = false;
                                           const auto sy =
                                               sample_index(static_cast<long>(y + ky) - half, h, padding, iny);
                                           if (!iny) continue;
                                           for (std::size_t kx = 0; kx < k; ++kx) {
                                               bool inx = false;
                                               const auto sx =
                                                   sample_index(static_cast<long>(xx + kx) - half, wd, padding, inx);
                                               if (!inx) continue;
                                               const std::size_t xi = (ch * h + sy) * wd + sx;
                                               const std::size_t wi = (ch * k + ky) * k + kx;
                                               if (gx) (*gx)[xi] += g * pw->data[wi];
                                               if (gw) (*gw)[wi] += g * px->data[xi];
                                           }
                                       }
                                   }
                       });
}

Tensor avg_pool2d(const Tensor& x, std::size_t window) {
    require_rank(x, 3, "avg_pool2d");
    if (window == 0) throw ShapeError("avg_pool2d: window must be positive");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t ho = (h + window - 1) / window, wo = (w + window - 1) / window;
    const double inv = 1.0 / static_cast<double>(window * window);
    std::vector<double> out(c * ho * wo, 0.0);
    const auto& xv = x.node().data;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                double s = 0.0;
                for (std::size_t dy = 0; dy < window; ++dy) {
                    const std::size_t iy = std::min(oy * window + dy, h - 1);
                    for (std::size_t dx = 0; dx < window; ++dx)
                        s += xv[(ch * h + iy) * w + std::min(ox * window + dx, w - 1)];
                }
                out[(ch * ho + oy) * wo + ox] = s * inv;
            }
    Node* px = &x.node();
    return make_result({c, ho, wo}, std::move(out), {x}, "avg_pool2d", [px, c, h, w, ho, wo, window, inv](Node& self) {
        auto& gx = px->grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    const double g = self.grad[(ch * ho + oy) * wo + ox] * inv;
                    for (std::size_t dy = 0; dy < window; ++dy) {
                        const std::size_t iy = std::min(oy * window + dy, h - 1);
                        for (std::size_t dx = 0; dx < window; ++dx)
                            gx[(ch * h + iy) * w + std::min(ox * window + dx, w - 1)] += g;
                    }
                }
    });
}

Tensor global_avg_pool(const Tensor& x) {
    require_rank(x, 3, "global_avg_pool");
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    if (hw == 0) throw ShapeError("global_avg_pool of empty map");
    const double inv = 1.0 / static_cast<double>(hw);
    std::vector<double> out(c);
    for (std::size_t ch = 0; ch < c; ++ch) out[ch] = K().sum(x.node().data.data() + ch * hw, hw) * inv;
    Node* px = &x.node();
    return make_result({c, 1, 1}, std::move(out), {x}, "global_avg_pool", [px, c, hw, inv](Node& self) {
        auto& gx = px->grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double g = self.grad[ch] * inv;
            for (std::size_t i = 0; i < hw; ++i) gx[ch * hw + i] += g;
        }
    });
}

Tensor downsample_avg(const Tensor& x) { return avg_pool2d(x, 2); }

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
    require_rank(x, 3, "upsample_nearest");
    if (factor == 0) throw ShapeError("upsample_nearest: factor must be positive");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), ho = h * factor, wo = w * factor;
    std::vector<double> out(c * ho * wo);
    const auto& xv = x.node().data;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < ho; ++y)
            for (std::size_t xx = 0; xx < wo; ++xx)
                out[(ch * ho + y) * wo + xx] = xv[(ch * h + y / factor) * w + xx / factor];
    Node* px = &x.node();
    return make_result({c, ho, wo}, std::move(out), {x}, "upsample_nearest", [px, c, h, w, ho, wo, factor](Node& self) {
        auto& gx = px->grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < ho; ++y)
                for (std::size_t xx = 0; xx < wo; ++xx)
                    gx[(ch * h + y / factor) * w + xx / factor] += self.grad[(ch * ho + y) * wo + xx];
    });
}

Tensor crop_spatial(const Tensor& x, std::size_t h, std::size_t w) {
    require_rank(x, 3, "crop_spatial");
    const std::size_t c = x.dim(0), hi = x.dim(1), wi = x.dim(2);
    if (h > hi || w > wi) throw ShapeError("crop_spatial: crop larger than input");
    if (h == hi && w == wi) return x;
    std::vector<double> out(c * h * w);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            std::copy_n(x.node().data.data() + (ch * hi + y) * wi, w, out.data() + (ch * h + y) * w);
    Node* px = &x.node();
    return make_result({c, h, w}, std::move(out), {x}, "crop_spatial", [px, c, h, w, hi, wi](Node& self) {
        auto& gx = px->grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h; ++y)
                K().axpy(1.0, self.grad.data() + (ch * h + y) * w, gx.data() + (ch * hi + y) * wi, w);
    });
}

// ------------------------------------------------------------------- reshaping

Tensor flatten_spatial(const Tensor& x) {
    require_rank(x, 3, "flatten_spatial");
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Node* px = &x.node();
    return make_result({hw, c}, transposed(x.node().data.data(), c, hw), {x}, "flatten_spatial",
                       [px, c, hw](Node& self) {
                           const auto gt = transposed(self.grad.data(), hw, c);
                           K().axpy(1.0, gt.data(), px->grad_buffer().data(), gt.size());
                       });
}

Tensor view_spatial(const Tensor& x, std::size_t h, std::size_t w) {
    require_rank(x, 2, "view_spatial");
    if (x.dim(0) != h * w) throw ShapeError("view_spatial: row count " + std::to_string(x.dim(0)) + " != h*w");
    const std::size_t c = x.dim(1), hw = h * w;
    Node* px = &x.node();
    return make_result({c, h, w}, transposed(x.node().data.data(), hw, c), {x}, "view_spatial",
                       [px, c, hw](Node& self) {
                           const auto gt = transposed(self.grad.data(), c, hw);
                           K().axpy(1.0, gt.data(), px->grad_buffer().data(), gt.size());
                       });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.numel()) shape_error("reshape", x.shape(), shape);
    Node* px = &x.node();
    return make_result(std::move(shape), x.node().data, {x}, "reshape", [px](Node& self) {
        K().axpy(1.0, self.grad.data(), px->grad_buffer().data(), self.grad.size());
    });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: nothing to concatenate");
    Shape shape = parts.front().shape();
    if (shape.empty()) throw ShapeError("concat_channels: rank-0 input");
    std::size_t lead = 0;
    for (const auto& p : parts) {
        if (p.ndim() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1))
            shape_error("concat_channels", parts.front().shape(), p.shape());
        lead += p.dim(0);
    }
    shape[0] = lead;
    std::vector<double> out;
    out.reserve(numel(shape));
    std::vector<Node*> nodes;
    for (const auto& p : parts) {
        out.insert(out.end(), p.node().data.begin(), p.node().data.end());
        nodes.push_back(&p.node());
    }
    return make_result(std::move(shape), std::move(out), parts, "concat_channels", [nodes](Node& self) {
        std::size_t off = 0;
        for (Node* n : nodes) {
            if (n->requires_grad) K().axpy(1.0, self.grad.data() + off, n->grad_buffer().data(), n->data.size());
            off += n->data.size();
        }
    });
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end) {
    if (x.ndim() == 0 || begin > end || end > x.dim(0)) throw ShapeError("slice_channels: range out of bounds");
    Shape shape = x.shape();
    const std::size_t inner = numel(shape) / std::max<std::size_t>(shape[0], 1);
    shape[0] = end - begin;
    std::vector<double> out(x.node().data.begin() + static_cast<long>(begin * inner),
                            x.node().data.begin() + static_cast<long>(end * inner));
    Node* px = &x.node();
    return make_result(std::move(shape), std::move(out), {x}, "slice_channels", [px, begin, inner](Node& self) {
        K().axpy(1.0, self.grad.data(), px->grad_buffer().data() + begin * inner, self.grad.size());
    });
}

Tensor broadcast_spatial(const Tensor& x, std::size_t h, std::size_t w) {
    const bool ok = x.ndim() == 1 || (x.ndim() == 3 && x.dim(1) == 1 && x.dim(2) == 1);
    if (!ok) throw ShapeError("broadcast_spatial: expected C x 1 x 1, got " + to_string(x.shape()));
    const std::size_t c = x.dim(0), hw = h * w;
    std::vector<double> out(c * hw);
    for (std::size_t ch = 0; ch < c; ++ch) std::fill_n(out.data() + ch * hw, hw, x.node().data[ch]);
    Node* px = &x.node();
    return make_result({c, h, w}, std::move(out), {x}, "broadcast_spatial", [px, c, hw](Node& self) {
        auto& gx = px->grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch) gx[ch] += K().sum(self.grad.data() + ch * hw, hw);
    });
}

Tensor broadcast_channels(const Tensor& x, std::size_t c) {
    const bool ok = x.ndim() == 2 || (x.ndim() == 3 && x.dim(0) == 1);
    if (!ok) throw ShapeError("broadcast_channels: expected 1 x H x W, got " + to_string(x.shape()));
    const std::size_t h = x.dim(x.ndim() - 2), w = x.dim(x.ndim() - 1), hw = h * w;
    std::vector<double> out(c * hw);
    for (std::size_t ch = 0; ch < c; ++ch) std::copy_n(x.node().data.data(), hw, out.data() + ch * hw);
    Node* px = &x.node();
    return make_result({c, h, w}, std::move(out), {x}, "broadcast_channels", [px, c, hw](Node& self) {
        auto& gx = px->grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch) K().axpy(1.0, self.grad.data() + ch * hw, gx.data(), hw);
    });
}

}  // namespace ctrlfuse::ad
