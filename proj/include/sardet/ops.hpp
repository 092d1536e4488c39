#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "sardet/tensor.hpp"

namespace sardet {

struct ConvSpec {
    int stride = 1;
    int pad = 0;
    int dilation = 1;
};

struct DeconvSpec {
    int stride = 1;
    int pad = 0;
    int output_padding = 0;
};

namespace conv_detail {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapC = Eigen::Map<const MatRM>;

inline int out_size(int in, int k, int stride, int pad, int dil) {
    return (in + 2 * pad - dil * (k - 1) - 1) / stride + 1;
}

// cols is (C*kh*kw) x (OH*OW), row-major
inline void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride,
                   int pad, int dil, int OH, int OW, double* cols) {
    const int64_t ohw = int64_t(OH) * OW;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                double* row = cols + ((int64_t(c) * kh + ki) * kw + kj) * ohw;
                for (int oi = 0; oi < OH; ++oi) {
                    const int ii = oi * stride - pad + ki * dil;
                    if (ii < 0 || ii >= H) {
                        std::fill(row + int64_t(oi) * OW, row + int64_t(oi + 1) * OW, 0.0);
                        continue;
                    }
                    const double* xrow = x + (int64_t(c) * H + ii) * W;
                    double* orow = row + int64_t(oi) * OW;
                    for (int oj = 0; oj < OW; ++oj) {
                        const int jj = oj * stride - pad + kj * dil;
                        orow[oj] = (jj >= 0 && jj < W) ? xrow[jj] : 0.0;
                    }
                }
            }
        }
    }
}

inline void col2im_accum(const double* cols, int C, int H, int W, int kh, int kw,
                         int stride, int pad, int dil, int OH, int OW, double* x) {
    const int64_t ohw = int64_t(OH) * OW;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const double* row = cols + ((int64_t(c) * kh + ki) * kw + kj) * ohw;
                for (int oi = 0; oi < OH; ++oi) {
                    const int ii = oi * stride - pad + ki * dil;
                    if (ii < 0 || ii >= H) continue;
                    double* xrow = x + (int64_t(c) * H + ii) * W;
                    const double* orow = row + int64_t(oi) * OW;
                    for (int oj = 0; oj < OW; ++oj) {
                        const int jj = oj * stride - pad + kj * dil;
                        if (jj >= 0 && jj < W) xrow[jj] += orow[oj];
                    }
                }
            }
        }
    }
}

// y[n] = W * im2col(x[n]) + b, for all n; accumulate=true adds into y instead
inline void fwd(const double* x, int N, int C, int H, int W, const double* w, int OC,
                int kh, int kw, const double* b, const ConvSpec& cs, double* y, int OH,
                int OW, bool accumulate = false) {
    const int64_t k2c = int64_t(C) * kh * kw;
    const int64_t ohw = int64_t(OH) * OW;
    std::vector<double> cols(k2c * ohw);
    MapC wm(w, OC, k2c);
    for (int n = 0; n < N; ++n) {
        im2col(x + int64_t(n) * C * H * W, C, H, W, kh, kw, cs.stride, cs.pad,
               cs.dilation, OH, OW, cols.data());
        MapM ym(y + int64_t(n) * OC * ohw, OC, ohw);
        if (accumulate)
            ym.noalias() += wm * MapC(cols.data(), k2c, ohw);
        else
            ym.noalias() = wm * MapC(cols.data(), k2c, ohw);
        if (b)
            for (int oc = 0; oc < OC; ++oc) ym.row(oc).array() += b[oc];
    }
}

// dx[n] += col2im(W^T * dy[n]); the exact adjoint of fwd in x
inline void bwd_data(const double* dy, int N, int OC, int OH, int OW, const double* w,
                     int C, int kh, int kw, const ConvSpec& cs, double* dx, int H, int W) {
    const int64_t k2c = int64_t(C) * kh * kw;
    const int64_t ohw = int64_t(OH) * OW;
    std::vector<double> cols(k2c * ohw);
    MapC wm(w, OC, k2c);
    for (int n = 0; n < N; ++n) {
        MapC dym(dy + int64_t(n) * OC * ohw, OC, ohw);
        MapM(cols.data(), k2c, ohw).noalias() = wm.transpose() * dym;
        col2im_accum(cols.data(), C, H, W, kh, kw, cs.stride, cs.pad, cs.dilation, OH, OW,
                     dx + int64_t(n) * C * H * W);
    }
}

// dw += sum_n dy[n] * im2col(x[n])^T
inline void bwd_weights(const double* x, int N, int C, int H, int W, const double* dy,
                        int OC, int OH, int OW, int kh, int kw, const ConvSpec& cs,
                        double* dw) {
    const int64_t k2c = int64_t(C) * kh * kw;
    const int64_t ohw = int64_t(OH) * OW;
    std::vector<double> cols(k2c * ohw);
    MapM dwm(dw, OC, k2c);
    for (int n = 0; n < N; ++n) {
        im2col(x + int64_t(n) * C * H * W, C, H, W, kh, kw, cs.stride, cs.pad,
               cs.dilation, OH, OW, cols.data());
        MapC dym(dy + int64_t(n) * OC * ohw, OC, ohw);
        dwm.noalias() += dym * MapC(cols.data(), k2c, ohw).transpose();
    }
}

inline void bias_grad_accum(const double* dy, int N, int OC, int64_t ohw, double* db) {
    for (int n = 0; n < N; ++n)
        for (int oc = 0; oc < OC; ++oc) {
            const double* p = dy + (int64_t(n) * OC + oc) * ohw;
            double acc = 0.0;
            for (int64_t i = 0; i < ohw; ++i) acc += p[i];
            db[oc] += acc;
        }
}

}  // namespace conv_detail

// ---------------------------------------------------------------------------
// conv2d / deconv2d
// ---------------------------------------------------------------------------

// Cross-correlation (no kernel flip). w is OutC x InC x kH x kW; b, when
// defined, is 1 x OutC x 1 x 1.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                     const ConvSpec& spec = {}) {
    const Shape4& xs = x.shape();
    const Shape4& ws = w.shape();
    if (ws[1] != xs[1])
        throw std::invalid_argument("conv2d: input has " + std::to_string(xs[1]) +
                                    " channels but kernel expects " + std::to_string(ws[1]));
    if (spec.pad < 0 || spec.stride < 1 || spec.dilation < 1)
        throw std::invalid_argument("conv2d: invalid stride/pad/dilation");
    if (b.defined() && b.numel() != ws[0])
        throw std::invalid_argument("conv2d: bias length does not match output channels");
    const int OH = conv_detail::out_size(xs[2], ws[2], spec.stride, spec.pad, spec.dilation);
    const int OW = conv_detail::out_size(xs[3], ws[3], spec.stride, spec.pad, spec.dilation);
    if (OH <= 0 || OW <= 0)
        throw std::invalid_argument("conv2d: zero-size output for input " + shape_str(xs) +
                                    " and kernel " + shape_str(ws));

    Tensor y = Tensor::zeros({xs[0], ws[0], OH, OW});
    conv_detail::fwd(x.data().data(), xs[0], xs[1], xs[2], xs[3], w.data().data(), ws[0],
                     ws[2], ws[3], b.defined() ? b.data().data() : nullptr, spec,
                     y.data().data(), OH, OW);

    if (recording({&x, &w, &b})) {
        auto xi = x.impl();
        auto wi = w.impl();
        auto bi = b.defined() ? b.impl() : nullptr;
        TensorImpl* out = y.impl().get();
        std::vector<std::shared_ptr<TensorImpl>> ins = {xi, wi};
        if (bi) ins.push_back(bi);
        attach_node(y, "conv2d", std::move(ins), [xi, wi, bi, out, spec, OH, OW](GradStore& g) {
            const Shape4& xs = xi->shape;
            const Shape4& ws = wi->shape;
            const std::vector<double>& dy = g.buf(out);
            if (xi->requires_grad)
                conv_detail::bwd_data(dy.data(), xs[0], ws[0], OH, OW, wi->data.data(),
                                      xs[1], ws[2], ws[3], spec, g.buf(xi.get()).data(),
                                      xs[2], xs[3]);
            if (wi->requires_grad)
                conv_detail::bwd_weights(xi->data.data(), xs[0], xs[1], xs[2], xs[3],
                                         dy.data(), ws[0], OH, OW, ws[2], ws[3], spec,
                                         g.buf(wi.get()).data());
            if (bi && bi->requires_grad)
                conv_detail::bias_grad_accum(dy.data(), xs[0], ws[0], int64_t(OH) * OW,
                                             g.buf(bi.get()).data());
        });
    }
    return y;
}

// Transposed convolution, the exact adjoint of conv2d with the same w. For an
// input with C channels, w is C x OutC x kH x kW (conv2d weight layout seen
// from the other side).
inline Tensor deconv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                       const DeconvSpec& spec = {}) {
    const Shape4& xs = x.shape();
    const Shape4& ws = w.shape();
    if (ws[0] != xs[1])
        throw std::invalid_argument("deconv2d: input has " + std::to_string(xs[1]) +
                                    " channels but kernel expects " + std::to_string(ws[0]));
    if (spec.stride < 1 || spec.pad < 0 || spec.output_padding < 0 ||
        spec.output_padding >= spec.stride)
        throw std::invalid_argument("deconv2d: invalid stride/pad/output_padding");
    const int OH = (xs[2] - 1) * spec.stride - 2 * spec.pad + ws[2] + spec.output_padding;
    const int OW = (xs[3] - 1) * spec.stride - 2 * spec.pad + ws[3] + spec.output_padding;
    if (OH <= 0 || OW <= 0)
        throw std::invalid_argument("deconv2d: computed output size is not positive");
    if (b.defined() && b.numel() != ws[1])
        throw std::invalid_argument("deconv2d: bias length does not match output channels");

    // scatter through the virtual conv that maps the deconv output back to x
    const ConvSpec vconv{spec.stride, spec.pad, 1};
    Tensor y = Tensor::zeros({xs[0], ws[1], OH, OW});
    conv_detail::bwd_data(x.data().data(), xs[0], xs[1], xs[2], xs[3], w.data().data(),
                          ws[1], ws[2], ws[3], vconv, y.data().data(), OH, OW);
    if (b.defined()) {
        const int64_t ohw = int64_t(OH) * OW;
        for (int n = 0; n < xs[0]; ++n)
            for (int c = 0; c < ws[1]; ++c) {
                double* p = y.data().data() + (int64_t(n) * ws[1] + c) * ohw;
                for (int64_t i = 0; i < ohw; ++i) p[i] += b.data()[c];
            }
    }

    if (recording({&x, &w, &b})) {
        auto xi = x.impl();
        auto wi = w.impl();
        auto bi = b.defined() ? b.impl() : nullptr;
        TensorImpl* out = y.impl().get();
        std::vector<std::shared_ptr<TensorImpl>> ins = {xi, wi};
        if (bi) ins.push_back(bi);
        attach_node(y, "deconv2d", std::move(ins),
                    [xi, wi, bi, out, vconv, OH, OW](GradStore& g) {
                        const Shape4& xs = xi->shape;
                        const Shape4& ws = wi->shape;
                        const std::vector<double>& dy = g.buf(out);
                        if (xi->requires_grad)
                            conv_detail::fwd(dy.data(), xs[0], ws[1], OH, OW, wi->data.data(),
                                             xs[1], ws[2], ws[3], nullptr, vconv,
                                             g.buf(xi.get()).data(), xs[2], xs[3],
                                             /*accumulate=*/true);
                        if (wi->requires_grad)
                            conv_detail::bwd_weights(dy.data(), xs[0], ws[1], OH, OW,
                                                     xi->data.data(), xs[1], xs[2], xs[3],
                                                     ws[2], ws[3], vconv,
                                                     g.buf(wi.get()).data());
                        if (bi && bi->requires_grad)
                            conv_detail::bias_grad_accum(dy.data(), xs[0], ws[1],
                                                         int64_t(OH) * OW,
                                                         g.buf(bi.get()).data());
                    });
    }
    return y;
}

// ---------------------------------------------------------------------------
// rot90
// ---------------------------------------------------------------------------

namespace rot_detail {
// counterclockwise quarter-turn index permutations on an n x n plane
inline void rotate_plane(const double* in, double* out, int n, int k) {
    switch (k) {
        case 0:
            std::copy(in, in + int64_t(n) * n, out);
            break;
        case 1:
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) out[int64_t(i) * n + j] = in[int64_t(j) * n + (n - 1 - i)];
            break;
        case 2:
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j)
                    out[int64_t(i) * n + j] = in[int64_t(n - 1 - i) * n + (n - 1 - j)];
            break;
        default:
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) out[int64_t(i) * n + j] = in[int64_t(n - 1 - j) * n + i];
            break;
    }
}
}  // namespace rot_detail

// Exact counterclockwise rotation by k quarter turns of every spatial plane.
// Pure index permutation; square planes only.
inline Tensor rot90(const Tensor& x, int k) {
    const Shape4& s = x.shape();
    if (s[2] != s[3])
        throw std::invalid_argument("rot90: requires square spatial planes, got " + shape_str(s));
    k = ((k % 4) + 4) % 4;
    Tensor y = Tensor::zeros(s);
    const int n = s[2];
    const int64_t plane = int64_t(n) * n;
    for (int64_t p = 0; p < int64_t(s[0]) * s[1]; ++p)
        rot_detail::rotate_plane(x.data().data() + p * plane, y.data().data() + p * plane, n, k);

    if (recording({&x})) {
        auto xi = x.impl();
        TensorImpl* out = y.impl().get();
        attach_node(y, "rot90", {xi}, [xi, out, k, n, plane](GradStore& g) {
            if (!xi->requires_grad) return;
            const std::vector<double>& dy = g.buf(out);
            std::vector<double>& dx = g.buf(xi.get());
            std::vector<double> tmp(plane);
            const int kinv = (4 - k) % 4;
            const int64_t planes = int64_t(xi->shape[0]) * xi->shape[1];
            for (int64_t p = 0; p < planes; ++p) {
                rot_detail::rotate_plane(dy.data() + p * plane, tmp.data(), n, kinv);
                double* d = dx.data() + p * plane;
                for (int64_t i = 0; i < plane; ++i) d[i] += tmp[i];
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

struct BnBuffers {
    std::vector<double> mean, var;
    explicit BnBuffers(int channels = 0)
        : mean(channels, 0.0), var(channels, 1.0) {}
};

// Train mode normalizes with batch statistics and (optionally) updates the
// running buffers; eval mode normalizes with the running buffers. gamma and
// beta are 1 x C x 1 x 1.
inline Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        BnBuffers& running, bool train, double momentum = 0.1,
                        double eps = 1e-5, bool update_running = true) {
    const Shape4& s = x.shape();
    const int C = s[1];
    if (gamma.numel() != C || beta.numel() != C ||
        static_cast<int>(running.mean.size()) != C || static_cast<int>(running.var.size()) != C)
        throw std::invalid_argument("batchnorm: parameter length does not match " +
                                    std::to_string(C) + " channels");

    const int64_t hw = int64_t(s[2]) * s[3];
    const int64_t m = int64_t(s[0]) * hw;  // elements per channel
    std::vector<double> mean(C), invstd(C);
    if (train) {
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int n = 0; n < s[0]; ++n) {
                const double* p = x.data().data() + (int64_t(n) * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) acc += p[i];
            }
            mean[c] = acc / double(m);
            double sq = 0.0;
            for (int n = 0; n < s[0]; ++n) {
                const double* p = x.data().data() + (int64_t(n) * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    const double d = p[i] - mean[c];
                    sq += d * d;
                }
            }
            const double var = sq / double(m);
            invstd[c] = 1.0 / std::sqrt(var + eps);
            if (update_running) {
                const double unbiased = m > 1 ? sq / double(m - 1) : var;
                running.mean[c] = (1.0 - momentum) * running.mean[c] + momentum * mean[c];
                running.var[c] = (1.0 - momentum) * running.var[c] + momentum * unbiased;
            }
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[c] = running.mean[c];
            invstd[c] = 1.0 / std::sqrt(running.var[c] + eps);
        }
    }

    Tensor y = Tensor::zeros(s);
    std::vector<double> xhat(x.numel());
    for (int n = 0; n < s[0]; ++n)
        for (int c = 0; c < C; ++c) {
            const double* p = x.data().data() + (int64_t(n) * C + c) * hw;
            double* xh = xhat.data() + (int64_t(n) * C + c) * hw;
            double* q = y.data().data() + (int64_t(n) * C + c) * hw;
            const double gm = gamma.data()[c], bt = beta.data()[c];
            for (int64_t i = 0; i < hw; ++i) {
                xh[i] = (p[i] - mean[c]) * invstd[c];
                q[i] = xh[i] * gm + bt;
            }
        }

    if (recording({&x, &gamma, &beta})) {
        auto xi = x.impl();
        auto gi = gamma.impl();
        auto bi = beta.impl();
        TensorImpl* out = y.impl().get();
        auto saved_xhat = std::make_shared<std::vector<double>>(std::move(xhat));
        auto saved_invstd = std::make_shared<std::vector<double>>(std::move(invstd));
        attach_node(y, "batchnorm", {xi, gi, bi},
                    [xi, gi, bi, out, saved_xhat, saved_invstd, train, C, hw](GradStore& g) {
                        const std::vector<double>& dy = g.buf(out);
                        const int N = xi->shape[0];
                        const int64_t m = int64_t(N) * hw;
                        const std::vector<double>& xh = *saved_xhat;
                        for (int c = 0; c < C; ++c) {
                            double sum_dy = 0.0, sum_dy_xhat = 0.0;
                            for (int n = 0; n < N; ++n) {
                                const int64_t base = (int64_t(n) * C + c) * hw;
                                for (int64_t i = 0; i < hw; ++i) {
                                    sum_dy += dy[base + i];
                                    sum_dy_xhat += dy[base + i] * xh[base + i];
                                }
                            }
                            if (gi->requires_grad) g.buf(gi.get())[c] += sum_dy_xhat;
                            if (bi->requires_grad) g.buf(bi.get())[c] += sum_dy;
                            if (xi->requires_grad) {
                                std::vector<double>& dx = g.buf(xi.get());
                                const double gm = gi->data[c];
                                const double istd = (*saved_invstd)[c];
                                if (train) {
                                    const double mean_dy = sum_dy / double(m);
                                    const double mean_dy_xhat = sum_dy_xhat / double(m);
                                    for (int n = 0; n < N; ++n) {
                                        const int64_t base = (int64_t(n) * C + c) * hw;
                                        for (int64_t i = 0; i < hw; ++i)
                                            dx[base + i] += gm * istd *
                                                            (dy[base + i] - mean_dy -
                                                             xh[base + i] * mean_dy_xhat);
                                    }
                                } else {
                                    for (int n = 0; n < N; ++n) {
                                        const int64_t base = (int64_t(n) * C + c) * hw;
                                        for (int64_t i = 0; i < hw; ++i)
                                            dx[base + i] += gm * istd * dy[base + i];
                                    }
                                }
                            }
                        }
                    });
    }
    return y;
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

namespace ew_detail {

template <typename FwdFn, typename BwdFn>
Tensor unary(const Tensor& x, const char* name, FwdFn f, BwdFn df) {
    Tensor y = Tensor::zeros(x.shape());
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) y.data()[i] = f(x.data()[i]);
    if (recording({&x})) {
        auto xi = x.impl();
        TensorImpl* out = y.impl().get();
        attach_node(y, name, {xi}, [xi, out, df, n](GradStore& g) {
            if (!xi->requires_grad) return;
            const std::vector<double>& dy = g.buf(out);
            std::vector<double>& dx = g.buf(xi.get());
            for (int64_t i = 0; i < n; ++i)
                dx[i] += dy[i] * df(xi->data[i], out->data[i]);
        });
    }
    return y;
}

inline double sigmoid_val(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace ew_detail

inline Tensor sigmoid(const Tensor& x) {
    return ew_detail::unary(
        x, "sigmoid", ew_detail::sigmoid_val,
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor silu(const Tensor& x) {
    return ew_detail::unary(
        x, "silu", [](double v) { return v * ew_detail::sigmoid_val(v); },
        [](double v, double) {
            const double s = ew_detail::sigmoid_val(v);
            return s * (1.0 + v * (1.0 - s));
        });
}

inline Tensor exp_op(const Tensor& x) {
    return ew_detail::unary(
        x, "exp", [](double v) { return std::exp(v); },
        [](double, double y) { return y; });
}

inline Tensor scale(const Tensor& x, double a) {
    return ew_detail::unary(
        x, "scale", [a](double v) { return a * v; },
        [a](double, double) { return a; });
}

inline Tensor add(const Tensor& x, const Tensor& y) {
    if (x.shape() != y.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(x.shape()) + " vs " +
                                    shape_str(y.shape()));
    Tensor z = Tensor::zeros(x.shape());
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) z.data()[i] = x.data()[i] + y.data()[i];
    if (recording({&x, &y})) {
        auto xi = x.impl();
        auto yi = y.impl();
        TensorImpl* out = z.impl().get();
        attach_node(z, "add", {xi, yi}, [xi, yi, out, n](GradStore& g) {
            const std::vector<double>& dz = g.buf(out);
            if (xi->requires_grad) {
                std::vector<double>& dx = g.buf(xi.get());
                for (int64_t i = 0; i < n; ++i) dx[i] += dz[i];
            }
            if (yi->requires_grad) {
                std::vector<double>& dy = g.buf(yi.get());
                for (int64_t i = 0; i < n; ++i) dy[i] += dz[i];
            }
        });
    }
    return z;
}

inline Tensor mul(const Tensor& x, const Tensor& y) {
    if (x.shape() != y.shape())
        throw std::invalid_argument("mul: shape mismatch " + shape_str(x.shape()) + " vs " +
                                    shape_str(y.shape()));
    Tensor z = Tensor::zeros(x.shape());
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) z.data()[i] = x.data()[i] * y.data()[i];
    if (recording({&x, &y})) {
        auto xi = x.impl();
        auto yi = y.impl();
        TensorImpl* out = z.impl().get();
        attach_node(z, "mul", {xi, yi}, [xi, yi, out, n](GradStore& g) {
            const std::vector<double>& dz = g.buf(out);
            if (xi->requires_grad) {
                std::vector<double>& dx = g.buf(xi.get());
                for (int64_t i = 0; i < n; ++i) dx[i] += dz[i] * yi->data[i];
            }
            if (yi->requires_grad) {
                std::vector<double>& dy = g.buf(yi.get());
                for (int64_t i = 0; i < n; ++i) dy[i] += dz[i] * xi->data[i];
            }
        });
    }
    return z;
}

inline Tensor sum(const Tensor& x) {
    Tensor y = Tensor::scalar(0.0);
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    y.data()[0] = acc;
    if (recording({&x})) {
        auto xi = x.impl();
        TensorImpl* out = y.impl().get();
        attach_node(y, "sum", {xi}, [xi, out](GradStore& g) {
            if (!xi->requires_grad) return;
            const double dy = g.buf(out)[0];
            std::vector<double>& dx = g.buf(xi.get());
            for (double& v : dx) v += dy;
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// softmax / concat / upsample
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0 || axis > 3)
        throw std::invalid_argument("softmax: axis out of range");
    const Shape4& s = x.shape();
    const int L = s[axis];
    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < 4; ++i) inner *= s[i];
    for (int i = 0; i < axis; ++i) outer *= s[i];

    Tensor y = Tensor::zeros(s);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * L * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (int l = 0; l < L; ++l) mx = std::max(mx, x.data()[base + l * inner]);
            double z = 0.0;
            for (int l = 0; l < L; ++l) {
                const double e = std::exp(x.data()[base + l * inner] - mx);
                y.data()[base + l * inner] = e;
                z += e;
            }
            for (int l = 0; l < L; ++l) y.data()[base + l * inner] /= z;
        }

    if (recording({&x})) {
        auto xi = x.impl();
        TensorImpl* out = y.impl().get();
        attach_node(y, "softmax", {xi}, [xi, out, L, inner, outer](GradStore& g) {
            if (!xi->requires_grad) return;
            const std::vector<double>& dy = g.buf(out);
            std::vector<double>& dx = g.buf(xi.get());
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * L * inner + in;
                    double dot = 0.0;
                    for (int l = 0; l < L; ++l)
                        dot += dy[base + l * inner] * out->data[base + l * inner];
                    for (int l = 0; l < L; ++l)
                        dx[base + l * inner] +=
                            out->data[base + l * inner] * (dy[base + l * inner] - dot);
                }
        });
    }
    return y;
}

inline Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: no inputs");
    if (axis < 0 || axis > 3) throw std::invalid_argument("concat: axis out of range");
    Shape4 s = xs[0].shape();
    int total = 0;
    for (const Tensor& t : xs) {
        for (int i = 0; i < 4; ++i)
            if (i != axis && t.shape()[i] != s[i])
                throw std::invalid_argument("concat: inputs disagree on non-concat dims");
        total += t.shape()[axis];
    }
    s[axis] = total;

    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < 4; ++i) inner *= s[i];
    for (int i = 0; i < axis; ++i) outer *= s[i];

    Tensor y = Tensor::zeros(s);
    int off = 0;
    for (const Tensor& t : xs) {
        const int la = t.shape()[axis];
        for (int64_t o = 0; o < outer; ++o)
            std::copy(t.data().data() + o * la * inner, t.data().data() + (o + 1) * la * inner,
                      y.data().data() + (o * total + off) * inner);
        off += la;
    }

    bool rec = autograd::grad_enabled();
    if (rec) {
        rec = false;
        for (const Tensor& t : xs) rec = rec || t.requires_grad();
    }
    if (rec) {
        std::vector<std::shared_ptr<TensorImpl>> ins;
        std::vector<int> lens;
        for (const Tensor& t : xs) {
            ins.push_back(t.impl());
            lens.push_back(t.shape()[axis]);
        }
        TensorImpl* out = y.impl().get();
        auto ins_copy = ins;
        attach_node(y, "concat", std::move(ins),
                    [ins_copy, lens, out, inner, outer, total](GradStore& g) {
                        const std::vector<double>& dy = g.buf(out);
                        int off = 0;
                        for (size_t k = 0; k < ins_copy.size(); ++k) {
                            const int la = lens[k];
                            if (ins_copy[k]->requires_grad) {
                                std::vector<double>& dx = g.buf(ins_copy[k].get());
                                for (int64_t o = 0; o < outer; ++o) {
                                    const double* src = dy.data() + (o * total + off) * inner;
                                    double* dst = dx.data() + o * la * inner;
                                    for (int64_t i = 0; i < la * inner; ++i) dst[i] += src[i];
                                }
                            }
                            off += la;
                        }
                    });
    }
    return y;
}

inline Tensor upsample_nearest2x(const Tensor& x) {
    const Shape4& s = x.shape();
    Tensor y = Tensor::zeros({s[0], s[1], s[2] * 2, s[3] * 2});
    for (int64_t p = 0; p < int64_t(s[0]) * s[1]; ++p) {
        const double* in = x.data().data() + p * s[2] * s[3];
        double* out = y.data().data() + p * s[2] * s[3] * 4;
        for (int i = 0; i < s[2]; ++i)
            for (int j = 0; j < s[3]; ++j) {
                const double v = in[int64_t(i) * s[3] + j];
                double* row0 = out + int64_t(2 * i) * (2 * s[3]) + 2 * j;
                row0[0] = v;
                row0[1] = v;
                row0[2 * s[3]] = v;
                row0[2 * s[3] + 1] = v;
            }
    }
    if (recording({&x})) {
        auto xi = x.impl();
        TensorImpl* out = y.impl().get();
        attach_node(y, "upsample2x", {xi}, [xi, out](GradStore& g) {
            if (!xi->requires_grad) return;
            const Shape4& s = xi->shape;
            const std::vector<double>& dy = g.buf(out);
            std::vector<double>& dx = g.buf(xi.get());
            for (int64_t p = 0; p < int64_t(s[0]) * s[1]; ++p) {
                const double* gin = dy.data() + p * s[2] * s[3] * 4;
                double* gout = dx.data() + p * s[2] * s[3];
                for (int i = 0; i < s[2]; ++i)
                    for (int j = 0; j < s[3]; ++j) {
                        const double* row0 = gin + int64_t(2 * i) * (2 * s[3]) + 2 * j;
                        gout[int64_t(i) * s[3] + j] +=
                            row0[0] + row0[1] + row0[2 * s[3]] + row0[2 * s[3] + 1];
                    }
            }
        });
    }
    return y;
}

}  // namespace sardet
