#pragma once

#include <algorithm>
#include <cblas.h>
#include <cmath>

#include "cseg/tensor.hpp"

namespace cseg {

// ---------------------------------------------------------------------------
// BLAS bridge. All convolutions lower to im2col + gemm; everything else is
// plain loops. Row-major throughout.
// ---------------------------------------------------------------------------

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta,
                 float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
                beta, c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb, double beta,
                 double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
                beta, c, ldc);
}

namespace detail {

template <class T>
std::vector<T>& scratch_a() {
    thread_local std::vector<T> buf;
    return buf;
}
template <class T>
std::vector<T>& scratch_b() {
    thread_local std::vector<T> buf;
    return buf;
}

template <class T>
void im2col(const T* x, int ci, int h, int w, int kh, int kw, int stride, int ph,
            int pw, int ho, int wo, T* col) {
    const long plane = static_cast<long>(ho) * wo;
    for (int c = 0; c < ci; ++c) {
        const T* src = x + static_cast<long>(c) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                T* dst = col + (static_cast<long>(c) * kh * kw + ky * kw + kx) * plane;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - ph + ky;
                    T* drow = dst + static_cast<long>(oy) * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(drow, drow + wo, T(0));
                        continue;
                    }
                    const T* srow = src + static_cast<long>(iy) * w;
                    if (stride == 1) {
                        const int ix0 = kx - pw;
                        const int lo = std::max(0, -ix0);
                        const int hi = std::min(wo, w - ix0);
                        if (lo > 0) std::fill(drow, drow + std::min(lo, wo), T(0));
                        if (hi < wo) std::fill(drow + std::max(hi, 0), drow + wo, T(0));
                        if (hi > lo) std::copy(srow + ix0 + lo, srow + ix0 + hi, drow + lo);
                    } else {
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * stride - pw + kx;
                            drow[ox] = (ix >= 0 && ix < w) ? srow[ix] : T(0);
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* col, int ci, int h, int w, int kh, int kw, int stride,
                int ph, int pw, int ho, int wo, T* dx) {
    const long plane = static_cast<long>(ho) * wo;
    for (int c = 0; c < ci; ++c) {
        T* dst = dx + static_cast<long>(c) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const T* src = col + (static_cast<long>(c) * kh * kw + ky * kw + kx) * plane;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - ph + ky;
                    if (iy < 0 || iy >= h) continue;
                    const T* srow = src + static_cast<long>(oy) * wo;
                    T* drow = dst + static_cast<long>(iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pw + kx;
                        if (ix >= 0 && ix < w) drow[ix] += srow[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution (cross-correlation). weight [Co, Ci, kh, kw], bias [Co].
// ---------------------------------------------------------------------------

inline std::pair<int, int> conv_output_hw(int h, int w, int kh, int kw, int stride,
                                          int ph, int pw) {
    const int ho = (h + 2 * ph - kh) / stride + 1;
    const int wo = (w + 2 * pw - kw) / stride + 1;
    return {ho, wo};
}

template <class T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int ph, int pw) {
    const Shape4 xs = x.shape(), ws = weight.shape();
    CSEG_CHECK(ws.c == xs.c, "conv2d: input channels ", xs.str(),
               " do not match weight ", ws.str());
    CSEG_CHECK(bias.numel() == ws.b, "conv2d: bias length ", bias.numel(),
               " != out channels ", ws.b);
    CSEG_CHECK(stride >= 1 && ph >= 0 && pw >= 0, "conv2d: bad stride/padding");
    auto [ho, wo] = conv_output_hw(xs.h, xs.w, ws.h, ws.w, stride, ph, pw);
    CSEG_CHECK(ho >= 1 && wo >= 1, "conv2d: output dims ", ho, "x", wo,
               " < 1 for input ", xs.str(), " weight ", ws.str());

    const int co = ws.b, k = ws.c * ws.h * ws.w;
    const long plane = static_cast<long>(ho) * wo;
    Tensor<T> out = Tensor<T>::zeros({xs.b, co, ho, wo});

    auto& col = detail::scratch_a<T>();
    col.resize(static_cast<size_t>(k) * plane);
    for (int b = 0; b < xs.b; ++b) {
        detail::im2col(x.data().data() + static_cast<long>(b) * xs.c * xs.h * xs.w,
                       xs.c, xs.h, xs.w, ws.h, ws.w, stride, ph, pw, ho, wo, col.data());
        T* o = out.data().data() + static_cast<long>(b) * co * plane;
        gemm(false, false, co, static_cast<int>(plane), k, T(1), weight.data().data(), k,
             col.data(), static_cast<int>(plane), T(0), o, static_cast<int>(plane));
        for (int c = 0; c < co; ++c) {
            const T bv = bias.data()[c];
            T* row = o + static_cast<long>(c) * plane;
            for (long i = 0; i < plane; ++i) row[i] += bv;
        }
    }

    const bool rg = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
    tape.own(out, rg);
    if (rg) {
        const int st = stride, pph = ph, ppw = pw;
        tape.record([x, weight, bias, out, st, pph, ppw, ho, wo, co, k]() {
            const Shape4 xs2 = x.shape(), ws2 = weight.shape();
            const long plane2 = static_cast<long>(ho) * wo;
            auto& col2 = detail::scratch_a<T>();
            col2.resize(static_cast<size_t>(k) * plane2);
            auto& dcol = detail::scratch_b<T>();
            if (x.requires_grad()) dcol.resize(static_cast<size_t>(k) * plane2);
            for (int b = 0; b < xs2.b; ++b) {
                const T* go = out.grad().data() + static_cast<long>(b) * co * plane2;
                detail::im2col(
                    x.data().data() + static_cast<long>(b) * xs2.c * xs2.h * xs2.w, xs2.c,
                    xs2.h, xs2.w, ws2.h, ws2.w, st, pph, ppw, ho, wo, col2.data());
                if (weight.requires_grad()) {
                    gemm(false, true, co, k, static_cast<int>(plane2), T(1), go,
                         static_cast<int>(plane2), col2.data(), static_cast<int>(plane2),
                         T(1), weight.grad().data(), k);
                }
                if (bias.requires_grad()) {
                    for (int c = 0; c < co; ++c) {
                        T s = 0;
                        const T* row = go + static_cast<long>(c) * plane2;
                        for (long i = 0; i < plane2; ++i) s += row[i];
                        bias.grad()[c] += s;
                    }
                }
                if (x.requires_grad()) {
                    gemm(true, false, k, static_cast<int>(plane2), co, T(1),
                         weight.data().data(), k, go, static_cast<int>(plane2), T(0),
                         dcol.data(), static_cast<int>(plane2));
                    detail::col2im_add(
                        dcol.data(), xs2.c, xs2.h, xs2.w, ws2.h, ws2.w, st, pph, ppw, ho,
                        wo, x.grad().data() + static_cast<long>(b) * xs2.c * xs2.h * xs2.w);
                }
            }
        });
    }
    return out;
}

// Per-channel 3x3 convolution, padding 1, stride 1. weight [C, 1, 3, 3].
template <class T>
Tensor<T> depthwise_conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                           const Tensor<T>& bias) {
    const Shape4 xs = x.shape(), ws = weight.shape();
    CSEG_CHECK(ws.b == xs.c && ws.c == 1 && ws.h == 3 && ws.w == 3,
               "depthwise_conv2d: weight ", ws.str(), " must be [", xs.c, ",1,3,3] for input ",
               xs.str());
    CSEG_CHECK(bias.numel() == xs.c, "depthwise_conv2d: bias length mismatch");

    Tensor<T> out = Tensor<T>::zeros(xs);
    const int h = xs.h, w = xs.w;
    for (int b = 0; b < xs.b; ++b) {
        for (int c = 0; c < xs.c; ++c) {
            const T* src = x.data().data() + idx4(xs, b, c, 0, 0);
            const T* ker = weight.data().data() + static_cast<long>(c) * 9;
            const T bv = bias.data()[c];
            T* dst = out.data().data() + idx4(xs, b, c, 0, 0);
            for (int y = 0; y < h; ++y) {
                for (int xw = 0; xw < w; ++xw) {
                    T acc = bv;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int iy = y + ky - 1;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int ix = xw + kx - 1;
                            if (ix < 0 || ix >= w) continue;
                            acc += ker[ky * 3 + kx] * src[static_cast<long>(iy) * w + ix];
                        }
                    }
                    dst[static_cast<long>(y) * w + xw] = acc;
                }
            }
        }
    }

    const bool rg = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([x, weight, bias, out]() {
            const Shape4 xs2 = x.shape();
            const int h = xs2.h, w = xs2.w;
            for (int b = 0; b < xs2.b; ++b) {
                for (int c = 0; c < xs2.c; ++c) {
                    const T* go = out.grad().data() + idx4(xs2, b, c, 0, 0);
                    const T* src = x.data().data() + idx4(xs2, b, c, 0, 0);
                    const T* ker = weight.data().data() + static_cast<long>(c) * 9;
                    T* gx = x.requires_grad()
                                ? x.grad().data() + idx4(xs2, b, c, 0, 0)
                                : nullptr;
                    T* gw = weight.requires_grad()
                                ? weight.grad().data() + static_cast<long>(c) * 9
                                : nullptr;
                    if (bias.requires_grad()) {
                        T s = 0;
                        for (long i = 0; i < static_cast<long>(h) * w; ++i) s += go[i];
                        bias.grad()[c] += s;
                    }
                    for (int y = 0; y < h; ++y) {
                        for (int xw = 0; xw < w; ++xw) {
                            const T g = go[static_cast<long>(y) * w + xw];
                            if (g == T(0)) continue;
                            for (int ky = 0; ky < 3; ++ky) {
                                const int iy = y + ky - 1;
                                if (iy < 0 || iy >= h) continue;
                                for (int kx = 0; kx < 3; ++kx) {
                                    const int ix = xw + kx - 1;
                                    if (ix < 0 || ix >= w) continue;
                                    const long si = static_cast<long>(iy) * w + ix;
                                    if (gw) gw[ky * 3 + kx] += g * src[si];
                                    if (gx) gx[si] += g * ker[ky * 3 + kx];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalizations.
// ---------------------------------------------------------------------------

// Batch norm over [B,C,H,W]: per-channel statistics across batch and space.
// Train mode normalizes by batch stats (biased variance) and updates the
// running buffers with momentum; eval mode uses the running buffers.
template <class T>
Tensor<T> batch_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, bool train, T momentum = T(0.1),
                     T eps = T(1e-5)) {
    const Shape4 xs = x.shape();
    const int c = xs.c;
    CSEG_CHECK(gamma.numel() == c && beta.numel() == c && running_mean.numel() == c &&
                   running_var.numel() == c,
               "batch_norm: affine/running sizes must equal channel count ", c);
    const long n = static_cast<long>(xs.b) * xs.h * xs.w;
    if (train) {
        CSEG_CHECK(n > 1, "batch_norm: train mode needs batch*height*width > 1, got ", n,
                   " (zero-variance hazard)");
    }

    Tensor<T> out = Tensor<T>::zeros(xs);
    std::vector<T> mu(c), inv_s(c);
    const long plane = static_cast<long>(xs.h) * xs.w;

    if (train) {
        for (int ch = 0; ch < c; ++ch) {
            double s = 0, s2 = 0;
            for (int b = 0; b < xs.b; ++b) {
                const T* row = x.data().data() + idx4(xs, b, ch, 0, 0);
                for (long i = 0; i < plane; ++i) {
                    s += row[i];
                    s2 += static_cast<double>(row[i]) * row[i];
                }
            }
            const double mean = s / n;
            const double var = std::max(0.0, s2 / n - mean * mean);
            mu[ch] = static_cast<T>(mean);
            inv_s[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            running_mean.data()[ch] =
                (T(1) - momentum) * running_mean.data()[ch] + momentum * static_cast<T>(mean);
            const double var_unbiased = var * static_cast<double>(n) / (n - 1);
            running_var.data()[ch] = (T(1) - momentum) * running_var.data()[ch] +
                                     momentum * static_cast<T>(var_unbiased);
        }
    } else {
        for (int ch = 0; ch < c; ++ch) {
            mu[ch] = running_mean.data()[ch];
            inv_s[ch] = static_cast<T>(
                1.0 / std::sqrt(static_cast<double>(running_var.data()[ch]) +
                                static_cast<double>(eps)));
        }
    }

    for (int b = 0; b < xs.b; ++b) {
        for (int ch = 0; ch < c; ++ch) {
            const T g = gamma.data()[ch], bt = beta.data()[ch];
            const T m = mu[ch], is = inv_s[ch];
            const T* src = x.data().data() + idx4(xs, b, ch, 0, 0);
            T* dst = out.data().data() + idx4(xs, b, ch, 0, 0);
            for (long i = 0; i < plane; ++i) dst[i] = g * (src[i] - m) * is + bt;
        }
    }

    const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([x, gamma, beta, out, mu, inv_s, train, n]() {
            const Shape4 xs2 = x.shape();
            const long plane2 = static_cast<long>(xs2.h) * xs2.w;
            for (int ch = 0; ch < xs2.c; ++ch) {
                const T m = mu[ch], is = inv_s[ch], g = gamma.data()[ch];
                double sum_dy = 0, sum_dy_xhat = 0;
                for (int b = 0; b < xs2.b; ++b) {
                    const T* go = out.grad().data() + idx4(xs2, b, ch, 0, 0);
                    const T* src = x.data().data() + idx4(xs2, b, ch, 0, 0);
                    for (long i = 0; i < plane2; ++i) {
                        const T xhat = (src[i] - m) * is;
                        sum_dy += go[i];
                        sum_dy_xhat += static_cast<double>(go[i]) * xhat;
                    }
                }
                if (gamma.requires_grad()) gamma.grad()[ch] += static_cast<T>(sum_dy_xhat);
                if (beta.requires_grad()) beta.grad()[ch] += static_cast<T>(sum_dy);
                if (x.requires_grad()) {
                    if (train) {
                        const T mean_dy = static_cast<T>(sum_dy / n);
                        const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / n);
                        for (int b = 0; b < xs2.b; ++b) {
                            const T* go = out.grad().data() + idx4(xs2, b, ch, 0, 0);
                            const T* src = x.data().data() + idx4(xs2, b, ch, 0, 0);
                            T* gx = x.grad().data() + idx4(xs2, b, ch, 0, 0);
                            for (long i = 0; i < plane2; ++i) {
                                const T xhat = (src[i] - m) * is;
                                gx[i] += g * is * (go[i] - mean_dy - xhat * mean_dy_xhat);
                            }
                        }
                    } else {
                        for (int b = 0; b < xs2.b; ++b) {
                            const T* go = out.grad().data() + idx4(xs2, b, ch, 0, 0);
                            T* gx = x.grad().data() + idx4(xs2, b, ch, 0, 0);
                            for (long i = 0; i < plane2; ++i) gx[i] += g * is * go[i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Which tensor axis a normalization or softmax reduces over.
enum class Axis {
    Channel,  // axis 1: per (b,h,w) across C
    Dim2,     // axis 2: per (b,c,w) across H (token tensors [B,L,D,1] reduce D)
    Spatial,  // axes 2+3 jointly: per (b,c) across H*W
};

namespace detail {

// Walks every 1-D slice along `axis` and invokes fn(base_ptr_offset, stride, n).
template <class F>
void for_each_lane(const Shape4& s, Axis axis, F&& fn) {
    if (axis == Axis::Channel) {
        const long plane = static_cast<long>(s.h) * s.w;
        for (int b = 0; b < s.b; ++b) {
            const long base_b = static_cast<long>(b) * s.c * plane;
            for (long i = 0; i < plane; ++i) fn(base_b + i, plane, s.c);
        }
    } else if (axis == Axis::Dim2) {
        for (int b = 0; b < s.b; ++b)
            for (int c = 0; c < s.c; ++c)
                for (int w = 0; w < s.w; ++w)
                    fn(idx4(s, b, c, 0, w), static_cast<long>(s.w), s.h);
    } else {  // Spatial
        const long plane = static_cast<long>(s.h) * s.w;
        for (int b = 0; b < s.b; ++b)
            for (int c = 0; c < s.c; ++c)
                fn(idx4(s, b, c, 0, 0), 1L, static_cast<int>(plane));
    }
}

}  // namespace detail

// Layer norm over one axis with per-position affine (gamma/beta sized to
// the normalized axis).
template <class T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Axis axis = Axis::Dim2, T eps = T(1e-5)) {
    const Shape4 xs = x.shape();
    const int n = (axis == Axis::Channel) ? xs.c : xs.h;
    CSEG_CHECK(axis != Axis::Spatial, "layer_norm: spatial axis not supported");
    CSEG_CHECK(gamma.numel() == n && beta.numel() == n,
               "layer_norm: affine size must be ", n, " for input ", xs.str());

    Tensor<T> out = Tensor<T>::zeros(xs);
    detail::for_each_lane(xs, axis, [&](long base, long stride, int len) {
        double s = 0, s2 = 0;
        for (int i = 0; i < len; ++i) {
            const double v = x.data()[base + i * stride];
            s += v;
            s2 += v * v;
        }
        const double mean = s / len;
        const double var = std::max(0.0, s2 / len - mean * mean);
        const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
        for (int i = 0; i < len; ++i) {
            const double xhat = (x.data()[base + i * stride] - mean) * is;
            out.data()[base + i * stride] =
                static_cast<T>(gamma.data()[i] * xhat + beta.data()[i]);
        }
    });

    const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([x, gamma, beta, out, axis, eps]() {
            const Shape4 xs2 = x.shape();
            detail::for_each_lane(xs2, axis, [&](long base, long stride, int len) {
                double s = 0, s2 = 0;
                for (int i = 0; i < len; ++i) {
                    const double v = x.data()[base + i * stride];
                    s += v;
                    s2 += v * v;
                }
                const double mean = s / len;
                const double var = std::max(0.0, s2 / len - mean * mean);
                const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
                double sum_dxhat = 0, sum_dxhat_xhat = 0;
                for (int i = 0; i < len; ++i) {
                    const long k = base + i * stride;
                    const double xhat = (x.data()[k] - mean) * is;
                    const double dy = out.grad()[k];
                    const double dxhat = dy * gamma.data()[i];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    if (gamma.requires_grad()) gamma.grad()[i] += static_cast<T>(dy * xhat);
                    if (beta.requires_grad()) beta.grad()[i] += static_cast<T>(dy);
                }
                if (x.requires_grad()) {
                    const double mean_dxhat = sum_dxhat / len;
                    const double mean_dxhat_xhat = sum_dxhat_xhat / len;
                    for (int i = 0; i < len; ++i) {
                        const long k = base + i * stride;
                        const double xhat = (x.data()[k] - mean) * is;
                        const double dxhat = static_cast<double>(out.grad()[k]) * gamma.data()[i];
                        x.grad()[k] += static_cast<T>(
                            is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
                    }
                }
            });
        });
    }
    return out;
}

// Max-subtracted softmax along `axis`. With axis == Channel, `groups`
// splits the channels into independent contiguous groups (multi-head
// attention over channel slices).
template <class T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, Axis axis, int groups = 1) {
    const Shape4 xs = x.shape();
    CSEG_CHECK(groups >= 1, "softmax: groups must be >= 1");
    if (axis == Axis::Channel) {
        CSEG_CHECK(xs.c % groups == 0, "softmax: channels ", xs.c, " not divisible by groups ",
                   groups);
    } else {
        CSEG_CHECK(groups == 1, "softmax: groups only supported on the channel axis");
    }

    Tensor<T> out = Tensor<T>::zeros(xs);
    auto lane_softmax = [&](long base, long stride, int len) {
        T mx = x.data()[base];
        for (int i = 1; i < len; ++i) mx = std::max(mx, x.data()[base + i * stride]);
        double denom = 0;
        for (int i = 0; i < len; ++i) {
            const double e = std::exp(static_cast<double>(x.data()[base + i * stride] - mx));
            out.data()[base + i * stride] = static_cast<T>(e);
            denom += e;
        }
        const double inv = 1.0 / denom;
        for (int i = 0; i < len; ++i)
            out.data()[base + i * stride] = static_cast<T>(out.data()[base + i * stride] * inv);
    };

    if (axis == Axis::Channel && groups > 1) {
        const int gc = xs.c / groups;
        const long plane = static_cast<long>(xs.h) * xs.w;
        for (int b = 0; b < xs.b; ++b)
            for (int g = 0; g < groups; ++g) {
                const long base_g =
                    (static_cast<long>(b) * xs.c + static_cast<long>(g) * gc) * plane;
                for (long i = 0; i < plane; ++i) lane_softmax(base_g + i, plane, gc);
            }
    } else {
        detail::for_each_lane(xs, axis, lane_softmax);
    }

    const bool rg = x.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([x, out, axis, groups]() {
            const Shape4 xs2 = x.shape();
            auto lane_bwd = [&](long base, long stride, int len) {
                double dot = 0;
                for (int i = 0; i < len; ++i) {
                    const long k = base + i * stride;
                    dot += static_cast<double>(out.grad()[k]) * out.data()[k];
                }
                for (int i = 0; i < len; ++i) {
                    const long k = base + i * stride;
                    x.grad()[k] += static_cast<T>(out.data()[k] *
                                                  (static_cast<double>(out.grad()[k]) - dot));
                }
            };
            if (axis == Axis::Channel && groups > 1) {
                const int gc = xs2.c / groups;
                const long plane = static_cast<long>(xs2.h) * xs2.w;
                for (int b = 0; b < xs2.b; ++b)
                    for (int g = 0; g < groups; ++g) {
                        const long base_g =
                            (static_cast<long>(b) * xs2.c + static_cast<long>(g) * gc) * plane;
                        for (long i = 0; i < plane; ++i) lane_bwd(base_g + i, plane, gc);
                    }
            } else {
                detail::for_each_lane(xs2, axis, lane_bwd);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise activations and arithmetic.
// ---------------------------------------------------------------------------

namespace detail {

template <class T, class FwdFn, class BwdFn>
Tensor<T> unary_op(Tape<T>& tape, const Tensor<T>& x, FwdFn fwd, BwdFn dfdx) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const long n = x.numel();
    for (long i = 0; i < n; ++i) out.data()[i] = fwd(x.data()[i]);
    const bool rg = x.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([x, out, dfdx]() {
            const long n2 = x.numel();
            for (long i = 0; i < n2; ++i)
                x.grad()[i] += out.grad()[i] * dfdx(x.data()[i], out.data()[i]);
        });
    }
    return out;
}

}  // namespace detail

template <class T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
    return detail::unary_op(
        tape, x,
        [](T v) { return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v)))); },
        [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
    return detail::unary_op(
        tape, x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    return detail::unary_op(
        tape, x,
        [](T v) {
            const double d = static_cast<double>(v);
            return static_cast<T>(0.5 * d * (1.0 + std::erf(d * kInvSqrt2)));
        },
        [](T v, T) {
            const double d = static_cast<double>(v);
            const double cdf = 0.5 * (1.0 + std::erf(d * kInvSqrt2));
            return static_cast<T>(cdf + d * kInvSqrt2Pi * std::exp(-0.5 * d * d));
        });
}

// y = alpha * x + beta, elementwise.
template <class T>
Tensor<T> affine(Tape<T>& tape, const Tensor<T>& x, T alpha, T beta) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const long n = x.numel();
    for (long i = 0; i < n; ++i) out.data()[i] = alpha * x.data()[i] + beta;
    const bool rg = x.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([x, out, alpha]() {
            const long n2 = x.numel();
            for (long i = 0; i < n2; ++i) x.grad()[i] += alpha * out.grad()[i];
        });
    }
    return out;
}

namespace detail {

template <class T, class Fwd, class BwdA, class BwdB>
Tensor<T> binary_op(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd,
                    BwdA da, BwdB db) {
    CSEG_CHECK(a.shape() == b.shape(), "elementwise op: shape mismatch ", a.shape().str(),
               " vs ", b.shape().str());
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const long n = a.numel();
    for (long i = 0; i < n; ++i) out.data()[i] = fwd(a.data()[i], b.data()[i]);
    const bool rg = a.requires_grad() || b.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([a, b, out, da, db]() {
            const long n2 = a.numel();
            for (long i = 0; i < n2; ++i) {
                const T g = out.grad()[i];
                if (a.requires_grad()) a.grad()[i] += g * da(a.data()[i], b.data()[i]);
                if (b.requires_grad()) b.grad()[i] += g * db(a.data()[i], b.data()[i]);
            }
        });
    }
    return out;
}

}  // namespace detail

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        tape, a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
        [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        tape, a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
        [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        tape, a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
        [](T x, T) { return x; });
}

// x [B,C,H,W] scaled by a single-channel map s [B,1,H,W].
template <class T>
Tensor<T> mul_channel(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& s) {
    const Shape4 xs = x.shape(), ss = s.shape();
    CSEG_CHECK(ss.b == xs.b && ss.c == 1 && ss.h == xs.h && ss.w == xs.w,
               "mul_channel: scale ", ss.str(), " incompatible with ", xs.str());
    Tensor<T> out = Tensor<T>::zeros(xs);
    const long plane = static_cast<long>(xs.h) * xs.w;
    for (int b = 0; b < xs.b; ++b) {
        const T* sv = s.data().data() + static_cast<long>(b) * plane;
        for (int c = 0; c < xs.c; ++c) {
            const T* xv = x.data().data() + idx4(xs, b, c, 0, 0);
            T* o = out.data().data() + idx4(xs, b, c, 0, 0);
            for (long i = 0; i < plane; ++i) o[i] = xv[i] * sv[i];
        }
    }
    const bool rg = x.requires_grad() || s.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([x, s, out]() {
            const Shape4 xs2 = x.shape();
            const long plane2 = static_cast<long>(xs2.h) * xs2.w;
            for (int b = 0; b < xs2.b; ++b) {
                const T* sv = s.data().data() + static_cast<long>(b) * plane2;
                T* gs = s.requires_grad() ? s.grad().data() + static_cast<long>(b) * plane2
                                          : nullptr;
                for (int c = 0; c < xs2.c; ++c) {
                    const T* xv = x.data().data() + idx4(xs2, b, c, 0, 0);
                    const T* go = out.grad().data() + idx4(xs2, b, c, 0, 0);
                    if (x.requires_grad()) {
                        T* gx = x.grad().data() + idx4(xs2, b, c, 0, 0);
                        for (long i = 0; i < plane2; ++i) gx[i] += go[i] * sv[i];
                    }
                    if (gs) {
                        for (long i = 0; i < plane2; ++i) gs[i] += go[i] * xv[i];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> concat_channels(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
    CSEG_CHECK(!parts.empty(), "concat_channels: no inputs");
    const Shape4 s0 = parts[0].shape();
    int ctotal = 0;
    bool rg = false;
    for (const auto& t : parts) {
        const Shape4 s = t.shape();
        CSEG_CHECK(s.b == s0.b && s.h == s0.h && s.w == s0.w,
                   "concat_channels: incompatible shapes ", s.str(), " vs ", s0.str());
        ctotal += s.c;
        rg = rg || t.requires_grad();
    }
    Tensor<T> out = Tensor<T>::zeros({s0.b, ctotal, s0.h, s0.w});
    const long plane = static_cast<long>(s0.h) * s0.w;
    for (int b = 0; b < s0.b; ++b) {
        int coff = 0;
        for (const auto& t : parts) {
            const int tc = t.shape().c;
            std::copy(t.data().data() + static_cast<long>(b) * tc * plane,
                      t.data().data() + static_cast<long>(b + 1) * tc * plane,
                      out.data().data() + (static_cast<long>(b) * ctotal + coff) * plane);
            coff += tc;
        }
    }
    tape.own(out, rg);
    if (rg) {
        tape.record([parts, out, ctotal]() {
            const Shape4 s = parts[0].shape();
            const long plane2 = static_cast<long>(s.h) * s.w;
            for (int b = 0; b < s.b; ++b) {
                int coff = 0;
                for (const auto& t : parts) {
                    const int tc = t.shape().c;
                    if (t.requires_grad()) {
                        const T* go =
                            out.grad().data() + (static_cast<long>(b) * ctotal + coff) * plane2;
                        T* gt = t.grad().data() + static_cast<long>(b) * tc * plane2;
                        for (long i = 0; i < static_cast<long>(tc) * plane2; ++i) gt[i] += go[i];
                    }
                    coff += tc;
                }
            }
        });
    }
    return out;
}

// Channels [c0, c1) of x.
template <class T>
Tensor<T> slice_channels(Tape<T>& tape, const Tensor<T>& x, int c0, int c1) {
    const Shape4 xs = x.shape();
    CSEG_CHECK(0 <= c0 && c0 < c1 && c1 <= xs.c, "slice_channels: bad range [", c0, ",", c1,
               ") for ", xs.str());
    const int cs = c1 - c0;
    Tensor<T> out = Tensor<T>::zeros({xs.b, cs, xs.h, xs.w});
    const long plane = static_cast<long>(xs.h) * xs.w;
    for (int b = 0; b < xs.b; ++b)
        std::copy(x.data().data() + (static_cast<long>(b) * xs.c + c0) * plane,
                  x.data().data() + (static_cast<long>(b) * xs.c + c1) * plane,
                  out.data().data() + static_cast<long>(b) * cs * plane);
    const bool rg = x.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([x, out, c0, cs]() {
            const Shape4 xs2 = x.shape();
            const long plane2 = static_cast<long>(xs2.h) * xs2.w;
            for (int b = 0; b < xs2.b; ++b) {
                const T* go = out.grad().data() + static_cast<long>(b) * cs * plane2;
                T* gx = x.grad().data() + (static_cast<long>(b) * xs2.c + c0) * plane2;
                for (long i = 0; i < static_cast<long>(cs) * plane2; ++i) gx[i] += go[i];
            }
        });
    }
    return out;
}

// [B,C,H,W] -> token sequence [B,H*W,C,1]; row-major spatial flattening
// (token index = y*W + x).
template <class T>
Tensor<T> to_tokens(Tape<T>& tape, const Tensor<T>& x) {
    const Shape4 xs = x.shape();
    Tensor<T> out = Tensor<T>::zeros({xs.b, xs.h * xs.w, xs.c, 1});
    for (int b = 0; b < xs.b; ++b)
        for (int c = 0; c < xs.c; ++c)
            for (int y = 0; y < xs.h; ++y)
                for (int xw = 0; xw < xs.w; ++xw)
                    out.at(b, y * xs.w + xw, c, 0) = x.at(b, c, y, xw);
    const bool rg = x.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([x, out]() {
            const Shape4 xs2 = x.shape();
            const Shape4 os = out.shape();
            for (int b = 0; b < xs2.b; ++b)
                for (int c = 0; c < xs2.c; ++c)
                    for (int y = 0; y < xs2.h; ++y)
                        for (int xw = 0; xw < xs2.w; ++xw)
                            x.grad()[idx4(xs2, b, c, y, xw)] +=
                                out.grad()[idx4(os, b, y * xs2.w + xw, c, 0)];
        });
    }
    return out;
}

// Inverse of to_tokens: [B,L,C,1] with L == h*w back to [B,C,h,w].
template <class T>
Tensor<T> to_spatial(Tape<T>& tape, const Tensor<T>& tokens, int h, int w) {
    const Shape4 ts = tokens.shape();
    CSEG_CHECK(ts.c == h * w && ts.w == 1, "to_spatial: token shape ", ts.str(),
               " incompatible with ", h, "x", w);
    Tensor<T> out = Tensor<T>::zeros({ts.b, ts.h, h, w});
    for (int b = 0; b < ts.b; ++b)
        for (int d = 0; d < ts.h; ++d)
            for (int y = 0; y < h; ++y)
                for (int xw = 0; xw < w; ++xw)
                    out.at(b, d, y, xw) = tokens.at(b, y * w + xw, d, 0);
    const bool rg = tokens.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([tokens, out, h, w]() {
            const Shape4 ts2 = tokens.shape();
            const Shape4 os = out.shape();
            for (int b = 0; b < ts2.b; ++b)
                for (int d = 0; d < ts2.h; ++d)
                    for (int y = 0; y < h; ++y)
                        for (int xw = 0; xw < w; ++xw)
                            tokens.grad()[idx4(ts2, b, y * w + xw, d, 0)] +=
                                out.grad()[idx4(os, b, d, y, xw)];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Resampling and pooling.
// ---------------------------------------------------------------------------

namespace detail {

struct LerpIdx {
    int i0, i1;
    double w1;  // weight of i1; weight of i0 is 1-w1
};

// align_corners = false source coordinates for a 2x upsample.
inline LerpIdx upsample2x_coord(int out_i, int in_n) {
    const double s = (out_i + 0.5) / 2.0 - 0.5;
    double fl = std::floor(s);
    int i0 = static_cast<int>(fl);
    double w1 = s - fl;
    int i1 = i0 + 1;
    if (i0 < 0) i0 = 0;
    if (i1 < 0) i1 = 0;
    if (i0 > in_n - 1) i0 = in_n - 1;
    if (i1 > in_n - 1) i1 = in_n - 1;
    return {i0, i1, w1};
}

}  // namespace detail

template <class T>
Tensor<T> bilinear_upsample2x(Tape<T>& tape, const Tensor<T>& x) {
    const Shape4 xs = x.shape();
    const int ho = xs.h * 2, wo = xs.w * 2;
    Tensor<T> out = Tensor<T>::zeros({xs.b, xs.c, ho, wo});
    std::vector<detail::LerpIdx> ys(ho), xs_idx(wo);
    for (int i = 0; i < ho; ++i) ys[i] = detail::upsample2x_coord(i, xs.h);
    for (int j = 0; j < wo; ++j) xs_idx[j] = detail::upsample2x_coord(j, xs.w);
    for (int b = 0; b < xs.b; ++b)
        for (int c = 0; c < xs.c; ++c) {
            const T* src = x.data().data() + idx4(xs, b, c, 0, 0);
            T* dst = out.data().data() + idx4(out.shape(), b, c, 0, 0);
            for (int y = 0; y < ho; ++y) {
                const auto& ly = ys[y];
                const T* r0 = src + static_cast<long>(ly.i0) * xs.w;
                const T* r1 = src + static_cast<long>(ly.i1) * xs.w;
                T* drow = dst + static_cast<long>(y) * wo;
                for (int xw = 0; xw < wo; ++xw) {
                    const auto& lx = xs_idx[xw];
                    const double top = (1.0 - lx.w1) * r0[lx.i0] + lx.w1 * r0[lx.i1];
                    const double bot = (1.0 - lx.w1) * r1[lx.i0] + lx.w1 * r1[lx.i1];
                    drow[xw] = static_cast<T>((1.0 - ly.w1) * top + ly.w1 * bot);
                }
            }
        }
    const bool rg = x.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([x, out, ys, xs_idx]() {
            const Shape4 xs2 = x.shape();
            const Shape4 os = out.shape();
            for (int b = 0; b < xs2.b; ++b)
                for (int c = 0; c < xs2.c; ++c) {
                    T* gx = x.grad().data() + idx4(xs2, b, c, 0, 0);
                    const T* go = out.grad().data() + idx4(os, b, c, 0, 0);
                    for (int y = 0; y < os.h; ++y) {
                        const auto& ly = ys[y];
                        for (int xw = 0; xw < os.w; ++xw) {
                            const auto& lx = xs_idx[xw];
                            const double g = go[static_cast<long>(y) * os.w + xw];
                            gx[static_cast<long>(ly.i0) * xs2.w + lx.i0] +=
                                static_cast<T>((1.0 - ly.w1) * (1.0 - lx.w1) * g);
                            gx[static_cast<long>(ly.i0) * xs2.w + lx.i1] +=
                                static_cast<T>((1.0 - ly.w1) * lx.w1 * g);
                            gx[static_cast<long>(ly.i1) * xs2.w + lx.i0] +=
                                static_cast<T>(ly.w1 * (1.0 - lx.w1) * g);
                            gx[static_cast<long>(ly.i1) * xs2.w + lx.i1] +=
                                static_cast<T>(ly.w1 * lx.w1 * g);
                        }
                    }
                }
        });
    }
    return out;
}

template <class T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& x) {
    const Shape4 xs = x.shape();
    Tensor<T> out = Tensor<T>::zeros({xs.b, xs.c, 1, 1});
    const long plane = static_cast<long>(xs.h) * xs.w;
    for (int b = 0; b < xs.b; ++b)
        for (int c = 0; c < xs.c; ++c) {
            const T* src = x.data().data() + idx4(xs, b, c, 0, 0);
            double s = 0;
            for (long i = 0; i < plane; ++i) s += src[i];
            out.at(b, c, 0, 0) = static_cast<T>(s / plane);
        }
    const bool rg = x.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([x, out]() {
            const Shape4 xs2 = x.shape();
            const long plane2 = static_cast<long>(xs2.h) * xs2.w;
            const T inv = static_cast<T>(1.0 / plane2);
            for (int b = 0; b < xs2.b; ++b)
                for (int c = 0; c < xs2.c; ++c) {
                    const T g = out.grad()[idx4(out.shape(), b, c, 0, 0)] * inv;
                    T* gx = x.grad().data() + idx4(xs2, b, c, 0, 0);
                    for (long i = 0; i < plane2; ++i) gx[i] += g;
                }
        });
    }
    return out;
}

// Adaptive average pool to a gh x gw grid (bin i covers
// [floor(i*n/g), ceil((i+1)*n/g)) like the usual framework convention).
template <class T>
Tensor<T> adaptive_avg_pool(Tape<T>& tape, const Tensor<T>& x, int gh, int gw) {
    const Shape4 xs = x.shape();
    CSEG_CHECK(gh >= 1 && gw >= 1 && gh <= xs.h && gw <= xs.w,
               "adaptive_avg_pool: grid ", gh, "x", gw, " invalid for ", xs.str());
    Tensor<T> out = Tensor<T>::zeros({xs.b, xs.c, gh, gw});
    auto bin = [](int i, int n, int g) {
        const int lo = (i * n) / g;
        const int hi = ((i + 1) * n + g - 1) / g;
        return std::pair<int, int>(lo, hi);
    };
    for (int b = 0; b < xs.b; ++b)
        for (int c = 0; c < xs.c; ++c)
            for (int oy = 0; oy < gh; ++oy) {
                auto [y0, y1] = bin(oy, xs.h, gh);
                for (int ox = 0; ox < gw; ++ox) {
                    auto [x0, x1] = bin(ox, xs.w, gw);
                    double s = 0;
                    for (int y = y0; y < y1; ++y)
                        for (int xw = x0; xw < x1; ++xw) s += x.at(b, c, y, xw);
                    out.at(b, c, oy, ox) =
                        static_cast<T>(s / (static_cast<double>(y1 - y0) * (x1 - x0)));
                }
            }
    const bool rg = x.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([x, out, gh, gw]() {
            const Shape4 xs2 = x.shape();
            auto bin = [](int i, int n, int g) {
                const int lo = (i * n) / g;
                const int hi = ((i + 1) * n + g - 1) / g;
                return std::pair<int, int>(lo, hi);
            };
            for (int b = 0; b < xs2.b; ++b)
                for (int c = 0; c < xs2.c; ++c)
                    for (int oy = 0; oy < gh; ++oy) {
                        auto [y0, y1] = bin(oy, xs2.h, gh);
                        for (int ox = 0; ox < gw; ++ox) {
                            auto [x0, x1] = bin(ox, xs2.w, gw);
                            const T g = out.grad()[idx4(out.shape(), b, c, oy, ox)] /
                                        static_cast<T>(static_cast<double>(y1 - y0) * (x1 - x0));
                            for (int y = y0; y < y1; ++y)
                                for (int xw = x0; xw < x1; ++xw)
                                    x.grad()[idx4(xs2, b, c, y, xw)] += g;
                        }
                    }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and loss kernels.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reduce_sum_all(Tape<T>& tape, const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros({1, 1, 1, 1});
    double s = 0;
    for (T v : x.data()) s += v;
    out.data()[0] = static_cast<T>(s);
    const bool rg = x.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([x, out]() {
            const T g = out.grad()[0];
            for (auto& gv : x.grad()) gv += g;
        });
    }
    return out;
}

template <class T>
Tensor<T> reduce_mean_all(Tape<T>& tape, const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros({1, 1, 1, 1});
    double s = 0;
    for (T v : x.data()) s += v;
    out.data()[0] = static_cast<T>(s / x.numel());
    const bool rg = x.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([x, out]() {
            const T g = out.grad()[0] / static_cast<T>(x.numel());
            for (auto& gv : x.grad()) gv += g;
        });
    }
    return out;
}

// Token Gram matrix: tokens [B,L,D,1] -> [B,L,L,1], G = scale * X X^T per item.
template <class T>
Tensor<T> gram(Tape<T>& tape, const Tensor<T>& tokens, T scale) {
    const Shape4 ts = tokens.shape();
    CSEG_CHECK(ts.w == 1, "gram: expected token tensor [B,L,D,1], got ", ts.str());
    const int l = ts.c, d = ts.h;
    Tensor<T> out = Tensor<T>::zeros({ts.b, l, l, 1});
    for (int b = 0; b < ts.b; ++b) {
        const T* xv = tokens.data().data() + static_cast<long>(b) * l * d;
        T* g = out.data().data() + static_cast<long>(b) * l * l;
        gemm(false, true, l, l, d, scale, xv, d, xv, d, T(0), g, l);
    }
    const bool rg = tokens.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([tokens, out, scale, l, d]() {
            const Shape4 ts2 = tokens.shape();
            std::vector<T> sym(static_cast<size_t>(l) * l);
            for (int b = 0; b < ts2.b; ++b) {
                const T* gg = out.grad().data() + static_cast<long>(b) * l * l;
                for (int i = 0; i < l; ++i)
                    for (int j = 0; j < l; ++j)
                        sym[static_cast<long>(i) * l + j] =
                            gg[static_cast<long>(i) * l + j] + gg[static_cast<long>(j) * l + i];
                gemm(false, false, l, d, l, scale, sym.data(), l,
                     tokens.data().data() + static_cast<long>(b) * l * d, d, T(1),
                     tokens.grad().data() + static_cast<long>(b) * l * d, d);
            }
        });
    }
    return out;
}

// Per-item cosine similarity of pooled context vectors [B,D,1,1] -> [B,1,1,1].
// Denominator guarded as max(|a||b|, eps): exact cosine away from zero
// norms, finite at them. In the guarded region the denominator is treated
// as constant for the gradient.
template <class T>
Tensor<T> cosine_per_item(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b,
                          T eps = T(1e-8)) {
    const Shape4 as = a.shape();
    CSEG_CHECK(as == b.shape() && as.h == 1 && as.w == 1,
               "cosine_per_item: expected matching [B,D,1,1], got ", as.str(), " vs ",
               b.shape().str());
    const int d = as.c;
    Tensor<T> out = Tensor<T>::zeros({as.b, 1, 1, 1});
    for (int bi = 0; bi < as.b; ++bi) {
        const T* av = a.data().data() + static_cast<long>(bi) * d;
        const T* bv = b.data().data() + static_cast<long>(bi) * d;
        double dot = 0, na = 0, nb = 0;
        for (int i = 0; i < d; ++i) {
            dot += static_cast<double>(av[i]) * bv[i];
            na += static_cast<double>(av[i]) * av[i];
            nb += static_cast<double>(bv[i]) * bv[i];
        }
        const double p = std::max(std::sqrt(na) * std::sqrt(nb), static_cast<double>(eps));
        out.data()[bi] = static_cast<T>(dot / p);
    }
    const bool rg = a.requires_grad() || b.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([a, b, out, eps, d]() {
            const Shape4 as2 = a.shape();
            for (int bi = 0; bi < as2.b; ++bi) {
                const T* av = a.data().data() + static_cast<long>(bi) * d;
                const T* bv = b.data().data() + static_cast<long>(bi) * d;
                double dot = 0, na2 = 0, nb2 = 0;
                for (int i = 0; i < d; ++i) {
                    dot += static_cast<double>(av[i]) * bv[i];
                    na2 += static_cast<double>(av[i]) * av[i];
                    nb2 += static_cast<double>(bv[i]) * bv[i];
                }
                const double na = std::sqrt(na2), nb = std::sqrt(nb2);
                const bool guarded = na * nb <= static_cast<double>(eps);
                const double p = std::max(na * nb, static_cast<double>(eps));
                const double y = dot / p;
                const double g = out.grad()[bi];
                if (a.requires_grad()) {
                    T* ga = a.grad().data() + static_cast<long>(bi) * d;
                    for (int i = 0; i < d; ++i) {
                        const double norm_term =
                            guarded ? 0.0 : y * nb * av[i] / (na * p);
                        ga[i] += static_cast<T>(g * (bv[i] / p - norm_term));
                    }
                }
                if (b.requires_grad()) {
                    T* gb = b.grad().data() + static_cast<long>(bi) * d;
                    for (int i = 0; i < d; ++i) {
                        const double norm_term =
                            guarded ? 0.0 : y * na * bv[i] / (nb * p);
                        gb[i] += static_cast<T>(g * (av[i] / p - norm_term));
                    }
                }
            }
        });
    }
    return out;
}

// Mean absolute deviation from identity of a square map [B,L,L,1] -> [B,1,1,1].
template <class T>
Tensor<T> abs_mean_minus_identity(Tape<T>& tape, const Tensor<T>& a) {
    const Shape4 as = a.shape();
    CSEG_CHECK(as.c == as.h && as.w == 1, "abs_mean_minus_identity: expected square [B,L,L,1], got ",
               as.str());
    const int l = as.c;
    Tensor<T> out = Tensor<T>::zeros({as.b, 1, 1, 1});
    const double inv = 1.0 / (static_cast<double>(l) * l);
    for (int b = 0; b < as.b; ++b) {
        const T* av = a.data().data() + static_cast<long>(b) * l * l;
        double s = 0;
        for (int i = 0; i < l; ++i)
            for (int j = 0; j < l; ++j)
                s += std::abs(static_cast<double>(av[static_cast<long>(i) * l + j]) -
                              (i == j ? 1.0 : 0.0));
        out.data()[b] = static_cast<T>(s * inv);
    }
    const bool rg = a.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([a, out, l, inv]() {
            for (int b = 0; b < a.shape().b; ++b) {
                const T g = out.grad()[b];
                const T* av = a.data().data() + static_cast<long>(b) * l * l;
                T* ga = a.grad().data() + static_cast<long>(b) * l * l;
                for (int i = 0; i < l; ++i)
                    for (int j = 0; j < l; ++j) {
                        const double diff = static_cast<double>(av[static_cast<long>(i) * l + j]) -
                                            (i == j ? 1.0 : 0.0);
                        const double sgn = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
                        ga[static_cast<long>(i) * l + j] += static_cast<T>(g * sgn * inv);
                    }
            }
        });
    }
    return out;
}

// Binary cross-entropy of probabilities against a constant 0/1 target,
// averaged over every element. Probabilities are clamped to
// [clamp, 1-clamp] inside; the clamped region contributes zero gradient.
template <class T>
Tensor<T> bce_with_target(Tape<T>& tape, const Tensor<T>& probs, const Tensor<T>& target,
                          T clamp = T(1e-7)) {
    CSEG_CHECK(probs.shape() == target.shape(), "bce: shape mismatch ", probs.shape().str(),
               " vs ", target.shape().str());
    const long n = probs.numel();
    Tensor<T> out = Tensor<T>::zeros({1, 1, 1, 1});
    const double lo = static_cast<double>(clamp), hi = 1.0 - static_cast<double>(clamp);
    double s = 0;
    for (long i = 0; i < n; ++i) {
        const double p = std::min(hi, std::max(lo, static_cast<double>(probs.data()[i])));
        const double t = target.data()[i];
        s += t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    }
    out.data()[0] = static_cast<T>(-s / n);
    const bool rg = probs.requires_grad();
    tape.own(out, rg);
    if (rg) {
        tape.record([probs, target, out, lo, hi, n]() {
            const T g = out.grad()[0];
            for (long i = 0; i < n; ++i) {
                const double praw = probs.data()[i];
                if (praw < lo || praw > hi) continue;  // clamped: zero gradient
                const double t = target.data()[i];
                probs.grad()[i] +=
                    static_cast<T>(g * (-(t / praw - (1.0 - t) / (1.0 - praw)) / n));
            }
        });
    }
    return out;
}

// Detached 0/1 target from thresholding probabilities at `thresh` (>= rule).
template <class T>
Tensor<T> threshold_ge(const Tensor<T>& probs, T thresh) {
    Tensor<T> out = Tensor<T>::zeros(probs.shape());
    const long n = probs.numel();
    for (long i = 0; i < n; ++i) out.data()[i] = probs.data()[i] >= thresh ? T(1) : T(0);
    return out;
}

}  // namespace cseg
