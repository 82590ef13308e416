#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "pdiff/tensor.hpp"

namespace pdiff::ops {

namespace detail {

using pdiff::detail::grad_of;
using pdiff::detail::shape_error;

inline bool want_grad(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape.recording()) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

}  // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        detail::shape_error("add", "shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor out(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape.record("add", oi, [ai, bi, oi] {
            const auto& g = oi->grad;
            if (ai->requires_grad) {
                auto& ga = detail::grad_of(ai);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::grad_of(bi);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        detail::shape_error("mul", "shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor out(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape.record("mul", oi, [ai, bi, oi] {
            const auto& g = oi->grad;
            if (ai->requires_grad) {
                auto& ga = detail::grad_of(ai);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->values[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::grad_of(bi);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->values[i];
            }
        });
    }
    return out;
}

inline Tensor relu(Tape& tape, const Tensor& x) {
    Tensor out(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape.record("relu", oi, [xi, oi] {
            auto& gx = detail::grad_of(xi);
            const auto& g = oi->grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (xi->values[i] > 0.0) gx[i] += g[i];
            }
        });
    }
    return out;
}

/// y = x W^T + b with x [N,in], W [out,in], b [out].
inline Tensor dense(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1) {
        detail::shape_error("dense", "expected ranks 2/2/1, got " + shape_str(x.shape()) + " " +
                                         shape_str(w.shape()) + " " + shape_str(b.shape()));
    }
    const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
    if (w.dim(1) != in) {
        detail::shape_error("dense", "input features " + std::to_string(in) + " vs weight " +
                                         shape_str(w.shape()));
    }
    if (b.dim(0) != out_dim) {
        detail::shape_error("dense", "bias " + shape_str(b.shape()) + " vs weight " + shape_str(w.shape()));
    }
    Tensor out({batch, out_dim});
    for (std::size_t n = 0; n < batch; ++n) {
        const double* xr = x.data() + n * in;
        double* yr = out.data() + n * out_dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
            const double* wr = w.data() + o * in;
            double acc = b.data()[o];
            for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
            yr[o] = acc;
        }
    }
    if (detail::want_grad(tape, {&x, &w, &b})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
        tape.record("dense", oi, [xi, wi, bi, oi, batch, in, out_dim] {
            const auto& g = oi->grad;
            const bool rx = xi->requires_grad, rw = wi->requires_grad, rb = bi->requires_grad;
            double* gx = rx ? detail::grad_of(xi).data() : nullptr;
            double* gw = rw ? detail::grad_of(wi).data() : nullptr;
            double* gb = rb ? detail::grad_of(bi).data() : nullptr;
            for (std::size_t n = 0; n < batch; ++n) {
                const double* gr = g.data() + n * out_dim;
                const double* xr = xi->values.data() + n * in;
                for (std::size_t o = 0; o < out_dim; ++o) {
                    const double gv = gr[o];
                    if (gv == 0.0) continue;
                    const double* wr = wi->values.data() + o * in;
                    if (rx) {
                        double* gxr = gx + n * in;
                        for (std::size_t i = 0; i < in; ++i) gxr[i] += gv * wr[i];
                    }
                    if (rw) {
                        double* gwr = gw + o * in;
                        for (std::size_t i = 0; i < in; ++i) gwr[i] += gv * xr[i];
                    }
                    if (rb) gb[o] += gv;
                }
            }
        });
    }
    return out;
}

/// x [N,Ci,L], w [Co,Ci,K], b [Co]; explicit zero padding.
inline Tensor conv1d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b,
                     std::size_t stride, std::size_t pad) {
    if (x.rank() != 3 || w.rank() != 3 || b.rank() != 1) {
        detail::shape_error("conv1d", "expected ranks 3/3/1, got " + shape_str(x.shape()) + " " +
                                          shape_str(w.shape()) + " " + shape_str(b.shape()));
    }
    if (stride == 0) detail::shape_error("conv1d", "stride must be positive");
    const std::size_t batch = x.dim(0), ci = x.dim(1), len = x.dim(2);
    const std::size_t co = w.dim(0), k = w.dim(2);
    if (w.dim(1) != ci) {
        detail::shape_error("conv1d", "input channels " + std::to_string(ci) + " vs weight " +
                                          shape_str(w.shape()));
    }
    if (b.dim(0) != co) detail::shape_error("conv1d", "bias " + shape_str(b.shape()));
    if (len + 2 * pad < k) {
        detail::shape_error("conv1d", "kernel " + std::to_string(k) + " longer than padded input " +
                                          std::to_string(len + 2 * pad));
    }
    const std::size_t lout = (len + 2 * pad - k) / stride + 1;

    Tensor out({batch, co, lout});
    const auto sp = static_cast<std::ptrdiff_t>(pad);
    const auto ss = static_cast<std::ptrdiff_t>(stride);
    const auto sl = static_cast<std::ptrdiff_t>(len);
    const auto slout = static_cast<std::ptrdiff_t>(lout);
    for (std::size_t n = 0; n < batch; ++n) {
        const double* xb = x.data() + n * ci * len;
        double* ob = out.data() + n * co * lout;
        for (std::size_t c = 0; c < co; ++c) {
            double* orow = ob + c * lout;
            const double bias = b.data()[c];
            for (std::size_t l = 0; l < lout; ++l) orow[l] = bias;
            for (std::size_t ic = 0; ic < ci; ++ic) {
                const double* xrow = xb + ic * len;
                const double* wrow = w.data() + (c * ci + ic) * k;
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const double wv = wrow[kk];
                    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kk) - sp;
                    std::ptrdiff_t lo = off < 0 ? (-off + ss - 1) / ss : 0;
                    const std::ptrdiff_t hi_num = sl - 1 - off;
                    if (hi_num < 0) continue;
                    const std::ptrdiff_t hi = std::min(slout - 1, hi_num / ss);
                    for (std::ptrdiff_t l = lo; l <= hi; ++l) orow[l] += wv * xrow[l * ss + off];
                }
            }
        }
    }

    if (detail::want_grad(tape, {&x, &w, &b})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
        tape.record("conv1d", oi, [xi, wi, bi, oi, batch, ci, co, len, k, lout, ss, sp, sl, slout] {
            const double* g = oi->grad.data();
            const bool rx = xi->requires_grad, rw = wi->requires_grad, rb = bi->requires_grad;
            double* gx = rx ? detail::grad_of(xi).data() : nullptr;
            double* gw = rw ? detail::grad_of(wi).data() : nullptr;
            double* gb = rb ? detail::grad_of(bi).data() : nullptr;
            for (std::size_t n = 0; n < batch; ++n) {
                const double* xb = xi->values.data() + n * ci * len;
                const double* gbatch = g + n * co * lout;
                for (std::size_t c = 0; c < co; ++c) {
                    const double* grow = gbatch + c * lout;
                    if (rb) {
                        double acc = 0.0;
                        for (std::size_t l = 0; l < lout; ++l) acc += grow[l];
                        gb[c] += acc;
                    }
                    for (std::size_t ic = 0; ic < ci; ++ic) {
                        const double* xrow = xb + ic * len;
                        double* gxrow = rx ? gx + (n * ci + ic) * len : nullptr;
                        const double* wrow = wi->values.data() + (c * ci + ic) * k;
                        double* gwrow = rw ? gw + (c * ci + ic) * k : nullptr;
                        for (std::size_t kk = 0; kk < k; ++kk) {
                            const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kk) - sp;
                            std::ptrdiff_t lo = off < 0 ? (-off + ss - 1) / ss : 0;
                            const std::ptrdiff_t hi_num = sl - 1 - off;
                            if (hi_num < 0) continue;
                            const std::ptrdiff_t hi = std::min(slout - 1, hi_num / ss);
                            const double wv = wrow[kk];
                            double wacc = 0.0;
                            for (std::ptrdiff_t l = lo; l <= hi; ++l) {
                                const double gv = grow[l];
                                if (rx) gxrow[l * ss + off] += wv * gv;
                                wacc += xrow[l * ss + off] * gv;
                            }
                            if (rw) gwrow[kk] += wacc;
                        }
                    }
                }
            }
        });
    }
    return out;
}

/// Transposed 1-D convolution. x [N,Ci,L], w [Ci,Co,K], b [Co];
/// Lout = (L-1)*stride + K - 2*pad + out_pad.
inline Tensor conv1d_transpose(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b,
                               std::size_t stride, std::size_t pad, std::size_t out_pad = 0) {
    if (x.rank() != 3 || w.rank() != 3 || b.rank() != 1) {
        detail::shape_error("conv1d_transpose", "expected ranks 3/3/1, got " + shape_str(x.shape()) +
                                                    " " + shape_str(w.shape()) + " " +
                                                    shape_str(b.shape()));
    }
    if (stride == 0) detail::shape_error("conv1d_transpose", "stride must be positive");
    if (out_pad >= stride) {
        detail::shape_error("conv1d_transpose", "output padding " + std::to_string(out_pad) +
                                                    " must be smaller than stride " +
                                                    std::to_string(stride));
    }
    const std::size_t batch = x.dim(0), ci = x.dim(1), len = x.dim(2);
    const std::size_t co = w.dim(1), k = w.dim(2);
    if (w.dim(0) != ci) {
        detail::shape_error("conv1d_transpose", "input channels " + std::to_string(ci) +
                                                    " vs weight " + shape_str(w.shape()));
    }
    if (b.dim(0) != co) detail::shape_error("conv1d_transpose", "bias " + shape_str(b.shape()));
    const std::ptrdiff_t lout_s = static_cast<std::ptrdiff_t>((len - 1) * stride + k + out_pad) -
                                  2 * static_cast<std::ptrdiff_t>(pad);
    if (lout_s < 1) detail::shape_error("conv1d_transpose", "empty output for input length " + std::to_string(len));
    const std::size_t lout = static_cast<std::size_t>(lout_s);

    Tensor out({batch, co, lout});
    const auto sp = static_cast<std::ptrdiff_t>(pad);
    const auto ss = static_cast<std::ptrdiff_t>(stride);
    for (std::size_t n = 0; n < batch; ++n) {
        double* ob = out.data() + n * co * lout;
        for (std::size_t c = 0; c < co; ++c) {
            const double bias = b.data()[c];
            double* orow = ob + c * lout;
            for (std::size_t l = 0; l < lout; ++l) orow[l] = bias;
        }
        for (std::size_t ic = 0; ic < ci; ++ic) {
            const double* xrow = x.data() + (n * ci + ic) * len;
            for (std::size_t c = 0; c < co; ++c) {
                double* orow = ob + c * lout;
                const double* wrow = w.data() + (ic * co + c) * k;
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const double wv = wrow[kk];
                    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kk) - sp;
                    for (std::size_t i = 0; i < len; ++i) {
                        const std::ptrdiff_t lo = static_cast<std::ptrdiff_t>(i) * ss + off;
                        if (lo < 0 || lo >= lout_s) continue;
                        orow[lo] += wv * xrow[i];
                    }
                }
            }
        }
    }

    if (detail::want_grad(tape, {&x, &w, &b})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
        tape.record("conv1d_transpose", oi, [xi, wi, bi, oi, batch, ci, co, len, k, lout, ss, sp, lout_s] {
            const double* g = oi->grad.data();
            const bool rx = xi->requires_grad, rw = wi->requires_grad, rb = bi->requires_grad;
            double* gx = rx ? detail::grad_of(xi).data() : nullptr;
            double* gw = rw ? detail::grad_of(wi).data() : nullptr;
            double* gb = rb ? detail::grad_of(bi).data() : nullptr;
            for (std::size_t n = 0; n < batch; ++n) {
                const double* gbatch = g + n * co * lout;
                if (rb) {
                    for (std::size_t c = 0; c < co; ++c) {
                        const double* grow = gbatch + c * lout;
                        double acc = 0.0;
                        for (std::size_t l = 0; l < lout; ++l) acc += grow[l];
                        gb[c] += acc;
                    }
                }
                for (std::size_t ic = 0; ic < ci; ++ic) {
                    const double* xrow = xi->values.data() + (n * ci + ic) * len;
                    double* gxrow = rx ? gx + (n * ci + ic) * len : nullptr;
                    for (std::size_t c = 0; c < co; ++c) {
                        const double* grow = gbatch + c * lout;
                        const double* wrow = wi->values.data() + (ic * co + c) * k;
                        double* gwrow = rw ? gw + (ic * co + c) * k : nullptr;
                        for (std::size_t kk = 0; kk < k; ++kk) {
                            const double wv = wrow[kk];
                            const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kk) - sp;
                            double wacc = 0.0;
                            for (std::size_t i = 0; i < len; ++i) {
                                const std::ptrdiff_t lo = static_cast<std::ptrdiff_t>(i) * ss + off;
                                if (lo < 0 || lo >= lout_s) continue;
                                const double gv = grow[lo];
                                if (rx) gxrow[i] += wv * gv;
                                wacc += xrow[i] * gv;
                            }
                            if (rw) gwrow[kk] += wacc;
                        }
                    }
                }
            }
        });
    }
    return out;
}

/// x [N,Ci,H,W], w [Co,Ci,Kh,Kw], b [Co]; square stride/padding.
inline Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b,
                     std::size_t stride, std::size_t pad) {
    if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1) {
        detail::shape_error("conv2d", "expected ranks 4/4/1, got " + shape_str(x.shape()) + " " +
                                          shape_str(w.shape()) + " " + shape_str(b.shape()));
    }
    if (stride == 0) detail::shape_error("conv2d", "stride must be positive");
    const std::size_t batch = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != ci) {
        detail::shape_error("conv2d", "input channels " + std::to_string(ci) + " vs weight " +
                                          shape_str(w.shape()));
    }
    if (b.dim(0) != co) detail::shape_error("conv2d", "bias " + shape_str(b.shape()));
    if (h + 2 * pad < kh || wd + 2 * pad < kw) {
        detail::shape_error("conv2d", "kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                          " larger than padded input");
    }
    const std::size_t hout = (h + 2 * pad - kh) / stride + 1;
    const std::size_t wout = (wd + 2 * pad - kw) / stride + 1;

    Tensor out({batch, co, hout, wout});
    const auto sp = static_cast<std::ptrdiff_t>(pad);
    const auto ss = static_cast<std::ptrdiff_t>(stride);
    const auto sh = static_cast<std::ptrdiff_t>(h), sw = static_cast<std::ptrdiff_t>(wd);
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t c = 0; c < co; ++c) {
            double* oplane = out.data() + (n * co + c) * hout * wout;
            const double bias = b.data()[c];
            for (std::size_t i = 0; i < hout * wout; ++i) oplane[i] = bias;
            for (std::size_t ic = 0; ic < ci; ++ic) {
                const double* xplane = x.data() + (n * ci + ic) * h * wd;
                const double* wplane = w.data() + (c * ci + ic) * kh * kw;
                for (std::size_t oy = 0; oy < hout; ++oy) {
                    const std::ptrdiff_t iy0 = static_cast<std::ptrdiff_t>(oy) * ss - sp;
                    for (std::size_t ox = 0; ox < wout; ++ox) {
                        const std::ptrdiff_t ix0 = static_cast<std::ptrdiff_t>(ox) * ss - sp;
                        double acc = 0.0;
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                            const std::ptrdiff_t iy = iy0 + static_cast<std::ptrdiff_t>(ky);
                            if (iy < 0 || iy >= sh) continue;
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const std::ptrdiff_t ix = ix0 + static_cast<std::ptrdiff_t>(kx);
                                if (ix < 0 || ix >= sw) continue;
                                acc += wplane[ky * kw + kx] * xplane[iy * sw + ix];
                            }
                        }
                        oplane[oy * wout + ox] += acc;
                    }
                }
            }
        }
    }

    if (detail::want_grad(tape, {&x, &w, &b})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
        tape.record("conv2d", oi,
                    [xi, wi, bi, oi, batch, ci, co, h, wd, kh, kw, hout, wout, ss, sp, sh, sw] {
            const double* g = oi->grad.data();
            const bool rx = xi->requires_grad, rw = wi->requires_grad, rb = bi->requires_grad;
            double* gx = rx ? detail::grad_of(xi).data() : nullptr;
            double* gw = rw ? detail::grad_of(wi).data() : nullptr;
            double* gb = rb ? detail::grad_of(bi).data() : nullptr;
            for (std::size_t n = 0; n < batch; ++n) {
                for (std::size_t c = 0; c < co; ++c) {
                    const double* gplane = g + (n * co + c) * hout * wout;
                    if (rb) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < hout * wout; ++i) acc += gplane[i];
                        gb[c] += acc;
                    }
                    for (std::size_t ic = 0; ic < ci; ++ic) {
                        const double* xplane = xi->values.data() + (n * ci + ic) * h * wd;
                        double* gxplane = rx ? gx + (n * ci + ic) * h * wd : nullptr;
                        const double* wplane = wi->values.data() + (c * ci + ic) * kh * kw;
                        double* gwplane = rw ? gw + (c * ci + ic) * kh * kw : nullptr;
                        for (std::size_t oy = 0; oy < hout; ++oy) {
                            const std::ptrdiff_t iy0 = static_cast<std::ptrdiff_t>(oy) * ss - sp;
                            for (std::size_t ox = 0; ox < wout; ++ox) {
                                const std::ptrdiff_t ix0 = static_cast<std::ptrdiff_t>(ox) * ss - sp;
                                const double gv = gplane[oy * wout + ox];
                                if (gv == 0.0) continue;
                                for (std::size_t ky = 0; ky < kh; ++ky) {
                                    const std::ptrdiff_t iy = iy0 + static_cast<std::ptrdiff_t>(ky);
                                    if (iy < 0 || iy >= sh) continue;
                                    for (std::size_t kx = 0; kx < kw; ++kx) {
                                        const std::ptrdiff_t ix = ix0 + static_cast<std::ptrdiff_t>(kx);
                                        if (ix < 0 || ix >= sw) continue;
                                        if (rx) gxplane[iy * sw + ix] += wplane[ky * kw + kx] * gv;
                                        if (rw) gwplane[ky * kw + kx] += xplane[iy * sw + ix] * gv;
                                    }
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

/// Batch normalization over the channel axis (dim 1); reduces over every other
/// axis. Training mode normalizes by batch statistics and updates the running
/// buffers in place; eval mode is a per-channel affine map by running stats.
inline Tensor batch_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         Tensor& running_mean, Tensor& running_var, bool training,
                         double momentum = 0.1, double eps = 1e-5) {
    if (x.rank() < 2) detail::shape_error("batch_norm", "input rank must be >= 2, got " + shape_str(x.shape()));
    const std::size_t batch = x.dim(0), ch = x.dim(1);
    std::size_t inner = 1;
    for (std::size_t i = 2; i < x.rank(); ++i) inner *= x.dim(i);
    if (gamma.size() != ch || beta.size() != ch || running_mean.size() != ch || running_var.size() != ch) {
        detail::shape_error("batch_norm", "per-channel parameters must have " + std::to_string(ch) +
                                              " entries");
    }
    const std::size_t m = batch * inner;
    if (training && m < 2) detail::shape_error("batch_norm", "training mode needs at least 2 samples per channel");

    Tensor out(x.shape());
    std::vector<double> mean(ch), inv_std(ch);
    if (training) {
        for (std::size_t c = 0; c < ch; ++c) {
            double acc = 0.0;
            for (std::size_t n = 0; n < batch; ++n) {
                const double* xr = x.data() + (n * ch + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) acc += xr[i];
            }
            const double mu = acc / static_cast<double>(m);
            double var = 0.0;
            for (std::size_t n = 0; n < batch; ++n) {
                const double* xr = x.data() + (n * ch + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) {
                    const double d = xr[i] - mu;
                    var += d * d;
                }
            }
            var /= static_cast<double>(m);
            mean[c] = mu;
            inv_std[c] = 1.0 / std::sqrt(var + eps);
            // running variance tracks the unbiased estimate
            const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
            running_mean.data()[c] = (1.0 - momentum) * running_mean.data()[c] + momentum * mu;
            running_var.data()[c] = (1.0 - momentum) * running_var.data()[c] + momentum * unbiased;
        }
    } else {
        for (std::size_t c = 0; c < ch; ++c) {
            mean[c] = running_mean.data()[c];
            inv_std[c] = 1.0 / std::sqrt(running_var.data()[c] + eps);
        }
    }
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t c = 0; c < ch; ++c) {
            const double* xr = x.data() + (n * ch + c) * inner;
            double* yr = out.data() + (n * ch + c) * inner;
            const double g = gamma.data()[c], bt = beta.data()[c], mu = mean[c], is = inv_std[c];
            for (std::size_t i = 0; i < inner; ++i) yr[i] = g * (xr[i] - mu) * is + bt;
        }
    }

    if (detail::want_grad(tape, {&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
        tape.record("batch_norm", oi,
                    [xi, gi, bi, oi, batch, ch, inner, m, mean, inv_std, training] {
            const double* g = oi->grad.data();
            const bool rx = xi->requires_grad, rg = gi->requires_grad, rb = bi->requires_grad;
            double* gx = rx ? detail::grad_of(xi).data() : nullptr;
            double* gg = rg ? detail::grad_of(gi).data() : nullptr;
            double* gb = rb ? detail::grad_of(bi).data() : nullptr;
            for (std::size_t c = 0; c < ch; ++c) {
                const double mu = mean[c], is = inv_std[c], gamma_c = gi->values[c];
                double sum_g = 0.0, sum_gxh = 0.0;
                for (std::size_t n = 0; n < batch; ++n) {
                    const double* xr = xi->values.data() + (n * ch + c) * inner;
                    const double* gr = g + (n * ch + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) {
                        sum_g += gr[i];
                        sum_gxh += gr[i] * (xr[i] - mu) * is;
                    }
                }
                if (rg) gg[c] += sum_gxh;
                if (rb) gb[c] += sum_g;
                if (!rx) continue;
                if (training) {
                    const double inv_m = 1.0 / static_cast<double>(m);
                    for (std::size_t n = 0; n < batch; ++n) {
                        const double* xr = xi->values.data() + (n * ch + c) * inner;
                        const double* gr = g + (n * ch + c) * inner;
                        double* gxr = gx + (n * ch + c) * inner;
                        for (std::size_t i = 0; i < inner; ++i) {
                            const double xh = (xr[i] - mu) * is;
                            gxr[i] += gamma_c * is * (gr[i] - inv_m * sum_g - xh * inv_m * sum_gxh);
                        }
                    }
                } else {
                    for (std::size_t n = 0; n < batch; ++n) {
                        const double* gr = g + (n * ch + c) * inner;
                        double* gxr = gx + (n * ch + c) * inner;
                        for (std::size_t i = 0; i < inner; ++i) gxr[i] += gamma_c * is * gr[i];
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        detail::shape_error("reshape", shape_str(x.shape()) + " to " + shape_str(shape));
    }
    Tensor out(std::move(shape), x.values());
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape.record("reshape", oi, [xi, oi] {
            auto& gx = detail::grad_of(xi);
            const auto& g = oi->grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

/// Crop along the last axis: keeps [offset, offset+len).
inline Tensor slice_last(Tape& tape, const Tensor& x, std::size_t offset, std::size_t len) {
    if (x.rank() == 0) detail::shape_error("slice_last", "scalar input");
    const std::size_t last = x.shape().back();
    if (offset + len > last) {
        detail::shape_error("slice_last", "range [" + std::to_string(offset) + "," +
                                              std::to_string(offset + len) + ") exceeds axis of " +
                                              std::to_string(last));
    }
    Shape oshape = x.shape();
    oshape.back() = len;
    const std::size_t rows = x.size() / last;
    Tensor out(oshape);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = x.data() + r * last + offset;
        double* dst = out.data() + r * len;
        for (std::size_t i = 0; i < len; ++i) dst[i] = src[i];
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape.record("slice_last", oi, [xi, oi, rows, last, offset, len] {
            auto& gx = detail::grad_of(xi);
            const auto& g = oi->grad;
            for (std::size_t r = 0; r < rows; ++r) {
                double* dst = gx.data() + r * last + offset;
                const double* src = g.data() + r * len;
                for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

/// x [N,C,L] plus y [N,C] broadcast along the last axis.
inline Tensor add_channelwise(Tape& tape, const Tensor& x, const Tensor& y) {
    if (x.rank() != 3 || y.rank() != 2 || x.dim(0) != y.dim(0) || x.dim(1) != y.dim(1)) {
        detail::shape_error("add_channelwise",
                            shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    }
    const std::size_t batch = x.dim(0), ch = x.dim(1), len = x.dim(2);
    Tensor out(x.shape());
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t c = 0; c < ch; ++c) {
            const double add_v = y.data()[n * ch + c];
            const double* xr = x.data() + (n * ch + c) * len;
            double* yr = out.data() + (n * ch + c) * len;
            for (std::size_t i = 0; i < len; ++i) yr[i] = xr[i] + add_v;
        }
    }
    if (detail::want_grad(tape, {&x, &y})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), yi = y.impl(), oi = out.impl();
        tape.record("add_channelwise", oi, [xi, yi, oi, batch, ch, len] {
            const auto& g = oi->grad;
            if (xi->requires_grad) {
                auto& gx = detail::grad_of(xi);
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (yi->requires_grad) {
                auto& gy = detail::grad_of(yi);
                for (std::size_t n = 0; n < batch; ++n) {
                    for (std::size_t c = 0; c < ch; ++c) {
                        const double* gr = g.data() + (n * ch + c) * len;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < len; ++i) acc += gr[i];
                        gy[n * ch + c] += acc;
                    }
                }
            }
        });
    }
    return out;
}

/// Mean softmax cross-entropy over rows of logits [N,C] against integer labels.
inline Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) {
        detail::shape_error("softmax_cross_entropy", "logits must be [N,C], got " + shape_str(logits.shape()));
    }
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    if (labels.size() != batch) {
        detail::shape_error("softmax_cross_entropy", std::to_string(labels.size()) + " labels for " +
                                                         std::to_string(batch) + " rows");
    }
    auto probs = std::make_shared<std::vector<double>>(batch * classes);
    double total = 0.0;
    for (std::size_t n = 0; n < batch; ++n) {
        const int label = labels[n];
        if (label < 0 || static_cast<std::size_t>(label) >= classes) {
            detail::shape_error("softmax_cross_entropy", "label " + std::to_string(label) +
                                                             " out of range for " +
                                                             std::to_string(classes) + " classes");
        }
        const double* row = logits.data() + n * classes;
        double mx = row[0];
        for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) sum += std::exp(row[c] - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t c = 0; c < classes; ++c) {
            (*probs)[n * classes + c] = std::exp(row[c] - lse);
        }
        total += lse - row[label];
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(batch));
    if (detail::want_grad(tape, {&logits})) {
        out.set_requires_grad(true);
        auto li = logits.impl(), oi = out.impl();
        auto lab = std::make_shared<std::vector<int>>(labels);
        tape.record("softmax_cross_entropy", oi, [li, oi, probs, lab, batch, classes] {
            const double g = oi->grad[0] / static_cast<double>(batch);
            auto& gl = detail::grad_of(li);
            for (std::size_t n = 0; n < batch; ++n) {
                for (std::size_t c = 0; c < classes; ++c) {
                    double d = (*probs)[n * classes + c];
                    if (static_cast<std::size_t>((*lab)[n]) == c) d -= 1.0;
                    gl[n * classes + c] += g * d;
                }
            }
        });
    }
    return out;
}

/// Mean squared error over all elements.
inline Tensor mse_loss(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        detail::shape_error("mse_loss", "shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t n = a.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape.record("mse_loss", oi, [ai, bi, oi, n] {
            const double g = 2.0 * oi->grad[0] / static_cast<double>(n);
            if (ai->requires_grad) {
                auto& ga = detail::grad_of(ai);
                for (std::size_t i = 0; i < n; ++i) ga[i] += g * (ai->values[i] - bi->values[i]);
            }
            if (bi->requires_grad) {
                auto& gb = detail::grad_of(bi);
                for (std::size_t i = 0; i < n; ++i) gb[i] -= g * (ai->values[i] - bi->values[i]);
            }
        });
    }
    return out;
}

/// Row-wise argmax with ties broken toward the lowest index.
inline std::vector<int> argmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) {
        detail::shape_error("argmax_rows", "expected [N,C], got " + shape_str(logits.shape()));
    }
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    std::vector<int> out(batch);
    for (std::size_t n = 0; n < batch; ++n) {
        const double* row = logits.data() + n * classes;
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c) {
            if (row[c] > row[best]) best = c;
        }
        out[n] = static_cast<int>(best);
    }
    return out;
}

}  // namespace pdiff::ops
