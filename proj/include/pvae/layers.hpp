#ifndef PVAE_LAYERS_HPP
#define PVAE_LAYERS_HPP

// Differentiable layers over NHWC tensors plus a declarative LayerStack that
// owns parameter registration and shape validation. Convolution parameters
// follow the (kernel x kernel, channels, stride, pad) convention.

#include <optional>

#include "pvae/autograd.hpp"

namespace pvae::nn {

using pvae::ag::Node;

struct Mode {
    bool train = true;
    bool update_stats = true;  // batchnorm running statistics
    static Mode training() { return {true, true}; }
    static Mode eval() { return {false, false}; }
    static Mode frozen_forward() { return {true, false}; }  // train-mode math, no stat updates
};

inline int conv_out_extent(int in, int k, int stride, int pad) {
    int num = in + 2 * pad - k;
    PVAE_CHECK(num >= 0, "kernel " << k << " larger than padded input " << in + 2 * pad);
    return num / stride + 1;
}

inline int deconv_out_extent(int in, int k, int stride, int pad, int out_pad) {
    int v = (in - 1) * stride - 2 * pad + k + out_pad;
    PVAE_CHECK(v >= 1, "deconv output extent " << v << " invalid");
    return v;
}

// x: [B,H,W,Ci], w: [kh,kw,Ci,Co], optional bias [Co].
template <typename T>
Value conv2d(Tape<T>& t, Value x, Value w, std::optional<Value> bias, int stride, int pad,
             const std::string& label = "conv") {
    const Tensor<T>& xv = t.val(x);
    const Tensor<T>& wv = t.val(w);
    PVAE_CHECK(xv.ndim() == 4, label << ": input must be [B,H,W,C], got " << shape_str(xv.shape()));
    PVAE_CHECK(wv.ndim() == 4, label << ": weight must be [kh,kw,Ci,Co]");
    const int B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), Ci = xv.dim(3);
    const int kh = wv.dim(0), kw = wv.dim(1), Co = wv.dim(3);
    PVAE_CHECK(wv.dim(2) == Ci, label << ": input has " << Ci << " channels but weight expects "
                                      << wv.dim(2));
    const int Ho = conv_out_extent(H, kh, stride, pad);
    const int Wo = conv_out_extent(W, kw, stride, pad);

    Tensor<T> y({B, Ho, Wo, Co});
    const T* xp = xv.data();
    const T* wp = wv.data();
    const T* bp = nullptr;
    if (bias) {
        const Tensor<T>& bv = t.val(*bias);
        PVAE_CHECK(bv.numel() == Co, label << ": bias size " << bv.numel() << " vs channels " << Co);
        bp = bv.data();
    }
    T* yp = y.data();
    for (int b = 0; b < B; ++b)
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
                T* acc = yp + (((int64_t)b * Ho + oy) * Wo + ox) * Co;
                if (bp)
                    for (int c = 0; c < Co; ++c) acc[c] = bp[c];
                for (int ky = 0; ky < kh; ++ky) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= W) continue;
                        const T* xrow = xp + (((int64_t)b * H + iy) * W + ix) * Ci;
                        const T* wrow = wp + ((int64_t)ky * kw + kx) * Ci * Co;
                        for (int ci = 0; ci < Ci; ++ci) {
                            T xval = xrow[ci];
                            const T* wr = wrow + (int64_t)ci * Co;
                            for (int co = 0; co < Co; ++co) acc[co] += xval * wr[co];
                        }
                    }
                }
            }

    int xi = x.idx, wi = w.idx, bi = bias ? bias->idx : -1;
    std::vector<Value> parents{x, w};
    if (bias) parents.push_back(*bias);
    return t.make_op(std::move(y), parents, [=](Tape<T>& tp, Node<T>& n) {
        const Tensor<T>& xval = tp.val(Value{xi});
        const Tensor<T>& wval = tp.val(Value{wi});
        Tensor<T>* gx = tp.grad_sink(xi);
        Tensor<T>* gw = tp.grad_sink(wi);
        Tensor<T>* gb = bi >= 0 ? tp.grad_sink(bi) : nullptr;
        const T* dyp = n.grad.data();
        const T* xp2 = xval.data();
        const T* wp2 = wval.data();
        for (int b = 0; b < B; ++b)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    const T* dy = dyp + (((int64_t)b * Ho + oy) * Wo + ox) * Co;
                    if (gb) {
                        T* gbp = gb->data();
                        for (int co = 0; co < Co; ++co) gbp[co] += dy[co];
                    }
                    for (int ky = 0; ky < kh; ++ky) {
                        int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= W) continue;
                            int64_t xoff = (((int64_t)b * H + iy) * W + ix) * Ci;
                            int64_t woff = ((int64_t)ky * kw + kx) * Ci * Co;
                            if (gx) {
                                T* dx = gx->data() + xoff;
                                for (int ci = 0; ci < Ci; ++ci) {
                                    const T* wr = wp2 + woff + (int64_t)ci * Co;
                                    T s = T(0);
                                    for (int co = 0; co < Co; ++co) s += dy[co] * wr[co];
                                    dx[ci] += s;
                                }
                            }
                            if (gw) {
                                const T* xrow = xp2 + xoff;
                                T* dwrow = gw->data() + woff;
                                for (int ci = 0; ci < Ci; ++ci) {
                                    T xval2 = xrow[ci];
                                    T* dwr = dwrow + (int64_t)ci * Co;
                                    for (int co = 0; co < Co; ++co) dwr[co] += xval2 * dy[co];
                                }
                            }
                        }
                    }
                }
    });
}

// Transposed convolution. x: [B,H,W,Ci], w: [kh,kw,Ci,Co].
template <typename T>
Value deconv2d(Tape<T>& t, Value x, Value w, std::optional<Value> bias, int stride, int pad,
               int out_pad = 0, const std::string& label = "deconv") {
    const Tensor<T>& xv = t.val(x);
    const Tensor<T>& wv = t.val(w);
    PVAE_CHECK(xv.ndim() == 4, label << ": input must be [B,H,W,C], got " << shape_str(xv.shape()));
    PVAE_CHECK(wv.ndim() == 4, label << ": weight must be [kh,kw,Ci,Co]");
    const int B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), Ci = xv.dim(3);
    const int kh = wv.dim(0), kw = wv.dim(1), Co = wv.dim(3);
    PVAE_CHECK(wv.dim(2) == Ci, label << ": input has " << Ci << " channels but weight expects "
                                      << wv.dim(2));
    const int Ho = deconv_out_extent(H, kh, stride, pad, out_pad);
    const int Wo = deconv_out_extent(W, kw, stride, pad, out_pad);

    Tensor<T> y({B, Ho, Wo, Co});
    if (bias) {
        const Tensor<T>& bv = t.val(*bias);
        PVAE_CHECK(bv.numel() == Co, label << ": bias size mismatch");
        T* yp = y.data();
        for (int64_t r = 0; r < y.numel() / Co; ++r)
            for (int c = 0; c < Co; ++c) yp[r * Co + c] = bv[c];
    }
    {
        const T* xp = xv.data();
        const T* wp = wv.data();
        T* yp = y.data();
        for (int b = 0; b < B; ++b)
            for (int iy = 0; iy < H; ++iy)
                for (int ix = 0; ix < W; ++ix) {
                    const T* xrow = xp + (((int64_t)b * H + iy) * W + ix) * Ci;
                    for (int ky = 0; ky < kh; ++ky) {
                        int oy = iy * stride - pad + ky;
                        if (oy < 0 || oy >= Ho) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            int ox = ix * stride - pad + kx;
                            if (ox < 0 || ox >= Wo) continue;
                            T* yrow = yp + (((int64_t)b * Ho + oy) * Wo + ox) * Co;
                            const T* wrow = wp + ((int64_t)ky * kw + kx) * Ci * Co;
                            for (int ci = 0; ci < Ci; ++ci) {
                                T xval = xrow[ci];
                                const T* wr = wrow + (int64_t)ci * Co;
                                for (int co = 0; co < Co; ++co) yrow[co] += xval * wr[co];
                            }
                        }
                    }
                }
    }

    int xi = x.idx, wi = w.idx, bi = bias ? bias->idx : -1;
    std::vector<Value> parents{x, w};
    if (bias) parents.push_back(*bias);
    return t.make_op(std::move(y), parents, [=](Tape<T>& tp, Node<T>& n) {
        const Tensor<T>& xval = tp.val(Value{xi});
        const Tensor<T>& wval = tp.val(Value{wi});
        Tensor<T>* gx = tp.grad_sink(xi);
        Tensor<T>* gw = tp.grad_sink(wi);
        Tensor<T>* gb = bi >= 0 ? tp.grad_sink(bi) : nullptr;
        const T* dyp = n.grad.data();
        if (gb) {
            T* gbp = gb->data();
            for (int64_t r = 0; r < n.grad.numel() / Co; ++r)
                for (int c = 0; c < Co; ++c) gbp[c] += dyp[r * Co + c];
        }
        const T* xp2 = xval.data();
        const T* wp2 = wval.data();
        for (int b = 0; b < B; ++b)
            for (int iy = 0; iy < H; ++iy)
                for (int ix = 0; ix < W; ++ix) {
                    int64_t xoff = (((int64_t)b * H + iy) * W + ix) * Ci;
                    for (int ky = 0; ky < kh; ++ky) {
                        int oy = iy * stride - pad + ky;
                        if (oy < 0 || oy >= Ho) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            int ox = ix * stride - pad + kx;
                            if (ox < 0 || ox >= Wo) continue;
                            const T* dy = dyp + (((int64_t)b * Ho + oy) * Wo + ox) * Co;
                            int64_t woff = ((int64_t)ky * kw + kx) * Ci * Co;
                            if (gx) {
                                T* dx = gx->data() + xoff;
                                for (int ci = 0; ci < Ci; ++ci) {
                                    const T* wr = wp2 + woff + (int64_t)ci * Co;
                                    T s = T(0);
                                    for (int co = 0; co < Co; ++co) s += dy[co] * wr[co];
                                    dx[ci] += s;
                                }
                            }
                            if (gw) {
                                const T* xrow = xp2 + xoff;
                                T* dwrow = gw->data() + woff;
                                for (int ci = 0; ci < Ci; ++ci) {
                                    T xval2 = xrow[ci];
                                    T* dwr = dwrow + (int64_t)ci * Co;
                                    for (int co = 0; co < Co; ++co) dwr[co] += xval2 * dy[co];
                                }
                            }
                        }
                    }
                }
    });
}

template <typename T>
Value maxpool(Tape<T>& t, Value x, int k, int stride, int pad, const std::string& label = "maxpool") {
    const Tensor<T>& xv = t.val(x);
    PVAE_CHECK(xv.ndim() == 4, label << ": input must be [B,H,W,C]");
    const int B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    const int Ho = conv_out_extent(H, k, stride, pad);
    const int Wo = conv_out_extent(W, k, stride, pad);
    Tensor<T> y({B, Ho, Wo, C});
    std::vector<int64_t> arg((int64_t)B * Ho * Wo * C, -1);
    const T* xp = xv.data();
    T* yp = y.data();
    for (int b = 0; b < B; ++b)
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
                int64_t obase = (((int64_t)b * Ho + oy) * Wo + ox) * C;
                for (int c = 0; c < C; ++c) yp[obase + c] = -std::numeric_limits<T>::infinity();
                for (int ky = 0; ky < k; ++ky) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= W) continue;
                        int64_t ibase = (((int64_t)b * H + iy) * W + ix) * C;
                        for (int c = 0; c < C; ++c) {
                            if (xp[ibase + c] > yp[obase + c]) {
                                yp[obase + c] = xp[ibase + c];
                                arg[obase + c] = ibase + c;
                            }
                        }
                    }
                }
            }
    int xi = x.idx;
    return t.make_op(std::move(y), {x}, [xi, arg](Tape<T>& tp, Node<T>& n) {
        if (Tensor<T>* g = tp.grad_sink(xi)) {
            for (int64_t i = 0; i < n.grad.numel(); ++i)
                if (arg[i] >= 0) (*g)[arg[i]] += n.grad[i];
        }
    });
}

// Batch normalization over (B,H,W) per channel. Running statistics live
// outside the tape and are updated in place when mode asks for it.
template <typename T>
Value batchnorm(Tape<T>& t, Value x, Value gamma, Value beta, Tensor<T>& running_mean,
                Tensor<T>& running_var, const Mode& mode, T momentum = T(0.1), T eps = T(1e-5),
                const std::string& label = "batchnorm") {
    const Tensor<T>& xv = t.val(x);
    PVAE_CHECK(xv.ndim() == 4, label << ": input must be [B,H,W,C]");
    const int C = xv.dim(3);
    const int64_t rows = xv.numel() / C;
    PVAE_CHECK(t.val(gamma).numel() == C && t.val(beta).numel() == C,
               label << ": scale/shift size mismatch with " << C << " channels");
    PVAE_CHECK(running_mean.numel() == C && running_var.numel() == C,
               label << ": running stats size mismatch");

    Tensor<T> mean({C}), var({C});
    if (mode.train) {
        PVAE_CHECK(rows > 1, label << ": train mode needs more than one value per channel");
        const T* xp = xv.data();
        for (int64_t r = 0; r < rows; ++r)
            for (int c = 0; c < C; ++c) mean[c] += xp[r * C + c];
        for (int c = 0; c < C; ++c) mean[c] /= static_cast<T>(rows);
        for (int64_t r = 0; r < rows; ++r)
            for (int c = 0; c < C; ++c) {
                T d = xp[r * C + c] - mean[c];
                var[c] += d * d;
            }
        for (int c = 0; c < C; ++c) var[c] /= static_cast<T>(rows);
        if (mode.update_stats) {
            for (int c = 0; c < C; ++c) {
                running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mean[c];
                running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var[c];
            }
        }
    } else {
        mean = running_mean;
        var = running_var;
    }

    Tensor<T> invstd({C});
    for (int c = 0; c < C; ++c) invstd[c] = T(1) / std::sqrt(var[c] + eps);

    const Tensor<T>& gv = t.val(gamma);
    const Tensor<T>& bv = t.val(beta);
    Tensor<T> xhat(xv.shape());
    Tensor<T> y(xv.shape());
    {
        const T* xp = xv.data();
        T* hp = xhat.data();
        T* yp = y.data();
        for (int64_t r = 0; r < rows; ++r)
            for (int c = 0; c < C; ++c) {
                T h = (xp[r * C + c] - mean[c]) * invstd[c];
                hp[r * C + c] = h;
                yp[r * C + c] = gv[c] * h + bv[c];
            }
    }

    int xi = x.idx, gi = gamma.idx, bi = beta.idx;
    bool train_stats = mode.train;
    return t.make_op(std::move(y), {x, gamma, beta},
                     [xi, gi, bi, xhat, invstd, rows, C, train_stats](Tape<T>& tp, Node<T>& n) {
                         const Tensor<T>& gval = tp.val(Value{gi});
                         Tensor<T>* gx = tp.grad_sink(xi);
                         Tensor<T>* gg = tp.grad_sink(gi);
                         Tensor<T>* gb = tp.grad_sink(bi);
                         const T* dyp = n.grad.data();
                         const T* hp = xhat.data();
                         if (gg || gb) {
                             for (int64_t r = 0; r < rows; ++r)
                                 for (int c = 0; c < C; ++c) {
                                     T dy = dyp[r * C + c];
                                     if (gg) (*gg)[c] += dy * hp[r * C + c];
                                     if (gb) (*gb)[c] += dy;
                                 }
                         }
                         if (!gx) return;
                         if (!train_stats) {
                             // Eval mode: plain affine map per channel.
                             for (int64_t r = 0; r < rows; ++r)
                                 for (int c = 0; c < C; ++c)
                                     (*gx)[r * C + c] += dyp[r * C + c] * gval[c] * invstd[c];
                             return;
                         }
                         // Train mode: account for the batch statistics.
                         Tensor<T> sum_dy({C}), sum_dy_h({C});
                         for (int64_t r = 0; r < rows; ++r)
                             for (int c = 0; c < C; ++c) {
                                 T dy = dyp[r * C + c];
                                 sum_dy[c] += dy;
                                 sum_dy_h[c] += dy * hp[r * C + c];
                             }
                         T invn = T(1) / static_cast<T>(rows);
                         for (int64_t r = 0; r < rows; ++r)
                             for (int c = 0; c < C; ++c) {
                                 T dy = dyp[r * C + c];
                                 T h = hp[r * C + c];
                                 (*gx)[r * C + c] += gval[c] * invstd[c] *
                                                     (dy - invn * sum_dy[c] - invn * h * sum_dy_h[c]);
                             }
                     });
}

// x: [B,D] @ w: [D,O] + b: [O].
template <typename T>
Value fully_connected(Tape<T>& t, Value x, Value w, std::optional<Value> bias,
                      const std::string& label = "fc") {
    const Tensor<T>& xv = t.val(x);
    const Tensor<T>& wv = t.val(w);
    PVAE_CHECK(xv.ndim() == 2, label << ": input must be [B,D], got " << shape_str(xv.shape()));
    PVAE_CHECK(wv.ndim() == 2 && wv.dim(0) == xv.dim(1),
               label << ": weight " << shape_str(wv.shape()) << " does not accept input "
                     << shape_str(xv.shape()));
    const int B = xv.dim(0), D = xv.dim(1), O = wv.dim(1);
    Tensor<T> y({B, O});
    const T* xp = xv.data();
    const T* wp = wv.data();
    T* yp = y.data();
    if (bias) {
        const Tensor<T>& bv = t.val(*bias);
        PVAE_CHECK(bv.numel() == O, label << ": bias size mismatch");
        for (int b = 0; b < B; ++b)
            for (int o = 0; o < O; ++o) yp[(int64_t)b * O + o] = bv[o];
    }
    for (int b = 0; b < B; ++b)
        for (int d = 0; d < D; ++d) {
            T xval = xp[(int64_t)b * D + d];
            const T* wrow = wp + (int64_t)d * O;
            T* yrow = yp + (int64_t)b * O;
            for (int o = 0; o < O; ++o) yrow[o] += xval * wrow[o];
        }
    int xi = x.idx, wi = w.idx, bi = bias ? bias->idx : -1;
    std::vector<Value> parents{x, w};
    if (bias) parents.push_back(*bias);
    return t.make_op(std::move(y), parents, [=](Tape<T>& tp, Node<T>& n) {
        const Tensor<T>& xval = tp.val(Value{xi});
        const Tensor<T>& wval = tp.val(Value{wi});
        Tensor<T>* gx = tp.grad_sink(xi);
        Tensor<T>* gw = tp.grad_sink(wi);
        Tensor<T>* gb = bi >= 0 ? tp.grad_sink(bi) : nullptr;
        const T* dyp = n.grad.data();
        for (int b = 0; b < B; ++b) {
            const T* dy = dyp + (int64_t)b * O;
            if (gb) {
                T* gbp = gb->data();
                for (int o = 0; o < O; ++o) gbp[o] += dy[o];
            }
            for (int d = 0; d < D; ++d) {
                if (gx) {
                    const T* wrow = wval.data() + (int64_t)d * O;
                    T s = T(0);
                    for (int o = 0; o < O; ++o) s += dy[o] * wrow[o];
                    (*gx)[(int64_t)b * D + d] += s;
                }
                if (gw) {
                    T xval2 = xval[(int64_t)b * D + d];
                    T* dwrow = gw->data() + (int64_t)d * O;
                    for (int o = 0; o < O; ++o) dwrow[o] += xval2 * dy[o];
                }
            }
        }
    });
}

template <typename T>
Value flatten(Tape<T>& t, Value x) {
    const Tensor<T>& xv = t.val(x);
    PVAE_CHECK(xv.ndim() >= 2, "flatten: need at least 2 axes");
    int B = xv.dim(0);
    return ag::reshape(t, x, Shape{B, static_cast<int>(xv.numel() / B)});
}

// Mean cross entropy of softmax(logits) against integer labels.
template <typename T>
Value softmax_cross_entropy(Tape<T>& t, Value logits, const std::vector<int>& labels) {
    const Tensor<T>& lv = t.val(logits);
    PVAE_CHECK(lv.ndim() == 2, "softmax_cross_entropy: logits must be [B,C]");
    const int B = lv.dim(0), C = lv.dim(1);
    PVAE_CHECK(static_cast<int>(labels.size()) == B, "softmax_cross_entropy: label count mismatch");
    Tensor<T> probs({B, C});
    T loss = T(0);
    for (int b = 0; b < B; ++b) {
        PVAE_CHECK(labels[b] >= 0 && labels[b] < C, "label " << labels[b] << " out of range");
        const T* row = lv.data() + (int64_t)b * C;
        T m = row[0];
        for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
        T z = T(0);
        for (int c = 0; c < C; ++c) z += std::exp(row[c] - m);
        T log_z = m + std::log(z);
        for (int c = 0; c < C; ++c) probs.data()[(int64_t)b * C + c] = std::exp(row[c] - log_z);
        loss += log_z - row[labels[b]];
    }
    loss /= static_cast<T>(B);
    int li = logits.idx;
    std::vector<int> lab = labels;
    return t.make_op(Tensor<T>::scalar(loss), {logits}, [li, probs, lab, B, C](Tape<T>& tp, Node<T>& n) {
        if (Tensor<T>* g = tp.grad_sink(li)) {
            T gv = n.grad[0] / static_cast<T>(B);
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    T p = probs[(int64_t)b * C + c];
                    (*g)[(int64_t)b * C + c] += gv * (p - (lab[b] == c ? T(1) : T(0)));
                }
        }
    });
}

// ---------------------------------------------------------------------------
// Declarative layer stacks.

enum class LayerKind {
    conv,
    deconv,
    batchnorm,
    relu,
    leakyrelu,
    tanh_act,
    sigmoid_act,
    fully_connected,
    maxpool,
    residual_block,
};

struct LayerSpec {
    LayerKind kind;
    int kernel = 3;
    int channels = 0;   // conv/deconv/fc output width, residual_block width
    int stride = 1;
    int pad = 1;
    int out_pad = 0;    // deconv only
    bool bias = false;  // convs followed by batchnorm stay bias-free
    double slope = 0.2; // leakyrelu

    static LayerSpec conv2d(int k, int c, int s, int p, bool bias = false) {
        return {LayerKind::conv, k, c, s, p, 0, bias, 0.0};
    }
    static LayerSpec deconv2d(int k, int c, int s, int p, int out_pad = 0, bool bias = false) {
        return {LayerKind::deconv, k, c, s, p, out_pad, bias, 0.0};
    }
    static LayerSpec bn() { return {LayerKind::batchnorm}; }
    static LayerSpec relu() { return {LayerKind::relu}; }
    static LayerSpec leakyrelu(double slope) { return {LayerKind::leakyrelu, 0, 0, 1, 0, 0, false, slope}; }
    static LayerSpec tanh_act() { return {LayerKind::tanh_act}; }
    static LayerSpec sigmoid_act() { return {LayerKind::sigmoid_act}; }
    static LayerSpec fc(int out, bool bias = true) {
        return {LayerKind::fully_connected, 0, out, 1, 0, 0, bias, 0.0};
    }
    static LayerSpec pool(int k, int s, int p) { return {LayerKind::maxpool, k, 0, s, p}; }
    static LayerSpec residual(int c) { return {LayerKind::residual_block, 3, c, 1, 1}; }
};

// Fan-in scaled uniform init for conv/deconv/fc weights; batchnorm starts as
// the identity map.
template <typename T>
Tensor<T> init_weight(Shape shape, int fan_in, std::mt19937_64& rng) {
    T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(fan_in)));
    return rand_uniform<T>(std::move(shape), rng, -bound, bound);
}

template <typename T>
class LayerStack {
public:
    LayerStack() = default;
    LayerStack(std::string prefix, std::vector<LayerSpec> specs)
        : prefix_(std::move(prefix)), specs_(std::move(specs)) {}

    const std::string& prefix() const { return prefix_; }
    const std::vector<LayerSpec>& specs() const { return specs_; }

    // Registers parameters in `store` and returns the output channel count.
    int init(ParamStore<T>& store, int in_channels, std::mt19937_64& rng) {
        int c = in_channels;
        for (size_t i = 0; i < specs_.size(); ++i) {
            const LayerSpec& s = specs_[i];
            std::string base = name(i);
            switch (s.kind) {
                case LayerKind::conv:
                case LayerKind::deconv: {
                    int fan_in = s.kernel * s.kernel * c;
                    store.add(base + ".w", init_weight<T>({s.kernel, s.kernel, c, s.channels},
                                                          fan_in, rng));
                    if (s.bias) store.add(base + ".b", Tensor<T>::zeros({s.channels}));
                    c = s.channels;
                    break;
                }
                case LayerKind::batchnorm:
                    store.add(base + ".g", Tensor<T>::full({c}, T(1)));
                    store.add(base + ".s", Tensor<T>::zeros({c}));
                    store.add(base + ".rm", Tensor<T>::zeros({c}), /*trainable=*/false);
                    store.add(base + ".rv", Tensor<T>::full({c}, T(1)), /*trainable=*/false);
                    break;
                case LayerKind::fully_connected: {
                    store.add(base + ".w", init_weight<T>({c, s.channels}, c, rng));
                    if (s.bias) store.add(base + ".b", Tensor<T>::zeros({s.channels}));
                    c = s.channels;
                    break;
                }
                case LayerKind::residual_block: {
                    int width = s.channels;
                    store.add(base + ".c1.w",
                              init_weight<T>({3, 3, c, width}, 9 * c, rng));
                    store.add(base + ".bn1.g", Tensor<T>::full({width}, T(1)));
                    store.add(base + ".bn1.s", Tensor<T>::zeros({width}));
                    store.add(base + ".bn1.rm", Tensor<T>::zeros({width}), false);
                    store.add(base + ".bn1.rv", Tensor<T>::full({width}, T(1)), false);
                    store.add(base + ".c2.w",
                              init_weight<T>({3, 3, width, width}, 9 * width, rng));
                    store.add(base + ".bn2.g", Tensor<T>::full({width}, T(1)));
                    store.add(base + ".bn2.s", Tensor<T>::zeros({width}));
                    store.add(base + ".bn2.rm", Tensor<T>::zeros({width}), false);
                    store.add(base + ".bn2.rv", Tensor<T>::full({width}, T(1)), false);
                    if (width != c) {
                        store.add(base + ".proj.w", init_weight<T>({1, 1, c, width}, c, rng));
                        store.add(base + ".bnp.g", Tensor<T>::full({width}, T(1)));
                        store.add(base + ".bnp.s", Tensor<T>::zeros({width}));
                        store.add(base + ".bnp.rm", Tensor<T>::zeros({width}), false);
                        store.add(base + ".bnp.rv", Tensor<T>::full({width}, T(1)), false);
                    }
                    c = width;
                    break;
                }
                default:
                    break;  // activations and pooling carry no parameters
            }
        }
        out_channels_ = c;
        return c;
    }

    Value forward(Tape<T>& t, ParamStore<T>& store, Value x, const Mode& mode) const {
        return forward_range(t, store, x, mode, 0, specs_.size());
    }

    // Runs layers [begin, end); lets callers mix modes across a stack.
    Value forward_range(Tape<T>& t, ParamStore<T>& store, Value x, const Mode& mode, size_t begin,
                        size_t end) const {
        PVAE_CHECK(begin <= end && end <= specs_.size(), "forward_range: bad layer range");
        for (size_t i = begin; i < end; ++i) {
            const LayerSpec& s = specs_[i];
            std::string base = name(i);
            switch (s.kind) {
                case LayerKind::conv: {
                    std::optional<Value> b;
                    if (s.bias) b = t.param(base + ".b");
                    x = conv2d(t, x, t.param(base + ".w"), b, s.stride, s.pad, base);
                    break;
                }
                case LayerKind::deconv: {
                    std::optional<Value> b;
                    if (s.bias) b = t.param(base + ".b");
                    x = deconv2d(t, x, t.param(base + ".w"), b, s.stride, s.pad, s.out_pad, base);
                    break;
                }
                case LayerKind::batchnorm:
                    x = batchnorm(t, x, t.param(base + ".g"), t.param(base + ".s"),
                                  store.at(base + ".rm").value, store.at(base + ".rv").value, mode,
                                  T(0.1), T(1e-5), base);
                    break;
                case LayerKind::relu:
                    x = ag::relu(t, x);
                    break;
                case LayerKind::leakyrelu:
                    x = ag::leaky_relu(t, x, static_cast<T>(s.slope));
                    break;
                case LayerKind::tanh_act:
                    x = ag::tanh_(t, x);
                    break;
                case LayerKind::sigmoid_act:
                    x = ag::sigmoid_(t, x);
                    break;
                case LayerKind::fully_connected: {
                    std::optional<Value> b;
                    if (s.bias) b = t.param(base + ".b");
                    x = fully_connected(t, x, t.param(base + ".w"), b, base);
                    break;
                }
                case LayerKind::maxpool:
                    x = maxpool(t, x, s.kernel, s.stride, s.pad, base);
                    break;
                case LayerKind::residual_block: {
                    Value in = x;
                    Value h = conv2d(t, x, t.param(base + ".c1.w"), std::nullopt, 1, 1, base + ".c1");
                    h = batchnorm(t, h, t.param(base + ".bn1.g"), t.param(base + ".bn1.s"),
                                  store.at(base + ".bn1.rm").value, store.at(base + ".bn1.rv").value,
                                  mode, T(0.1), T(1e-5), base + ".bn1");
                    h = ag::relu(t, h);
                    h = conv2d(t, h, t.param(base + ".c2.w"), std::nullopt, 1, 1, base + ".c2");
                    h = batchnorm(t, h, t.param(base + ".bn2.g"), t.param(base + ".bn2.s"),
                                  store.at(base + ".bn2.rm").value, store.at(base + ".bn2.rv").value,
                                  mode, T(0.1), T(1e-5), base + ".bn2");
                    Value shortcut = in;
                    if (store.has(base + ".proj.w")) {
                        shortcut = conv2d(t, in, t.param(base + ".proj.w"), std::nullopt, 1, 0,
                                          base + ".proj");
                        shortcut = batchnorm(t, shortcut, t.param(base + ".bnp.g"),
                                             t.param(base + ".bnp.s"),
                                             store.at(base + ".bnp.rm").value,
                                             store.at(base + ".bnp.rv").value, mode, T(0.1),
                                             T(1e-5), base + ".bnp");
                    }
                    x = ag::relu(t, ag::add(t, h, shortcut));
                    break;
                }
            }
        }
        return x;
    }

    // All parameter names this stack registered, in registration order.
    std::vector<std::string> param_names(const ParamStore<T>& store) const {
        std::vector<std::string> names;
        for (auto& [k, e] : store.entries())
            if (k.rfind(prefix_ + ".", 0) == 0) names.push_back(k);
        return names;
    }

    int out_channels() const { return out_channels_; }

private:
    std::string name(size_t i) const { return prefix_ + "." + std::to_string(i); }

    std::string prefix_;
    std::vector<LayerSpec> specs_;
    int out_channels_ = 0;
};

}  // namespace pvae::nn

#endif
