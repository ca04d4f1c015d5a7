#pragma once

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "m3f/tape.hpp"
#include "m3f/tensor.hpp"

namespace m3f {

// ---------------------------------------------------------------------------
// BLAS-backed row-major GEMM. C = alpha * op(A) * op(B) + beta * C.
// ---------------------------------------------------------------------------
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, real alpha, const real* a,
                 int lda, const real* b, int ldb, real beta, real* c, int ldc) {
    auto ta = trans_a ? CblasTrans : CblasNoTrans;
    auto tb = trans_b ? CblasTrans : CblasNoTrans;
    if constexpr (sizeof(real) == sizeof(double))
        cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, static_cast<double>(alpha),
                    reinterpret_cast<const double*>(a), lda, reinterpret_cast<const double*>(b),
                    ldb, static_cast<double>(beta), reinterpret_cast<double*>(c), ldc);
    else
        cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, static_cast<float>(alpha),
                    reinterpret_cast<const float*>(a), lda, reinterpret_cast<const float*>(b),
                    ldb, static_cast<float>(beta), reinterpret_cast<float*>(c), ldc);
}

// ---------------------------------------------------------------------------
// matmul: [m x k] * [k x n] -> [m x n]
// ---------------------------------------------------------------------------
inline Var matmul(Tape& t, Var a, Var b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    check_shape(A.rank() == 2 && B.rank() == 2, "matmul expects rank-2 operands, got " +
                                                    A.shape_str() + " and " + B.shape_str());
    check_shape(A.dim(1) == B.dim(0),
                "matmul inner dimensions disagree: " + A.shape_str() + " x " + B.shape_str());
    const int m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor out({m, n});
    gemm(false, false, m, n, k, 1, A.data.data(), k, B.data.data(), n, 0, out.data.data(), n);
    Var o{t.next_id()};
    return t.push(std::move(out), [a, b, o, m, n, k](Tape& tp) {
        const Tensor& g = tp.grad(o);
        // dA += g * B^T, dB += A^T * g
        gemm(false, true, m, k, n, 1, g.data.data(), n, tp.val(b).data.data(), n, 1,
             tp.grad(a).data.data(), k);
        gemm(true, false, k, n, m, 1, tp.val(a).data.data(), k, g.data.data(), n, 1,
             tp.grad(b).data.data(), n);
    });
}

// ---------------------------------------------------------------------------
// Elementwise ops (same shape)
// ---------------------------------------------------------------------------
inline Var add(Tape& t, Var a, Var b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    check_shape(A.same_shape(B), "add: " + A.shape_str() + " vs " + B.shape_str());
    Tensor out = A;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += B[i];
    Var o{t.next_id()};
    return t.push(std::move(out), [a, b, o](Tape& tp) {
        const Tensor& g = tp.grad(o);
        Tensor& ga = tp.grad(a);
        Tensor& gb = tp.grad(b);
        for (int64_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    });
}

inline Var sub(Tape& t, Var a, Var b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    check_shape(A.same_shape(B), "sub: " + A.shape_str() + " vs " + B.shape_str());
    Tensor out = A;
    for (int64_t i = 0; i < out.size(); ++i) out[i] -= B[i];
    Var o{t.next_id()};
    return t.push(std::move(out), [a, b, o](Tape& tp) {
        const Tensor& g = tp.grad(o);
        Tensor& ga = tp.grad(a);
        Tensor& gb = tp.grad(b);
        for (int64_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] -= g[i];
        }
    });
}

inline Var mul(Tape& t, Var a, Var b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    check_shape(A.same_shape(B), "mul: " + A.shape_str() + " vs " + B.shape_str());
    Tensor out = A;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= B[i];
    Var o{t.next_id()};
    return t.push(std::move(out), [a, b, o](Tape& tp) {
        const Tensor& g = tp.grad(o);
        Tensor& ga = tp.grad(a);
        Tensor& gb = tp.grad(b);
        const Tensor& A2 = tp.val(a);
        const Tensor& B2 = tp.val(b);
        for (int64_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * B2[i];
            gb[i] += g[i] * A2[i];
        }
    });
}

inline Var scale(Tape& t, Var a, real c) {
    Tensor out = t.val(a);
    for (auto& v : out.data) v *= c;
    Var o{t.next_id()};
    return t.push(std::move(out), [a, o, c](Tape& tp) {
        const Tensor& g = tp.grad(o);
        Tensor& ga = tp.grad(a);
        for (int64_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
}

/// M [m x n] + row vector b [n], broadcast over rows.
inline Var add_rowvec(Tape& t, Var m, Var b) {
    const Tensor& M = t.val(m);
    const Tensor& B = t.val(b);
    check_shape(M.rank() == 2 && B.rank() == 1 && M.dim(1) == B.dim(0),
                "add_rowvec: " + M.shape_str() + " + " + B.shape_str());
    const int rows = M.dim(0), cols = M.dim(1);
    Tensor out = M;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out.at(r, c) += B[c];
    Var o{t.next_id()};
    return t.push(std::move(out), [m, b, o, rows, cols](Tape& tp) {
        const Tensor& g = tp.grad(o);
        Tensor& gm = tp.grad(m);
        Tensor& gb = tp.grad(b);
        for (int64_t i = 0; i < g.size(); ++i) gm[i] += g[i];
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) gb[c] += g.at(r, c);
    });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------
enum class Act { Relu, Tanh, Sigmoid };

inline Var activation(Tape& t, Var x, Act kind) {
    Tensor out = t.val(x);
    switch (kind) {
        case Act::Relu:
            for (auto& v : out.data) v = v > 0 ? v : real(0);
            break;
        case Act::Tanh:
            for (auto& v : out.data) v = std::tanh(v);
            break;
        case Act::Sigmoid:
            for (auto& v : out.data) v = real(1) / (real(1) + std::exp(-v));
            break;
    }
    Var o{t.next_id()};
    return t.push(std::move(out), [x, o, kind](Tape& tp) {
        const Tensor& g = tp.grad(o);
        const Tensor& y = tp.val(o);
        Tensor& gx = tp.grad(x);
        switch (kind) {
            case Act::Relu:
                for (int64_t i = 0; i < g.size(); ++i) gx[i] += y[i] > 0 ? g[i] : real(0);
                break;
            case Act::Tanh:
                for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (real(1) - y[i] * y[i]);
                break;
            case Act::Sigmoid:
                for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (real(1) - y[i]);
                break;
        }
    });
}

inline Var relu(Tape& t, Var x) { return activation(t, x, Act::Relu); }
inline Var tanh_op(Tape& t, Var x) { return activation(t, x, Act::Tanh); }
inline Var sigmoid(Tape& t, Var x) { return activation(t, x, Act::Sigmoid); }

// ---------------------------------------------------------------------------
// Softmax over the last axis of a rank-2 tensor, max-subtracted.
// ---------------------------------------------------------------------------
inline Var softmax_rows(Tape& t, Var x) {
    const Tensor& X = t.val(x);
    check_shape(X.rank() == 2, "softmax_rows expects rank-2, got " + X.shape_str());
    const int rows = X.dim(0), cols = X.dim(1);
    Tensor out({rows, cols});
    for (int r = 0; r < rows; ++r) {
        real mx = X.at(r, 0);
        for (int c = 1; c < cols; ++c) mx = std::max(mx, X.at(r, c));
        real sum = 0;
        for (int c = 0; c < cols; ++c) {
            real e = std::exp(X.at(r, c) - mx);
            out.at(r, c) = e;
            sum += e;
        }
        for (int c = 0; c < cols; ++c) out.at(r, c) /= sum;
    }
    Var o{t.next_id()};
    return t.push(std::move(out), [x, o, rows, cols](Tape& tp) {
        const Tensor& g = tp.grad(o);
        const Tensor& p = tp.val(o);
        Tensor& gx = tp.grad(x);
        for (int r = 0; r < rows; ++r) {
            real dot = 0;
            for (int c = 0; c < cols; ++c) dot += g.at(r, c) * p.at(r, c);
            for (int c = 0; c < cols; ++c) gx.at(r, c) += p.at(r, c) * (g.at(r, c) - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// Categorical cross entropy over a batch of probability rows.
// ---------------------------------------------------------------------------
inline constexpr real kProbFloor = real(1e-7);

inline Var cross_entropy(Tape& t, Var probs, const std::vector<int>& labels) {
    const Tensor& P = t.val(probs);
    check_shape(P.rank() == 2, "cross_entropy expects rank-2 probabilities");
    const int batch = P.dim(0), classes = P.dim(1);
    check_shape(static_cast<int>(labels.size()) == batch, "cross_entropy: labels/batch mismatch");
    for (int b = 0; b < batch; ++b) {
        if (labels[b] < 0 || labels[b] >= classes)
            throw std::invalid_argument("cross_entropy: label " + std::to_string(labels[b]) +
                                        " out of range [0," + std::to_string(classes) + ")");
        real sum = 0;
        for (int c = 0; c < classes; ++c) sum += P.at(b, c);
        if (std::abs(sum - real(1)) > real(1e-3))
            throw std::invalid_argument("cross_entropy: row " + std::to_string(b) +
                                        " does not sum to 1");
    }
    real loss = 0;
    for (int b = 0; b < batch; ++b) loss -= std::log(std::max(P.at(b, labels[b]), kProbFloor));
    loss /= static_cast<real>(batch);
    Var o{t.next_id()};
    return t.push(Tensor::scalar(loss), [probs, o, labels, batch](Tape& tp) {
        const real g = tp.grad(o)[0];
        const Tensor& P2 = tp.val(probs);
        Tensor& gp = tp.grad(probs);
        for (int b = 0; b < batch; ++b) {
            real p = P2.at(b, labels[b]);
            if (p > kProbFloor) gp.at(b, labels[b]) -= g / (p * static_cast<real>(batch));
        }
    });
}

// ---------------------------------------------------------------------------
// Reshape (free), vstack, concat_cols, sum
// ---------------------------------------------------------------------------
inline Var reshape(Tape& t, Var x, std::vector<int> shape) {
    const Tensor& X = t.val(x);
    check_shape(Tensor::count(shape) == X.size(),
                "reshape: element count mismatch " + X.shape_str() + " -> " +
                    Tensor::shape_to_string(shape));
    Tensor out(shape, X.data);
    Var o{t.next_id()};
    return t.push(std::move(out), [x, o](Tape& tp) {
        const Tensor& g = tp.grad(o);
        Tensor& gx = tp.grad(x);
        for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

/// Stack rank-1 vectors (as single rows) or rank-2 blocks vertically.
inline Var vstack(Tape& t, std::span<const Var> parts) {
    check_shape(!parts.empty(), "vstack of nothing");
    int cols = -1, rows = 0;
    std::vector<int> part_rows;
    for (Var p : parts) {
        const Tensor& P = t.val(p);
        int pc = P.rank() == 1 ? P.dim(0) : P.dim(1);
        int pr = P.rank() == 1 ? 1 : P.dim(0);
        check_shape(P.rank() <= 2, "vstack expects rank-1/2 parts");
        if (cols < 0) cols = pc;
        check_shape(pc == cols, "vstack: column mismatch");
        part_rows.push_back(pr);
        rows += pr;
    }
    Tensor out({rows, cols});
    int64_t off = 0;
    for (Var p : parts) {
        const Tensor& P = t.val(p);
        std::copy(P.data.begin(), P.data.end(), out.data.begin() + off);
        off += P.size();
    }
    std::vector<Var> owned(parts.begin(), parts.end());
    Var o{t.next_id()};
    return t.push(std::move(out), [owned, o](Tape& tp) {
        const Tensor& g = tp.grad(o);
        int64_t off2 = 0;
        for (Var p : owned) {
            Tensor& gp = tp.grad(p);
            for (int64_t i = 0; i < gp.size(); ++i) gp[i] += g[off2 + i];
            off2 += gp.size();
        }
    });
}

inline Var concat_cols(Tape& t, Var a, Var b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    check_shape(A.rank() == 2 && B.rank() == 2 && A.dim(0) == B.dim(0),
                "concat_cols: " + A.shape_str() + " | " + B.shape_str());
    const int rows = A.dim(0), ca = A.dim(1), cb = B.dim(1);
    Tensor out({rows, ca + cb});
    for (int r = 0; r < rows; ++r) {
        std::copy_n(&A.data[static_cast<size_t>(r) * ca], ca, &out.data[(size_t)r * (ca + cb)]);
        std::copy_n(&B.data[static_cast<size_t>(r) * cb], cb,
                    &out.data[(size_t)r * (ca + cb) + ca]);
    }
    Var o{t.next_id()};
    return t.push(std::move(out), [a, b, o, rows, ca, cb](Tape& tp) {
        const Tensor& g = tp.grad(o);
        Tensor& ga = tp.grad(a);
        Tensor& gb = tp.grad(b);
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < ca; ++c) ga.at(r, c) += g.at(r, c);
            for (int c = 0; c < cb; ++c) gb.at(r, c) += g.at(r, ca + c);
        }
    });
}

/// Concatenate feature maps along the channel axis ([C,H,W] or [B,C,H,W]).
inline Var concat_channels(Tape& t, Var a, Var b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    check_shape(A.rank() == B.rank() && (A.rank() == 3 || A.rank() == 4),
                "concat_channels expects rank-3/4 inputs");
    const bool batched = A.rank() == 4;
    const int batch = batched ? A.dim(0) : 1;
    const int ca = A.dim(batched ? 1 : 0), cb = B.dim(batched ? 1 : 0);
    const int h = A.dim(batched ? 2 : 1), w = A.dim(batched ? 3 : 2);
    check_shape((batched ? B.dim(0) : 1) == batch && B.dim(batched ? 2 : 1) == h &&
                    B.dim(batched ? 3 : 2) == w,
                "concat_channels: spatial/batch mismatch " + A.shape_str() + " | " +
                    B.shape_str());
    const int64_t hw = static_cast<int64_t>(h) * w;
    std::vector<int> oshape =
        batched ? std::vector<int>{batch, ca + cb, h, w} : std::vector<int>{ca + cb, h, w};
    Tensor out(std::move(oshape));
    for (int s = 0; s < batch; ++s) {
        std::copy_n(A.data.begin() + static_cast<int64_t>(s) * ca * hw, ca * hw,
                    out.data.begin() + static_cast<int64_t>(s) * (ca + cb) * hw);
        std::copy_n(B.data.begin() + static_cast<int64_t>(s) * cb * hw, cb * hw,
                    out.data.begin() + static_cast<int64_t>(s) * (ca + cb) * hw + ca * hw);
    }
    Var o{t.next_id()};
    return t.push(std::move(out), [a, b, o, batch, ca, cb, hw](Tape& tp) {
        const Tensor& g = tp.grad(o);
        Tensor& ga = tp.grad(a);
        Tensor& gb = tp.grad(b);
        for (int s = 0; s < batch; ++s) {
            const real* gs = g.data.data() + static_cast<int64_t>(s) * (ca + cb) * hw;
            real* pa = ga.data.data() + static_cast<int64_t>(s) * ca * hw;
            real* pb = gb.data.data() + static_cast<int64_t>(s) * cb * hw;
            for (int64_t i = 0; i < ca * hw; ++i) pa[i] += gs[i];
            for (int64_t i = 0; i < cb * hw; ++i) pb[i] += gs[ca * hw + i];
        }
    });
}

inline Var sum(Tape& t, Var x) {
    const Tensor& X = t.val(x);
    real s = 0;
    for (real v : X.data) s += v;
    Var o{t.next_id()};
    return t.push(Tensor::scalar(s), [x, o](Tape& tp) {
        const real g = tp.grad(o)[0];
        Tensor& gx = tp.grad(x);
        for (int64_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation via im2col + GEMM.
// Input [C,H,W] or [B,C,H,W]; kernels [Co,Ci,k,k]; bias [Co].
// ---------------------------------------------------------------------------
enum class Padding { Valid, Same };

namespace detail {

struct ConvGeom {
    int batch, ci, h, w, co, k, stride;
    int pad_top, pad_left;
    int oh, ow;
    bool batched;  // input was rank-4
};

inline ConvGeom conv_geometry(const Tensor& X, const Tensor& K, Padding pad, int stride) {
    check_shape(K.rank() == 4 && K.dim(2) == K.dim(3), "conv2d kernels must be [Co,Ci,k,k]");
    check_shape(stride >= 1, "conv2d stride must be >= 1");
    ConvGeom g{};
    g.batched = X.rank() == 4;
    check_shape(X.rank() == 3 || X.rank() == 4, "conv2d input must be rank-3 or rank-4");
    g.batch = g.batched ? X.dim(0) : 1;
    g.ci = X.dim(g.batched ? 1 : 0);
    g.h = X.dim(g.batched ? 2 : 1);
    g.w = X.dim(g.batched ? 3 : 2);
    g.co = K.dim(0);
    g.k = K.dim(2);
    g.stride = stride;
    check_shape(K.dim(1) == g.ci, "conv2d: kernel expects " + std::to_string(K.dim(1)) +
                                      " input channels, input has " + std::to_string(g.ci));
    int pad_total = pad == Padding::Same ? g.k - 1 : 0;
    g.pad_top = g.pad_left = pad_total / 2;
    int ph = g.h + pad_total, pw = g.w + pad_total;
    check_shape(g.k <= ph && g.k <= pw,
                "conv2d: kernel " + std::to_string(g.k) + " larger than padded input " +
                    std::to_string(ph) + "x" + std::to_string(pw));
    g.oh = (ph - g.k) / stride + 1;
    g.ow = (pw - g.k) / stride + 1;
    return g;
}

// Col layout: [ck][batch*pos], pos row-major over output positions.
inline void im2col(const Tensor& X, const ConvGeom& g, real* col) {
    const int ck = g.ci * g.k * g.k;
    const int64_t pos = static_cast<int64_t>(g.oh) * g.ow;
    const int64_t ncols = g.batch * pos;
    for (int b = 0; b < g.batch; ++b) {
        const real* xb = X.data.data() + static_cast<int64_t>(b) * g.ci * g.h * g.w;
        for (int c = 0; c < g.ci; ++c) {
            for (int kr = 0; kr < g.k; ++kr) {
                for (int kc = 0; kc < g.k; ++kc) {
                    const int row = (c * g.k + kr) * g.k + kc;
                    real* dst = col + static_cast<int64_t>(row) * ncols + (int64_t)b * pos;
                    for (int or_ = 0; or_ < g.oh; ++or_) {
                        const int ir = or_ * g.stride + kr - g.pad_top;
                        for (int oc = 0; oc < g.ow; ++oc) {
                            const int ic = oc * g.stride + kc - g.pad_left;
                            const bool in = ir >= 0 && ir < g.h && ic >= 0 && ic < g.w;
                            dst[or_ * g.ow + oc] =
                                in ? xb[(static_cast<int64_t>(c) * g.h + ir) * g.w + ic]
                                   : real(0);
                        }
                    }
                }
            }
        }
    }
}

inline void col2im_add(const real* col, const ConvGeom& g, Tensor& gx) {
    const int64_t pos = static_cast<int64_t>(g.oh) * g.ow;
    const int64_t ncols = g.batch * pos;
    for (int b = 0; b < g.batch; ++b) {
        real* xb = gx.data.data() + static_cast<int64_t>(b) * g.ci * g.h * g.w;
        for (int c = 0; c < g.ci; ++c) {
            for (int kr = 0; kr < g.k; ++kr) {
                for (int kc = 0; kc < g.k; ++kc) {
                    const int row = (c * g.k + kr) * g.k + kc;
                    const real* src = col + static_cast<int64_t>(row) * ncols + (int64_t)b * pos;
                    for (int or_ = 0; or_ < g.oh; ++or_) {
                        const int ir = or_ * g.stride + kr - g.pad_top;
                        if (ir < 0 || ir >= g.h) continue;
                        for (int oc = 0; oc < g.ow; ++oc) {
                            const int ic = oc * g.stride + kc - g.pad_left;
                            if (ic < 0 || ic >= g.w) continue;
                            xb[(static_cast<int64_t>(c) * g.h + ir) * g.w + ic] +=
                                src[or_ * g.ow + oc];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

inline Var conv2d(Tape& t, Var x, Var kernels, Var bias, Padding pad = Padding::Valid,
                  int stride = 1) {
    const Tensor& X = t.val(x);
    const Tensor& K = t.val(kernels);
    const Tensor& B = t.val(bias);
    auto g = detail::conv_geometry(X, K, pad, stride);
    check_shape(B.rank() == 1 && B.dim(0) == g.co, "conv2d: bias must be [Co]");

    const int ck = g.ci * g.k * g.k;
    const int64_t pos = static_cast<int64_t>(g.oh) * g.ow;
    const int64_t ncols = g.batch * pos;
    auto col = std::make_shared<std::vector<real>>(static_cast<size_t>(ck) * ncols);
    detail::im2col(X, g, col->data());

    // Out2[co][b*pos] = K2[co][ck] * Col[ck][b*pos]
    std::vector<real> out2(static_cast<size_t>(g.co) * ncols);
    gemm(false, false, g.co, static_cast<int>(ncols), ck, 1, K.data.data(), ck, col->data(),
         static_cast<int>(ncols), 0, out2.data(), static_cast<int>(ncols));

    std::vector<int> oshape =
        g.batched ? std::vector<int>{g.batch, g.co, g.oh, g.ow} : std::vector<int>{g.co, g.oh, g.ow};
    Tensor out(std::move(oshape));
    for (int b = 0; b < g.batch; ++b)
        for (int c = 0; c < g.co; ++c)
            for (int64_t p = 0; p < pos; ++p)
                out.data[((static_cast<int64_t>(b) * g.co + c) * pos) + p] =
                    out2[static_cast<int64_t>(c) * ncols + (int64_t)b * pos + p] + B[c];

    Var o{t.next_id()};
    return t.push(std::move(out), [x, kernels, bias, o, g, col, ck, pos, ncols](Tape& tp) {
        const Tensor& gy = tp.grad(o);
        // Reorder dOut to [co][b*pos]
        std::vector<real> gy2(static_cast<size_t>(g.co) * ncols);
        for (int b = 0; b < g.batch; ++b)
            for (int c = 0; c < g.co; ++c)
                for (int64_t p = 0; p < pos; ++p)
                    gy2[static_cast<int64_t>(c) * ncols + (int64_t)b * pos + p] =
                        gy.data[((static_cast<int64_t>(b) * g.co + c) * pos) + p];
        // dK += gy2 * Col^T
        gemm(false, true, g.co, ck, static_cast<int>(ncols), 1, gy2.data(),
             static_cast<int>(ncols), col->data(), static_cast<int>(ncols), 1,
             tp.grad(kernels).data.data(), ck);
        // dBias
        Tensor& gb = tp.grad(bias);
        for (int c = 0; c < g.co; ++c) {
            real s = 0;
            for (int64_t i = 0; i < ncols; ++i) s += gy2[static_cast<int64_t>(c) * ncols + i];
            gb[c] += s;
        }
        // dCol = K^T * gy2, scattered back into dX
        std::vector<real> gcol(static_cast<size_t>(ck) * ncols);
        gemm(true, false, ck, static_cast<int>(ncols), g.co, 1,
             tp.val(kernels).data.data(), ck, gy2.data(), static_cast<int>(ncols), 0,
             gcol.data(), static_cast<int>(ncols));
        detail::col2im_add(gcol.data(), g, tp.grad(x));
    });
}

// ---------------------------------------------------------------------------
// maxpool2d: per-window max; gradient routed to the first (row-major) argmax.
// ---------------------------------------------------------------------------
inline Var maxpool2d(Tape& t, Var x, int window, int stride) {
    const Tensor& X = t.val(x);
    check_shape(X.rank() == 3 || X.rank() == 4, "maxpool2d input must be rank-3 or rank-4");
    const bool batched = X.rank() == 4;
    const int batch = batched ? X.dim(0) : 1;
    const int ch = X.dim(batched ? 1 : 0);
    const int h = X.dim(batched ? 2 : 1);
    const int w = X.dim(batched ? 3 : 2);
    check_shape(window >= 1 && stride >= 1, "maxpool2d: window/stride must be positive");
    check_shape(window <= h && window <= w,
                "maxpool2d: window " + std::to_string(window) + " exceeds input " +
                    std::to_string(h) + "x" + std::to_string(w));
    const int oh = (h - window) / stride + 1;
    const int ow = (w - window) / stride + 1;
    std::vector<int> oshape =
        batched ? std::vector<int>{batch, ch, oh, ow} : std::vector<int>{ch, oh, ow};
    Tensor out(std::move(oshape));
    auto argmax = std::make_shared<std::vector<int64_t>>(out.data.size());
    int64_t oi = 0;
    for (int b = 0; b < batch; ++b) {
        const real* xb = X.data.data() + static_cast<int64_t>(b) * ch * h * w;
        for (int c = 0; c < ch; ++c) {
            for (int orr = 0; orr < oh; ++orr) {
                for (int oc = 0; oc < ow; ++oc, ++oi) {
                    real best = -std::numeric_limits<real>::infinity();
                    int64_t bi = -1;
                    for (int r = 0; r < window; ++r) {
                        for (int cc = 0; cc < window; ++cc) {
                            int64_t idx = (static_cast<int64_t>(c) * h + orr * stride + r) * w +
                                          oc * stride + cc;
                            if (xb[idx] > best) {
                                best = xb[idx];
                                bi = idx + static_cast<int64_t>(b) * ch * h * w;
                            }
                        }
                    }
                    out.data[static_cast<size_t>(oi)] = best;
                    (*argmax)[static_cast<size_t>(oi)] = bi;
                }
            }
        }
    }
    Var o{t.next_id()};
    return t.push(std::move(out), [x, o, argmax](Tape& tp) {
        const Tensor& g = tp.grad(o);
        Tensor& gx = tp.grad(x);
        for (int64_t i = 0; i < g.size(); ++i) gx[(*argmax)[static_cast<size_t>(i)]] += g[i];
    });
}

// ---------------------------------------------------------------------------
// global_avg_pool: [C,H,W] -> [C] or [B,C,H,W] -> [B,C]
// ---------------------------------------------------------------------------
inline Var global_avg_pool(Tape& t, Var x) {
    const Tensor& X = t.val(x);
    check_shape(X.rank() == 3 || X.rank() == 4, "global_avg_pool input must be rank-3 or rank-4");
    const bool batched = X.rank() == 4;
    const int batch = batched ? X.dim(0) : 1;
    const int ch = X.dim(batched ? 1 : 0);
    const int64_t hw = static_cast<int64_t>(X.dim(batched ? 2 : 1)) * X.dim(batched ? 3 : 2);
    std::vector<int> oshape = batched ? std::vector<int>{batch, ch} : std::vector<int>{ch};
    Tensor out(std::move(oshape));
    for (int b = 0; b < batch; ++b)
        for (int c = 0; c < ch; ++c) {
            const real* p = X.data.data() + (static_cast<int64_t>(b) * ch + c) * hw;
            real s = 0;
            for (int64_t i = 0; i < hw; ++i) s += p[i];
            out.data[static_cast<size_t>(b) * ch + c] = s / static_cast<real>(hw);
        }
    Var o{t.next_id()};
    return t.push(std::move(out), [x, o, batch, ch, hw](Tape& tp) {
        const Tensor& g = tp.grad(o);
        Tensor& gx = tp.grad(x);
        for (int b = 0; b < batch; ++b)
            for (int c = 0; c < ch; ++c) {
                real gv = g.data[static_cast<size_t>(b) * ch + c] / static_cast<real>(hw);
                real* p = gx.data.data() + (static_cast<int64_t>(b) * ch + c) * hw;
                for (int64_t i = 0; i < hw; ++i) p[i] += gv;
            }
    });
}

// ---------------------------------------------------------------------------
// batch_norm: per-channel over [B,C,H,W] (axes B,H,W) or per-column over
// [B,F]. Train mode normalizes by batch statistics and updates running
// stats by exponential moving average; eval mode uses running stats.
// ---------------------------------------------------------------------------
enum class Mode { Train, Eval };

inline constexpr real kBnEpsilon = real(1e-5);
inline constexpr real kBnMomentum = real(0.9);

inline Var batch_norm(Tape& t, Var x, Var gamma, Var beta, Tensor& run_mean, Tensor& run_var,
                      Mode mode, bool update_stats = true, real eps = kBnEpsilon,
                      real momentum = kBnMomentum) {
    const Tensor& X = t.val(x);
    check_shape(X.rank() >= 2 && X.rank() <= 4, "batch_norm input must be rank-2, -3 or -4");
    // rank-3 is a single [C,H,W] sample; statistics then run over H*W only
    const bool single = X.rank() == 3;
    const int batch = single ? 1 : X.dim(0);
    const int ch = X.dim(single ? 0 : 1);
    const int64_t hw = X.rank() == 4 ? static_cast<int64_t>(X.dim(2)) * X.dim(3)
                       : single     ? static_cast<int64_t>(X.dim(1)) * X.dim(2)
                                    : 1;
    const int64_t per_ch = static_cast<int64_t>(batch) * hw;
    check_shape(batch >= 1, "batch_norm: empty batch");
    const Tensor& G = t.val(gamma);
    const Tensor& Be = t.val(beta);
    check_shape(G.rank() == 1 && G.dim(0) == ch && Be.same_shape(G),
                "batch_norm: gamma/beta must be [C]");
    check_shape(run_mean.shape == G.shape && run_var.shape == G.shape,
                "batch_norm: running stats must be [C]");

    auto chan_val = [&](const Tensor& T, int b, int c, int64_t i) -> real {
        return T.data[(static_cast<int64_t>(b) * ch + c) * hw + i];
    };

    std::vector<real> mean(ch), var(ch);
    if (mode == Mode::Train) {
        for (int c = 0; c < ch; ++c) {
            real s = 0;
            for (int b = 0; b < batch; ++b)
                for (int64_t i = 0; i < hw; ++i) s += chan_val(X, b, c, i);
            mean[c] = s / static_cast<real>(per_ch);
            real v = 0;
            for (int b = 0; b < batch; ++b)
                for (int64_t i = 0; i < hw; ++i) {
                    real d = chan_val(X, b, c, i) - mean[c];
                    v += d * d;
                }
            var[c] = v / static_cast<real>(per_ch);
        }
        if (update_stats) {
            for (int c = 0; c < ch; ++c) {
                run_mean[c] = momentum * run_mean[c] + (real(1) - momentum) * mean[c];
                run_var[c] = momentum * run_var[c] + (real(1) - momentum) * var[c];
            }
        }
    } else {
        for (int c = 0; c < ch; ++c) {
            mean[c] = run_mean[c];
            var[c] = run_var[c];
        }
    }

    auto istd = std::make_shared<std::vector<real>>(ch);
    for (int c = 0; c < ch; ++c) (*istd)[c] = real(1) / std::sqrt(var[c] + eps);
    auto xhat = std::make_shared<std::vector<real>>(X.data.size());
    Tensor out(X.shape);
    for (int b = 0; b < batch; ++b)
        for (int c = 0; c < ch; ++c)
            for (int64_t i = 0; i < hw; ++i) {
                int64_t idx = (static_cast<int64_t>(b) * ch + c) * hw + i;
                real xh = (X.data[idx] - mean[c]) * (*istd)[c];
                (*xhat)[static_cast<size_t>(idx)] = xh;
                out.data[static_cast<size_t>(idx)] = G[c] * xh + Be[c];
            }

    const bool train_stats = mode == Mode::Train;
    Var o{t.next_id()};
    return t.push(std::move(out),
                  [x, gamma, beta, o, xhat, istd, batch, ch, hw, per_ch, train_stats](Tape& tp) {
        const Tensor& gy = tp.grad(o);
        const Tensor& G2 = tp.val(gamma);
        Tensor& gx = tp.grad(x);
        Tensor& gg = tp.grad(gamma);
        Tensor& gb = tp.grad(beta);
        for (int c = 0; c < ch; ++c) {
            real sum_gy = 0, sum_gy_xh = 0;
            for (int b = 0; b < batch; ++b)
                for (int64_t i = 0; i < hw; ++i) {
                    int64_t idx = (static_cast<int64_t>(b) * ch + c) * hw + i;
                    sum_gy += gy.data[static_cast<size_t>(idx)];
                    sum_gy_xh +=
                        gy.data[static_cast<size_t>(idx)] * (*xhat)[static_cast<size_t>(idx)];
                }
            gg[c] += sum_gy_xh;
            gb[c] += sum_gy;
            const real gi = G2[c] * (*istd)[c];
            if (train_stats) {
                const real m_gy = sum_gy / static_cast<real>(per_ch);
                const real m_gy_xh = sum_gy_xh / static_cast<real>(per_ch);
                for (int b = 0; b < batch; ++b)
                    for (int64_t i = 0; i < hw; ++i) {
                        int64_t idx = (static_cast<int64_t>(b) * ch + c) * hw + i;
                        gx.data[static_cast<size_t>(idx)] +=
                            gi * (gy.data[static_cast<size_t>(idx)] - m_gy -
                                  (*xhat)[static_cast<size_t>(idx)] * m_gy_xh);
                    }
            } else {
                for (int b = 0; b < batch; ++b)
                    for (int64_t i = 0; i < hw; ++i) {
                        int64_t idx = (static_cast<int64_t>(b) * ch + c) * hw + i;
                        gx.data[static_cast<size_t>(idx)] +=
                            gi * gy.data[static_cast<size_t>(idx)];
                    }
            }
        }
    });
}

}  // namespace m3f
