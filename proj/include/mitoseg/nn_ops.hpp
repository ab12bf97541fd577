#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <vector>

#include "mitoseg/tensor.hpp"

namespace mitoseg {
namespace detail {

// Row-major GEMM kernels. Each output element is accumulated in a fixed k
// order by exactly one thread, so results do not depend on thread count.

// C[M,N] = A[M,K] * B[K,N]   (+= when accumulate)
inline void gemm_nn(const float* A, const float* B, float* C, int M, int N, int K, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int m = 0; m < M; ++m) {
        float* c = C + static_cast<std::size_t>(m) * N;
        if (!accumulate) std::memset(c, 0, sizeof(float) * static_cast<std::size_t>(N));
        const float* a = A + static_cast<std::size_t>(m) * K;
        for (int k = 0; k < K; ++k) {
            const float av = a[k];
            if (av == 0.0f) continue;
            const float* b = B + static_cast<std::size_t>(k) * N;
            for (int n = 0; n < N; ++n) c[n] += av * b[n];
        }
    }
}

// C[M,N] = A[M,K] * B[N,K]^T
inline void gemm_nt(const float* A, const float* B, float* C, int M, int N, int K, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int m = 0; m < M; ++m) {
        const float* a = A + static_cast<std::size_t>(m) * K;
        float* c = C + static_cast<std::size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            const float* b = B + static_cast<std::size_t>(n) * K;
            float acc = 0.0f;
            for (int k = 0; k < K; ++k) acc += a[k] * b[k];
            c[n] = accumulate ? c[n] + acc : acc;
        }
    }
}

// C[M,N] = A[K,M]^T * B[K,N]
inline void gemm_tn(const float* A, const float* B, float* C, int M, int N, int K, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int m = 0; m < M; ++m) {
        float* c = C + static_cast<std::size_t>(m) * N;
        if (!accumulate) std::memset(c, 0, sizeof(float) * static_cast<std::size_t>(N));
        for (int k = 0; k < K; ++k) {
            const float av = A[static_cast<std::size_t>(k) * M + m];
            if (av == 0.0f) continue;
            const float* b = B + static_cast<std::size_t>(k) * N;
            for (int n = 0; n < N; ++n) c[n] += av * b[n];
        }
    }
}

// input [C,H,W] -> col [C*kh*kw, OH*OW]
inline void im2col(const float* in, int C, int H, int W, int k, int stride, int pad,
                   int OH, int OW, float* col) {
    const std::size_t plane = static_cast<std::size_t>(OH) * OW;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                float* dst = col + (static_cast<std::size_t>(c) * k * k + static_cast<std::size_t>(ky) * k + kx) * plane;
                const float* src = in + static_cast<std::size_t>(c) * H * W;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        std::memset(dst + static_cast<std::size_t>(oy) * OW, 0, sizeof(float) * static_cast<std::size_t>(OW));
                        continue;
                    }
                    const float* row = src + static_cast<std::size_t>(iy) * W;
                    float* drow = dst + static_cast<std::size_t>(oy) * OW;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        drow[ox] = (ix >= 0 && ix < W) ? row[ix] : 0.0f;
                    }
                }
            }
        }
    }
}

// scatter-add col [C*kh*kw, OH*OW] back onto a [C,H,W] gradient buffer
inline void col2im_add(const float* col, int C, int H, int W, int k, int stride, int pad,
                       int OH, int OW, float* out) {
    const std::size_t plane = static_cast<std::size_t>(OH) * OW;
    for (int c = 0; c < C; ++c) {
        float* dst = out + static_cast<std::size_t>(c) * H * W;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const float* src = col + (static_cast<std::size_t>(c) * k * k + static_cast<std::size_t>(ky) * k + kx) * plane;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    float* row = dst + static_cast<std::size_t>(iy) * W;
                    const float* srow = src + static_cast<std::size_t>(oy) * OW;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) row[ix] += srow[ox];
                    }
                }
            }
        }
    }
}

inline void check_nchw(const Tensor& t, const char* who) {
    require_shape(t.ndim() == 4, std::string(who) + " expects an NxCxHxW tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, weight [Co,Ci,k,k], optional bias [Co]
// ---------------------------------------------------------------------------
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     int stride, int pad) {
    detail::check_nchw(input, "conv2d input");
    detail::check_nchw(weight, "conv2d weight");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int Co = weight.dim(0), Ci = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    require_shape(kh == kw, "conv2d kernel must be square, got " + shape_str(weight.shape()));
    require_shape(kh % 2 == 1, "conv2d kernel extent must be odd, got " + std::to_string(kh));
    require_shape(stride == 1 || stride == 2, "conv2d stride must be 1 or 2, got " + std::to_string(stride));
    require_shape(Ci == C, "conv2d channel mismatch: input has " + std::to_string(C) +
                               " channels, weight expects " + std::to_string(Ci));
    if (bias.defined())
        require_shape(bias.numel() == Co, "conv2d bias length " + std::to_string(bias.numel()) +
                                              " does not match out channels " + std::to_string(Co));
    const int k = kh;
    const int OH = (H + 2 * pad - k) / stride + 1;
    const int OW = (W + 2 * pad - k) / stride + 1;
    require_shape(OH >= 1 && OW >= 1, "conv2d output extent collapsed for input " + shape_str(input.shape()));

    const bool pointwise = (k == 1 && stride == 1 && pad == 0);
    const int K = C * k * k;
    const std::size_t ohw = static_cast<std::size_t>(OH) * OW;

    std::vector<TensorImplPtr> parents{input.ptr(), weight.ptr()};
    if (bias.defined()) parents.push_back(bias.ptr());

    auto x = input.ptr();
    auto w = weight.ptr();
    auto b = bias.defined() ? bias.ptr() : nullptr;

    Tensor out = detail::make_result(
        {N, Co, OH, OW}, parents, [x, w, b, N, C, H, W, Co, k, stride, pad, OH, OW, K, pointwise](TensorImpl& self) {
            const std::size_t ohw = static_cast<std::size_t>(OH) * OW;
            const std::size_t in_plane = static_cast<std::size_t>(C) * H * W;
            std::vector<float> col;
            std::vector<float> dcol;
            const bool need_dx = x->on_tape();
            const bool need_dw = w->on_tape();
            if (need_dx) x->ensure_grad();
            if (need_dw) w->ensure_grad();
            if (b && b->on_tape()) b->ensure_grad();
            if (!pointwise && (need_dx || need_dw)) col.resize(static_cast<std::size_t>(K) * ohw);
            if (need_dx && !pointwise) dcol.resize(static_cast<std::size_t>(K) * ohw);
            for (int n = 0; n < N; ++n) {
                const float* xin = x->data.data() + n * in_plane;
                const float* g = self.grad.data() + static_cast<std::size_t>(n) * Co * ohw;
                const float* colp = nullptr;
                if (need_dw || need_dx) {
                    if (pointwise) {
                        colp = xin;
                    } else {
                        detail::im2col(xin, C, H, W, k, stride, pad, OH, OW, col.data());
                        colp = col.data();
                    }
                }
                if (need_dw)
                    detail::gemm_nt(g, colp, w->grad.data(), Co, K, static_cast<int>(ohw), true);
                if (need_dx) {
                    float* dx = x->grad.data() + n * in_plane;
                    if (pointwise) {
                        detail::gemm_tn(w->data.data(), g, dx, K, static_cast<int>(ohw), Co, true);
                    } else {
                        detail::gemm_tn(w->data.data(), g, dcol.data(), K, static_cast<int>(ohw), Co, false);
                        detail::col2im_add(dcol.data(), C, H, W, k, stride, pad, OH, OW, dx);
                    }
                }
                if (b && b->on_tape()) {
                    for (int co = 0; co < Co; ++co) {
                        float acc = 0.0f;
                        const float* gc = g + static_cast<std::size_t>(co) * ohw;
                        for (std::size_t i = 0; i < ohw; ++i) acc += gc[i];
                        b->grad[co] += acc;
                    }
                }
            }
        });

    // forward
    std::vector<float> col;
    if (!pointwise) col.resize(static_cast<std::size_t>(K) * ohw);
    float* y = out.data().data();
    const float* xin0 = input.data().data();
    for (int n = 0; n < N; ++n) {
        const float* xin = xin0 + static_cast<std::size_t>(n) * C * H * W;
        const float* colp = xin;
        if (!pointwise) {
            detail::im2col(xin, C, H, W, k, stride, pad, OH, OW, col.data());
            colp = col.data();
        }
        detail::gemm_nn(weight.data().data(), colp, y + static_cast<std::size_t>(n) * Co * ohw, Co,
                        static_cast<int>(ohw), K, false);
    }
    if (bias.defined()) {
        const float* bv = bias.data().data();
        for (int n = 0; n < N; ++n)
            for (int co = 0; co < Co; ++co) {
                float* yc = y + (static_cast<std::size_t>(n) * Co + co) * ohw;
                const float add = bv[co];
                for (std::size_t i = 0; i < ohw; ++i) yc[i] += add;
            }
    }
    return out;
}

inline Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int pad) {
    return conv2d(input, weight, Tensor(), stride, pad);
}

// ---------------------------------------------------------------------------
// depthwise_conv2d: weight [C,1,k,k]; each channel convolved independently
// ---------------------------------------------------------------------------
inline Tensor depthwise_conv2d(const Tensor& input, const Tensor& weight, int stride, int pad) {
    detail::check_nchw(input, "depthwise_conv2d input");
    detail::check_nchw(weight, "depthwise_conv2d weight");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    require_shape(weight.dim(0) == C && weight.dim(1) == 1,
                  "depthwise_conv2d weight " + shape_str(weight.shape()) + " does not match input channels " +
                      std::to_string(C));
    const int k = weight.dim(2);
    require_shape(k == weight.dim(3) && k % 2 == 1, "depthwise kernel must be square and odd");
    require_shape(stride == 1 || stride == 2, "depthwise stride must be 1 or 2");
    const int OH = (H + 2 * pad - k) / stride + 1;
    const int OW = (W + 2 * pad - k) / stride + 1;
    require_shape(OH >= 1 && OW >= 1, "depthwise output extent collapsed");

    auto x = input.ptr();
    auto w = weight.ptr();
    Tensor out = detail::make_result(
        {N, C, OH, OW}, {x, w}, [x, w, N, C, H, W, k, stride, pad, OH, OW](TensorImpl& self) {
            const bool need_dx = x->on_tape();
            const bool need_dw = w->on_tape();
            if (need_dx) x->ensure_grad();
            if (need_dw) w->ensure_grad();
#pragma omp parallel for schedule(static) collapse(2)
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    if (!need_dx) continue;
                    const float* g = self.grad.data() + (static_cast<std::size_t>(n) * C + c) * OH * OW;
                    const float* wc = w->data.data() + static_cast<std::size_t>(c) * k * k;
                    float* dxc = x->grad.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
                    for (int oy = 0; oy < OH; ++oy)
                        for (int ox = 0; ox < OW; ++ox) {
                            const float gv = g[oy * OW + ox];
                            if (gv == 0.0f) continue;
                            for (int ky = 0; ky < k; ++ky) {
                                const int iy = oy * stride - pad + ky;
                                if (iy < 0 || iy >= H) continue;
                                for (int kx = 0; kx < k; ++kx) {
                                    const int ix = ox * stride - pad + kx;
                                    if (ix < 0 || ix >= W) continue;
                                    dxc[iy * W + ix] += gv * wc[ky * k + kx];
                                }
                            }
                        }
                }
            if (need_dw) {
                // weight grads accumulate over the batch; keep per-channel order fixed
#pragma omp parallel for schedule(static)
                for (int c = 0; c < C; ++c) {
                    float* dwc = w->grad.data() + static_cast<std::size_t>(c) * k * k;
                    for (int n = 0; n < N; ++n) {
                        const float* g = self.grad.data() + (static_cast<std::size_t>(n) * C + c) * OH * OW;
                        const float* xc = x->data.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                float acc = 0.0f;
                                for (int oy = 0; oy < OH; ++oy) {
                                    const int iy = oy * stride - pad + ky;
                                    if (iy < 0 || iy >= H) continue;
                                    for (int ox = 0; ox < OW; ++ox) {
                                        const int ix = ox * stride - pad + kx;
                                        if (ix < 0 || ix >= W) continue;
                                        acc += g[oy * OW + ox] * xc[iy * W + ix];
                                    }
                                }
                                dwc[ky * k + kx] += acc;
                            }
                    }
                }
            }
        });

    float* y = out.data().data();
    const float* xd = input.data().data();
    const float* wd = weight.data().data();
#pragma omp parallel for schedule(static) collapse(2)
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* xc = xd + (static_cast<std::size_t>(n) * C + c) * H * W;
            const float* wc = wd + static_cast<std::size_t>(c) * k * k;
            float* yc = y + (static_cast<std::size_t>(n) * C + c) * OH * OW;
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    float acc = 0.0f;
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= W) continue;
                            acc += wc[ky * k + kx] * xc[iy * W + ix];
                        }
                    }
                    yc[oy * OW + ox] = acc;
                }
        }
    return out;
}

// Depthwise 3x3 stage followed by a pointwise 1x1 stage.
inline Tensor depthwise_separable_conv(const Tensor& input, const Tensor& dw_weight,
                                       const Tensor& pw_weight, const Tensor& pw_bias, int stride) {
    require_shape(dw_weight.ndim() == 4 && dw_weight.dim(2) == 3 && dw_weight.dim(3) == 3,
                  "depthwise stage expects a Cx1x3x3 kernel, got " + shape_str(dw_weight.shape()));
    require_shape(pw_weight.dim(2) == 1 && pw_weight.dim(3) == 1,
                  "pointwise stage expects 1x1 kernels, got " + shape_str(pw_weight.shape()));
    require_shape(pw_weight.dim(1) == dw_weight.dim(0),
                  "stage channel mismatch: depthwise has " + std::to_string(dw_weight.dim(0)) +
                      " channels, pointwise expects " + std::to_string(pw_weight.dim(1)));
    Tensor mid = depthwise_conv2d(input, dw_weight, stride, 1);
    return conv2d(mid, pw_weight, pw_bias, 1, 0);
}

// ---------------------------------------------------------------------------
// bilinear 2x upsample, half-pixel centers, border clamp
// ---------------------------------------------------------------------------
inline Tensor bilinear_upsample_2x(const Tensor& input) {
    detail::check_nchw(input, "bilinear_upsample_2x");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int OH = 2 * H, OW = 2 * W;

    // Per-axis taps are the same for all rows/cols; precompute once.
    struct Tap {
        int i0, i1;
        float f;  // weight of i1
    };
    auto make_taps = [](int in, int out) {
        std::vector<Tap> taps(static_cast<std::size_t>(out));
        for (int o = 0; o < out; ++o) {
            float s = (o + 0.5f) * 0.5f - 0.5f;
            if (s < 0.0f) s = 0.0f;
            if (s > static_cast<float>(in - 1)) s = static_cast<float>(in - 1);
            int i0 = static_cast<int>(s);
            if (i0 > in - 2) i0 = in - 2;
            if (i0 < 0) i0 = 0;
            const int i1 = (in == 1) ? 0 : i0 + 1;
            taps[static_cast<std::size_t>(o)] = {i0, i1, (in == 1) ? 0.0f : s - static_cast<float>(i0)};
        }
        return taps;
    };
    auto ty = make_taps(H, OH);
    auto tx = make_taps(W, OW);

    auto x = input.ptr();
    Tensor out = detail::make_result({N, C, OH, OW}, {x}, [x, ty, tx, N, C, H, W, OH, OW](TensorImpl& self) {
        if (!x->on_tape()) return;
        x->ensure_grad();
#pragma omp parallel for schedule(static) collapse(2)
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                float* dx = x->grad.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
                const float* g = self.grad.data() + (static_cast<std::size_t>(n) * C + c) * OH * OW;
                for (int oy = 0; oy < OH; ++oy) {
                    const Tap& a = ty[static_cast<std::size_t>(oy)];
                    for (int ox = 0; ox < OW; ++ox) {
                        const Tap& b = tx[static_cast<std::size_t>(ox)];
                        const float gv = g[oy * OW + ox];
                        dx[a.i0 * W + b.i0] += gv * (1 - a.f) * (1 - b.f);
                        dx[a.i0 * W + b.i1] += gv * (1 - a.f) * b.f;
                        dx[a.i1 * W + b.i0] += gv * a.f * (1 - b.f);
                        dx[a.i1 * W + b.i1] += gv * a.f * b.f;
                    }
                }
            }
    });

    float* y = out.data().data();
    const float* xd = input.data().data();
#pragma omp parallel for schedule(static) collapse(2)
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* xc = xd + (static_cast<std::size_t>(n) * C + c) * H * W;
            float* yc = y + (static_cast<std::size_t>(n) * C + c) * OH * OW;
            for (int oy = 0; oy < OH; ++oy) {
                const Tap& a = ty[static_cast<std::size_t>(oy)];
                for (int ox = 0; ox < OW; ++ox) {
                    const Tap& b = tx[static_cast<std::size_t>(ox)];
                    const float v00 = xc[a.i0 * W + b.i0];
                    const float v01 = xc[a.i0 * W + b.i1];
                    const float v10 = xc[a.i1 * W + b.i0];
                    const float v11 = xc[a.i1 * W + b.i1];
                    const float top = v00 + (v01 - v00) * b.f;
                    const float bot = v10 + (v11 - v10) * b.f;
                    yc[oy * OW + ox] = top + (bot - top) * a.f;
                }
            }
        }
    return out;
}

// 2x2 stride-2 mean pool; the inverse sanity check for the upsampler.
inline Tensor avg_pool_2x(const Tensor& input) {
    detail::check_nchw(input, "avg_pool_2x");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    require_shape(H % 2 == 0 && W % 2 == 0, "avg_pool_2x needs even extents, got " + shape_str(input.shape()));
    const int OH = H / 2, OW = W / 2;
    auto x = input.ptr();
    Tensor out = detail::make_result({N, C, OH, OW}, {x}, [x, N, C, H, W, OH, OW](TensorImpl& self) {
        if (!x->on_tape()) return;
        x->ensure_grad();
        for (int nc = 0; nc < N * C; ++nc) {
            float* dx = x->grad.data() + static_cast<std::size_t>(nc) * H * W;
            const float* g = self.grad.data() + static_cast<std::size_t>(nc) * OH * OW;
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    const float q = 0.25f * g[oy * OW + ox];
                    dx[(2 * oy) * W + 2 * ox] += q;
                    dx[(2 * oy) * W + 2 * ox + 1] += q;
                    dx[(2 * oy + 1) * W + 2 * ox] += q;
                    dx[(2 * oy + 1) * W + 2 * ox + 1] += q;
                }
        }
    });
    float* y = out.data().data();
    const float* xd = input.data().data();
    for (int nc = 0; nc < N * C; ++nc) {
        const float* xc = xd + static_cast<std::size_t>(nc) * H * W;
        float* yc = y + static_cast<std::size_t>(nc) * OH * OW;
        for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox)
                yc[oy * OW + ox] = 0.25f * (xc[(2 * oy) * W + 2 * ox] + xc[(2 * oy) * W + 2 * ox + 1] +
                                            xc[(2 * oy + 1) * W + 2 * ox] + xc[(2 * oy + 1) * W + 2 * ox + 1]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// pooled reductions
// ---------------------------------------------------------------------------
enum class Reduce { global_avg, global_max, channel_avg, channel_max };

inline Tensor pooled_reduction(const Tensor& input, Reduce kind) {
    detail::check_nchw(input, "pooled_reduction");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int HW = H * W;
    auto x = input.ptr();
    const float* xd = input.data().data();

    switch (kind) {
        case Reduce::global_avg: {
            Tensor out = detail::make_result({N, C, 1, 1}, {x}, [x, N, C, HW](TensorImpl& self) {
                if (!x->on_tape()) return;
                x->ensure_grad();
                const float inv = 1.0f / static_cast<float>(HW);
                for (int nc = 0; nc < N * C; ++nc) {
                    const float gv = self.grad[static_cast<std::size_t>(nc)] * inv;
                    float* dx = x->grad.data() + static_cast<std::size_t>(nc) * HW;
                    for (int i = 0; i < HW; ++i) dx[i] += gv;
                }
            });
            float* y = out.data().data();
            for (int nc = 0; nc < N * C; ++nc) {
                const float* xc = xd + static_cast<std::size_t>(nc) * HW;
                float acc = 0.0f;
                for (int i = 0; i < HW; ++i) acc += xc[i];
                y[nc] = acc / static_cast<float>(HW);
            }
            return out;
        }
        case Reduce::global_max: {
            auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(N) * C);
            Tensor out = detail::make_result({N, C, 1, 1}, {x}, [x, argmax, N, C, HW](TensorImpl& self) {
                if (!x->on_tape()) return;
                x->ensure_grad();
                for (int nc = 0; nc < N * C; ++nc)
                    x->grad[static_cast<std::size_t>(nc) * HW + (*argmax)[static_cast<std::size_t>(nc)]] +=
                        self.grad[static_cast<std::size_t>(nc)];
            });
            float* y = out.data().data();
            for (int nc = 0; nc < N * C; ++nc) {
                const float* xc = xd + static_cast<std::size_t>(nc) * HW;
                int best = 0;
                for (int i = 1; i < HW; ++i)
                    if (xc[i] > xc[best]) best = i;  // ties keep the first index
                (*argmax)[static_cast<std::size_t>(nc)] = best;
                y[nc] = xc[best];
            }
            return out;
        }
        case Reduce::channel_avg: {
            Tensor out = detail::make_result({N, 1, H, W}, {x}, [x, N, C, HW](TensorImpl& self) {
                if (!x->on_tape()) return;
                x->ensure_grad();
                const float inv = 1.0f / static_cast<float>(C);
                for (int n = 0; n < N; ++n) {
                    const float* g = self.grad.data() + static_cast<std::size_t>(n) * HW;
                    for (int c = 0; c < C; ++c) {
                        float* dx = x->grad.data() + (static_cast<std::size_t>(n) * C + c) * HW;
                        for (int i = 0; i < HW; ++i) dx[i] += g[i] * inv;
                    }
                }
            });
            float* y = out.data().data();
            for (int n = 0; n < N; ++n) {
                float* yn = y + static_cast<std::size_t>(n) * HW;
                std::memset(yn, 0, sizeof(float) * static_cast<std::size_t>(HW));
                for (int c = 0; c < C; ++c) {
                    const float* xc = xd + (static_cast<std::size_t>(n) * C + c) * HW;
                    for (int i = 0; i < HW; ++i) yn[i] += xc[i];
                }
                const float inv = 1.0f / static_cast<float>(C);
                for (int i = 0; i < HW; ++i) yn[i] *= inv;
            }
            return out;
        }
        case Reduce::channel_max: {
            auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(N) * HW);
            Tensor out = detail::make_result({N, 1, H, W}, {x}, [x, argmax, N, C, HW](TensorImpl& self) {
                if (!x->on_tape()) return;
                x->ensure_grad();
                for (int n = 0; n < N; ++n) {
                    const float* g = self.grad.data() + static_cast<std::size_t>(n) * HW;
                    for (int i = 0; i < HW; ++i) {
                        const int c = (*argmax)[static_cast<std::size_t>(n) * HW + i];
                        x->grad[(static_cast<std::size_t>(n) * C + c) * HW + i] += g[i];
                    }
                }
            });
            float* y = out.data().data();
            for (int n = 0; n < N; ++n) {
                float* yn = y + static_cast<std::size_t>(n) * HW;
                for (int i = 0; i < HW; ++i) {
                    int best = 0;
                    float bv = xd[(static_cast<std::size_t>(n) * C) * HW + i];
                    for (int c = 1; c < C; ++c) {
                        const float v = xd[(static_cast<std::size_t>(n) * C + c) * HW + i];
                        if (v > bv) {
                            bv = v;
                            best = c;
                        }
                    }
                    (*argmax)[static_cast<std::size_t>(n) * HW + i] = best;
                    yn[i] = bv;
                }
            }
            return out;
        }
    }
    throw ConfigError("unknown reduction kind");
}

// ---------------------------------------------------------------------------
// elementwise and broadcast primitives
// ---------------------------------------------------------------------------
namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& input, Fwd fwd, Bwd bwd_from_out) {
    auto x = input.ptr();
    Tensor out = detail::make_result(input.shape(), {x}, [x, bwd_from_out](TensorImpl& self) {
        if (!x->on_tape()) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i)
            x->grad[i] += self.grad[i] * bwd_from_out(x->data[i], self.data[i]);
    });
    float* y = out.data().data();
    const float* xd = input.data().data();
    const std::size_t n = input.data().size();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i)
        y[i] = fwd(xd[static_cast<std::size_t>(i)]);
    return out;
}

}  // namespace detail

inline Tensor relu(const Tensor& x) {
    return detail::unary_op(
        x, [](float v) { return v > 0.0f ? v : 0.0f; },
        [](float xi, float) { return xi > 0.0f ? 1.0f : 0.0f; });
}

inline Tensor sigmoid(const Tensor& x) {
    // clamp away from the float32 saturation points so outputs stay strictly
    // inside (0,1) no matter how large the logits get
    return detail::unary_op(
        x,
        [](float v) {
            float y = 1.0f / (1.0f + std::exp(-v));
            if (y < 1e-12f) y = 1e-12f;
            if (y > 0.99999988f) y = 0.99999988f;
            return y;
        },
        [](float, float yi) { return yi * (1.0f - yi); });
}

inline Tensor tanh(const Tensor& x) {
    return detail::unary_op(
        x, [](float v) { return std::tanh(v); }, [](float, float yi) { return 1.0f - yi * yi; });
}

// a*x + b with scalar coefficients
inline Tensor affine(const Tensor& x, float a, float b) {
    return detail::unary_op(
        x, [a, b](float v) { return a * v + b; }, [a](float, float) { return a; });
}

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    require_shape(a.shape() == b.shape(), std::string(who) + ": shape mismatch " + shape_str(a.shape()) +
                                              " vs " + shape_str(b.shape()));
}

template <typename Fwd, typename DA, typename DB>
Tensor binary_op(const Tensor& ta, const Tensor& tb, Fwd fwd, DA da, DB db) {
    check_same_shape(ta, tb, "elementwise op");
    auto a = ta.ptr();
    auto b = tb.ptr();
    Tensor out = detail::make_result(ta.shape(), {a, b}, [a, b, da, db](TensorImpl& self) {
        if (a->on_tape()) {
            a->ensure_grad();
            for (std::size_t i = 0; i < self.data.size(); ++i)
                a->grad[i] += self.grad[i] * da(a->data[i], b->data[i]);
        }
        if (b->on_tape()) {
            b->ensure_grad();
            for (std::size_t i = 0; i < self.data.size(); ++i)
                b->grad[i] += self.grad[i] * db(a->data[i], b->data[i]);
        }
    });
    float* y = out.data().data();
    const float* av = ta.data().data();
    const float* bv = tb.data().data();
    const std::size_t n = ta.data().size();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i)
        y[i] = fwd(av[static_cast<std::size_t>(i)], bv[static_cast<std::size_t>(i)]);
    return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](float x, float y) { return x + y; }, [](float, float) { return 1.0f; },
        [](float, float) { return 1.0f; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](float x, float y) { return x - y; }, [](float, float) { return 1.0f; },
        [](float, float) { return -1.0f; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](float x, float y) { return x * y; }, [](float, float y) { return y; },
        [](float x, float) { return x; });
}

// Broadcast multiply: scale is either NxCx1x1 or Nx1xHxW against an NxCxHxW map.
inline Tensor mul_broadcast(const Tensor& input, const Tensor& scale) {
    if (input.shape() == scale.shape()) return mul(input, scale);
    detail::check_nchw(input, "mul_broadcast input");
    detail::check_nchw(scale, "mul_broadcast scale");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int HW = H * W;
    const bool channel_scale = (scale.dim(0) == N && scale.dim(1) == C && scale.dim(2) == 1 && scale.dim(3) == 1);
    const bool spatial_scale = (scale.dim(0) == N && scale.dim(1) == 1 && scale.dim(2) == H && scale.dim(3) == W);
    require_shape(channel_scale || spatial_scale,
                  "mul_broadcast: cannot broadcast " + shape_str(scale.shape()) + " against " +
                      shape_str(input.shape()));
    auto x = input.ptr();
    auto s = scale.ptr();
    Tensor out = detail::make_result(input.shape(), {x, s}, [x, s, N, C, HW, channel_scale](TensorImpl& self) {
        if (x->on_tape()) {
            x->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                    if (channel_scale) {
                        const float sv = s->data[static_cast<std::size_t>(n) * C + c];
                        for (int i = 0; i < HW; ++i) x->grad[base + i] += self.grad[base + i] * sv;
                    } else {
                        const float* sv = s->data.data() + static_cast<std::size_t>(n) * HW;
                        for (int i = 0; i < HW; ++i) x->grad[base + i] += self.grad[base + i] * sv[i];
                    }
                }
        }
        if (s->on_tape()) {
            s->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                    if (channel_scale) {
                        float acc = 0.0f;
                        for (int i = 0; i < HW; ++i) acc += self.grad[base + i] * x->data[base + i];
                        s->grad[static_cast<std::size_t>(n) * C + c] += acc;
                    } else {
                        float* ds = s->grad.data() + static_cast<std::size_t>(n) * HW;
                        for (int i = 0; i < HW; ++i) ds[i] += self.grad[base + i] * x->data[base + i];
                    }
                }
        }
    });
    float* y = out.data().data();
    const float* xd = input.data().data();
    const float* sd = scale.data().data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
            if (channel_scale) {
                const float sv = sd[static_cast<std::size_t>(n) * C + c];
                for (int i = 0; i < HW; ++i) y[base + i] = xd[base + i] * sv;
            } else {
                const float* sv = sd + static_cast<std::size_t>(n) * HW;
                for (int i = 0; i < HW; ++i) y[base + i] = xd[base + i] * sv[i];
            }
        }
    return out;
}

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
    require_shape(!parts.empty(), "concat_channels: empty input list");
    const int N = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
    int C = 0;
    std::vector<TensorImplPtr> parents;
    for (const auto& p : parts) {
        detail::check_nchw(p, "concat_channels");
        require_shape(p.dim(0) == N && p.dim(2) == H && p.dim(3) == W,
                      "concat_channels: incompatible part " + shape_str(p.shape()));
        C += p.dim(1);
        parents.push_back(p.ptr());
    }
    const int HW = H * W;
    Tensor out = detail::make_result({N, C, H, W}, parents, [N, C, HW](TensorImpl& self) {
        int c0 = 0;
        for (auto& p : self.parents) {
            const int pc = p->shape[1];
            if (p->on_tape()) {
                p->ensure_grad();
                for (int n = 0; n < N; ++n)
                    std::transform(
                        self.grad.begin() + (static_cast<std::size_t>(n) * C + c0) * HW,
                        self.grad.begin() + (static_cast<std::size_t>(n) * C + c0 + pc) * HW,
                        p->grad.begin() + static_cast<std::size_t>(n) * pc * HW,
                        p->grad.begin() + static_cast<std::size_t>(n) * pc * HW, std::plus<float>());
            }
            c0 += pc;
        }
    });
    float* y = out.data().data();
    int c0 = 0;
    for (const auto& p : parts) {
        const int pc = p.dim(1);
        const float* pd = p.data().data();
        for (int n = 0; n < N; ++n)
            std::memcpy(y + (static_cast<std::size_t>(n) * C + c0) * HW,
                        pd + static_cast<std::size_t>(n) * pc * HW, sizeof(float) * static_cast<std::size_t>(pc) * HW);
        c0 += pc;
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear: x [N,Fin] * w [Fout,Fin]^T + b
// ---------------------------------------------------------------------------
inline Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    require_shape(input.ndim() == 2, "linear expects a 2-d input, got " + shape_str(input.shape()));
    require_shape(weight.ndim() == 2, "linear expects a 2-d weight, got " + shape_str(weight.shape()));
    const int N = input.dim(0), Fin = input.dim(1), Fout = weight.dim(0);
    require_shape(weight.dim(1) == Fin, "linear: input features " + std::to_string(Fin) +
                                            " vs weight features " + std::to_string(weight.dim(1)));
    if (bias.defined()) require_shape(bias.numel() == Fout, "linear bias size mismatch");
    auto x = input.ptr();
    auto w = weight.ptr();
    auto b = bias.defined() ? bias.ptr() : nullptr;
    std::vector<TensorImplPtr> parents{x, w};
    if (b) parents.push_back(b);
    Tensor out = detail::make_result({N, Fout}, parents, [x, w, b, N, Fin, Fout](TensorImpl& self) {
        if (x->on_tape()) {
            x->ensure_grad();
            detail::gemm_nn(self.grad.data(), w->data.data(), x->grad.data(), N, Fin, Fout, true);
        }
        if (w->on_tape()) {
            w->ensure_grad();
            detail::gemm_tn(self.grad.data(), x->data.data(), w->grad.data(), Fout, Fin, N, true);
        }
        if (b && b->on_tape()) {
            b->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int f = 0; f < Fout; ++f) b->grad[f] += self.grad[static_cast<std::size_t>(n) * Fout + f];
        }
    });
    detail::gemm_nt(input.data().data(), weight.data().data(), out.data().data(), N, Fout, Fin, false);
    if (bias.defined()) {
        float* y = out.data().data();
        const float* bv = bias.data().data();
        for (int n = 0; n < N; ++n)
            for (int f = 0; f < Fout; ++f) y[static_cast<std::size_t>(n) * Fout + f] += bv[f];
    }
    return out;
}

inline Tensor linear(const Tensor& input, const Tensor& weight) { return linear(input, weight, Tensor()); }

// ---------------------------------------------------------------------------
// batchnorm2d with running statistics
// ---------------------------------------------------------------------------
inline Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                          Tensor& running_mean, Tensor& running_var, bool training,
                          float momentum = 0.1f, float eps = 1e-5f) {
    detail::check_nchw(input, "batchnorm2d");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    require_shape(gamma.numel() == C && beta.numel() == C && running_mean.numel() == C && running_var.numel() == C,
                  "batchnorm2d: parameter extents do not match " + std::to_string(C) + " channels");
    const int HW = H * W;
    const std::int64_t m = static_cast<std::int64_t>(N) * HW;

    auto x = input.ptr();
    auto g = gamma.ptr();
    auto be = beta.ptr();

    if (training) {
        require_shape(m > 1, "batchnorm2d training needs more than one value per channel");
        auto mean = std::make_shared<std::vector<float>>(static_cast<std::size_t>(C));
        auto var = std::make_shared<std::vector<float>>(static_cast<std::size_t>(C));
        const float* xd = input.data().data();
#pragma omp parallel for schedule(static)
        for (int c = 0; c < C; ++c) {
            float acc = 0.0f;
            for (int n = 0; n < N; ++n) {
                const float* xc = xd + (static_cast<std::size_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) acc += xc[i];
            }
            const float mu = acc / static_cast<float>(m);
            float vacc = 0.0f;
            for (int n = 0; n < N; ++n) {
                const float* xc = xd + (static_cast<std::size_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) {
                    const float d = xc[i] - mu;
                    vacc += d * d;
                }
            }
            (*mean)[static_cast<std::size_t>(c)] = mu;
            (*var)[static_cast<std::size_t>(c)] = vacc / static_cast<float>(m);
        }
        {
            // running stats use the unbiased variance, torch-style
            float* rm = running_mean.data().data();
            float* rv = running_var.data().data();
            const float unbias = static_cast<float>(m) / static_cast<float>(m - 1);
            for (int c = 0; c < C; ++c) {
                rm[c] = (1.0f - momentum) * rm[c] + momentum * (*mean)[static_cast<std::size_t>(c)];
                rv[c] = (1.0f - momentum) * rv[c] + momentum * (*var)[static_cast<std::size_t>(c)] * unbias;
            }
        }

        Tensor out = detail::make_result(input.shape(), {x, g, be}, [x, g, be, mean, var, N, C, HW, m,
                                                                     eps](TensorImpl& self) {
            // standard train-mode batchnorm backward
            const float* xd = x->data.data();
            const bool need_dx = x->on_tape();
            if (need_dx) x->ensure_grad();
            if (g->on_tape()) g->ensure_grad();
            if (be->on_tape()) be->ensure_grad();
#pragma omp parallel for schedule(static)
            for (int c = 0; c < C; ++c) {
                const float mu = (*mean)[static_cast<std::size_t>(c)];
                const float inv_std = 1.0f / std::sqrt((*var)[static_cast<std::size_t>(c)] + eps);
                const float gv = g->data[static_cast<std::size_t>(c)];
                float sum_dy = 0.0f, sum_dy_xhat = 0.0f;
                for (int n = 0; n < N; ++n) {
                    const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                    for (int i = 0; i < HW; ++i) {
                        const float dy = self.grad[base + i];
                        sum_dy += dy;
                        sum_dy_xhat += dy * (xd[base + i] - mu) * inv_std;
                    }
                }
                if (g->on_tape()) g->grad[static_cast<std::size_t>(c)] += sum_dy_xhat;
                if (be->on_tape()) be->grad[static_cast<std::size_t>(c)] += sum_dy;
                if (need_dx) {
                    const float inv_m = 1.0f / static_cast<float>(m);
                    for (int n = 0; n < N; ++n) {
                        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                        for (int i = 0; i < HW; ++i) {
                            const float xhat = (xd[base + i] - mu) * inv_std;
                            x->grad[base + i] += gv * inv_std *
                                                 (self.grad[base + i] - inv_m * sum_dy - inv_m * xhat * sum_dy_xhat);
                        }
                    }
                }
            }
        });
        float* y = out.data().data();
        const float* gv = gamma.data().data();
        const float* bv = beta.data().data();
#pragma omp parallel for schedule(static)
        for (int c = 0; c < C; ++c) {
            const float mu = (*mean)[static_cast<std::size_t>(c)];
            const float inv_std = 1.0f / std::sqrt((*var)[static_cast<std::size_t>(c)] + eps);
            for (int n = 0; n < N; ++n) {
                const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) y[base + i] = gv[c] * (xd[base + i] - mu) * inv_std + bv[c];
            }
        }
        return out;
    }

    // eval mode: affine transform with frozen statistics
    auto rm = std::make_shared<std::vector<float>>(running_mean.data().begin(), running_mean.data().end());
    auto rv = std::make_shared<std::vector<float>>(running_var.data().begin(), running_var.data().end());
    Tensor out = detail::make_result(input.shape(), {x, g, be}, [x, g, be, rm, rv, N, C, HW, eps](TensorImpl& self) {
        const bool need_dx = x->on_tape();
        if (need_dx) x->ensure_grad();
        if (g->on_tape()) g->ensure_grad();
        if (be->on_tape()) be->ensure_grad();
        for (int c = 0; c < C; ++c) {
            const float inv_std = 1.0f / std::sqrt((*rv)[static_cast<std::size_t>(c)] + eps);
            const float mu = (*rm)[static_cast<std::size_t>(c)];
            const float gv = g->data[static_cast<std::size_t>(c)];
            for (int n = 0; n < N; ++n) {
                const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) {
                    const float dy = self.grad[base + i];
                    if (need_dx) x->grad[base + i] += dy * gv * inv_std;
                    if (g->on_tape())
                        g->grad[static_cast<std::size_t>(c)] += dy * (x->data[base + i] - mu) * inv_std;
                    if (be->on_tape()) be->grad[static_cast<std::size_t>(c)] += dy;
                }
            }
        }
    });
    float* y = out.data().data();
    const float* xd = input.data().data();
    const float* gv = gamma.data().data();
    const float* bv = beta.data().data();
    const float* rmv = running_mean.data().data();
    const float* rvv = running_var.data().data();
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        const float inv_std = 1.0f / std::sqrt(rvv[c] + eps);
        for (int n = 0; n < N; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) y[base + i] = gv[c] * (xd[base + i] - rmv[c]) * inv_std + bv[c];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape and reduction helpers
// ---------------------------------------------------------------------------
inline Tensor reshape(const Tensor& input, Shape new_shape) {
    require_shape(numel(new_shape) == input.numel(),
                  "reshape: cannot view " + shape_str(input.shape()) + " as " + shape_str(new_shape));
    auto x = input.ptr();
    Tensor out = detail::make_result(std::move(new_shape), {x}, [x](TensorImpl& self) {
        if (!x->on_tape()) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) x->grad[i] += self.grad[i];
    });
    std::memcpy(out.data().data(), input.data().data(), sizeof(float) * input.data().size());
    return out;
}

inline Tensor sum_all(const Tensor& input) {
    auto x = input.ptr();
    Tensor out = detail::make_result({1}, {x}, [x](TensorImpl& self) {
        if (!x->on_tape()) return;
        x->ensure_grad();
        const float gv = self.grad[0];
        for (auto& gi : x->grad) gi += gv;
    });
    float acc = 0.0f;
    for (float v : input.data()) acc += v;
    out.data()[0] = acc;
    return out;
}

inline Tensor mean_all(const Tensor& input) {
    auto x = input.ptr();
    const float inv = 1.0f / static_cast<float>(input.numel());
    Tensor out = detail::make_result({1}, {x}, [x, inv](TensorImpl& self) {
        if (!x->on_tape()) return;
        x->ensure_grad();
        const float gv = self.grad[0] * inv;
        for (auto& gi : x->grad) gi += gv;
    });
    float acc = 0.0f;
    for (float v : input.data()) acc += v;
    out.data()[0] = acc * inv;
    return out;
}

// sum(x_i * w_i) with constant weights; handy as a scalarizer in checks
inline Tensor weighted_sum(const Tensor& input, std::vector<float> weights) {
    require_shape(static_cast<std::int64_t>(weights.size()) == input.numel(),
                  "weighted_sum: weight count mismatch");
    auto x = input.ptr();
    auto ws = std::make_shared<std::vector<float>>(std::move(weights));
    Tensor out = detail::make_result({1}, {x}, [x, ws](TensorImpl& self) {
        if (!x->on_tape()) return;
        x->ensure_grad();
        const float gv = self.grad[0];
        for (std::size_t i = 0; i < ws->size(); ++i) x->grad[i] += gv * (*ws)[i];
    });
    float acc = 0.0f;
    for (std::size_t i = 0; i < ws->size(); ++i) acc += input.data()[i] * (*ws)[i];
    out.data()[0] = acc;
    return out;
}

}  // namespace mitoseg
