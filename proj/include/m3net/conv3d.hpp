#pragma once

#include <cstdint>
#include <vector>

#include "m3net/ops.hpp"
#include "m3net/tape.hpp"

// 3-d convolution and per-sample channel normalization. Activation layout is
// channels-last [B, X, Y, Z, C]; weights are [K, K, K, Cin, Cout] so the inner
// accumulation runs over the contiguous Cout axis.

namespace m3net::ops {

struct Conv3dDims {
    std::size_t B, X, Y, Z, Cin, K, Cout, stride, pad;
    std::size_t OX, OY, OZ;
};

inline Conv3dDims conv3d_dims(const Shape& xs, const Shape& ws, std::size_t stride) {
    if (xs.size() != 5 || ws.size() != 5) throw ShapeError("conv3d: x [B,X,Y,Z,C], w [K,K,K,Ci,Co]");
    if (ws[0] != ws[1] || ws[1] != ws[2]) throw ShapeError("conv3d: kernel must be cubic");
    if (ws[3] != xs[4]) throw ShapeError("conv3d: channel mismatch");
    if (stride == 0) throw ShapeError("conv3d: stride must be positive");
    Conv3dDims d{};
    d.B = xs[0]; d.X = xs[1]; d.Y = xs[2]; d.Z = xs[3]; d.Cin = xs[4];
    d.K = ws[0]; d.Cout = ws[4];
    d.stride = stride;
    d.pad = d.K / 2;
    auto osz = [&](std::size_t in) {
        const std::size_t padded = in + 2 * d.pad;
        if (padded < d.K) throw ShapeError("conv3d: input smaller than kernel");
        return (padded - d.K) / stride + 1;
    };
    d.OX = osz(d.X); d.OY = osz(d.Y); d.OZ = osz(d.Z);
    return d;
}

template <typename T>
Var<T> conv3d(Var<T> x, Var<T> w, Var<T> bias, std::size_t stride) {
    require_same_tape(x, w, "conv3d");
    const Conv3dDims d = conv3d_dims(x.shape(), w.shape(), stride);
    if (bias.shape() != Shape{d.Cout}) throw ShapeError("conv3d: bias must be [Cout]");

    TensorData<T> out({d.B, d.OX, d.OY, d.OZ, d.Cout});
    const T* px = x.value().data.data();
    const T* pw = w.value().data.data();
    const T* pb = bias.value().data.data();
    T* py = out.data.data();

    const std::int64_t units = static_cast<std::int64_t>(d.B * d.OX);
#pragma omp parallel for schedule(static)
    for (std::int64_t u = 0; u < units; ++u) {
        const std::size_t b = static_cast<std::size_t>(u) / d.OX;
        const std::size_t ox = static_cast<std::size_t>(u) % d.OX;
        std::vector<T> acc(d.Cout);
        for (std::size_t oy = 0; oy < d.OY; ++oy) {
            for (std::size_t oz = 0; oz < d.OZ; ++oz) {
                for (std::size_t c = 0; c < d.Cout; ++c) acc[c] = pb[c];
                for (std::size_t kx = 0; kx < d.K; ++kx) {
                    const std::int64_t ix = static_cast<std::int64_t>(ox * d.stride + kx) -
                                            static_cast<std::int64_t>(d.pad);
                    if (ix < 0 || ix >= static_cast<std::int64_t>(d.X)) continue;
                    for (std::size_t ky = 0; ky < d.K; ++ky) {
                        const std::int64_t iy = static_cast<std::int64_t>(oy * d.stride + ky) -
                                                static_cast<std::int64_t>(d.pad);
                        if (iy < 0 || iy >= static_cast<std::int64_t>(d.Y)) continue;
                        for (std::size_t kz = 0; kz < d.K; ++kz) {
                            const std::int64_t iz =
                                static_cast<std::int64_t>(oz * d.stride + kz) -
                                static_cast<std::int64_t>(d.pad);
                            if (iz < 0 || iz >= static_cast<std::int64_t>(d.Z)) continue;
                            const T* xp =
                                px + (((b * d.X + ix) * d.Y + iy) * d.Z + iz) * d.Cin;
                            const T* wp = pw + ((kx * d.K + ky) * d.K + kz) * d.Cin * d.Cout;
                            for (std::size_t ci = 0; ci < d.Cin; ++ci) {
                                const T v = xp[ci];
                                const T* wr = wp + ci * d.Cout;
                                for (std::size_t co = 0; co < d.Cout; ++co)
                                    acc[co] += v * wr[co];
                            }
                        }
                    }
                }
                T* yp = py + (((b * d.OX + ox) * d.OY + oy) * d.OZ + oz) * d.Cout;
                for (std::size_t c = 0; c < d.Cout; ++c) yp[c] = acc[c];
            }
        }
    }

    return x.tape->make(
        std::move(out), {x.id, w.id, bias.id},
        [ix_ = x.id, iw = w.id, ib = bias.id, d](Tape<T>& t, typename Tape<T>::Node& n) {
            const T* g = n.grad.data.data();
            const T* px = t.node(ix_).value.data.data();
            const T* pw = t.node(iw).value.data.data();

            if (t.node(ib).requires_grad) {
                std::vector<T> gb(d.Cout, T(0));
                const std::size_t vox = d.B * d.OX * d.OY * d.OZ;
                for (std::size_t v = 0; v < vox; ++v)
                    for (std::size_t c = 0; c < d.Cout; ++c) gb[c] += g[v * d.Cout + c];
                t.accumulate(ib, gb.data(), gb.size());
            }

            if (t.node(iw).requires_grad) {
                std::vector<T> gw(d.K * d.K * d.K * d.Cin * d.Cout, T(0));
                const std::int64_t kk_total = static_cast<std::int64_t>(d.K * d.K * d.K);
#pragma omp parallel for schedule(static)
                for (std::int64_t kk = 0; kk < kk_total; ++kk) {
                    const std::size_t kx = static_cast<std::size_t>(kk) / (d.K * d.K);
                    const std::size_t ky = (static_cast<std::size_t>(kk) / d.K) % d.K;
                    const std::size_t kz = static_cast<std::size_t>(kk) % d.K;
                    T* gwp = gw.data() + static_cast<std::size_t>(kk) * d.Cin * d.Cout;
                    for (std::size_t b = 0; b < d.B; ++b)
                        for (std::size_t ox = 0; ox < d.OX; ++ox) {
                            const std::int64_t ix =
                                static_cast<std::int64_t>(ox * d.stride + kx) -
                                static_cast<std::int64_t>(d.pad);
                            if (ix < 0 || ix >= static_cast<std::int64_t>(d.X)) continue;
                            for (std::size_t oy = 0; oy < d.OY; ++oy) {
                                const std::int64_t iy =
                                    static_cast<std::int64_t>(oy * d.stride + ky) -
                                    static_cast<std::int64_t>(d.pad);
                                if (iy < 0 || iy >= static_cast<std::int64_t>(d.Y)) continue;
                                for (std::size_t oz = 0; oz < d.OZ; ++oz) {
                                    const std::int64_t iz =
                                        static_cast<std::int64_t>(oz * d.stride + kz) -
                                        static_cast<std::int64_t>(d.pad);
                                    if (iz < 0 || iz >= static_cast<std::int64_t>(d.Z)) continue;
                                    const T* xp =
                                        px + (((b * d.X + ix) * d.Y + iy) * d.Z + iz) * d.Cin;
                                    const T* gp =
                                        g + (((b * d.OX + ox) * d.OY + oy) * d.OZ + oz) * d.Cout;
                                    for (std::size_t ci = 0; ci < d.Cin; ++ci) {
                                        const T v = xp[ci];
                                        T* gr = gwp + ci * d.Cout;
                                        for (std::size_t co = 0; co < d.Cout; ++co)
                                            gr[co] += v * gp[co];
                                    }
                                }
                            }
                        }
                }
                t.accumulate(iw, gw.data(), gw.size());
            }

            if (t.node(ix_).requires_grad) {
                std::vector<T> gx(d.B * d.X * d.Y * d.Z * d.Cin, T(0));
#pragma omp parallel for schedule(static)
                for (std::int64_t b = 0; b < static_cast<std::int64_t>(d.B); ++b) {
                    for (std::size_t ox = 0; ox < d.OX; ++ox)
                        for (std::size_t oy = 0; oy < d.OY; ++oy)
                            for (std::size_t oz = 0; oz < d.OZ; ++oz) {
                                const T* gp =
                                    g + (((static_cast<std::size_t>(b) * d.OX + ox) * d.OY + oy) *
                                             d.OZ +
                                         oz) *
                                            d.Cout;
                                for (std::size_t kx = 0; kx < d.K; ++kx) {
                                    const std::int64_t ix =
                                        static_cast<std::int64_t>(ox * d.stride + kx) -
                                        static_cast<std::int64_t>(d.pad);
                                    if (ix < 0 || ix >= static_cast<std::int64_t>(d.X)) continue;
                                    for (std::size_t ky = 0; ky < d.K; ++ky) {
                                        const std::int64_t iy =
                                            static_cast<std::int64_t>(oy * d.stride + ky) -
                                            static_cast<std::int64_t>(d.pad);
                                        if (iy < 0 || iy >= static_cast<std::int64_t>(d.Y)) continue;
                                        for (std::size_t kz = 0; kz < d.K; ++kz) {
                                            const std::int64_t iz =
                                                static_cast<std::int64_t>(oz * d.stride + kz) -
                                                static_cast<std::int64_t>(d.pad);
                                            if (iz < 0 || iz >= static_cast<std::int64_t>(d.Z))
                                                continue;
                                            const T* wp =
                                                pw +
                                                ((kx * d.K + ky) * d.K + kz) * d.Cin * d.Cout;
                                            T* gxp = gx.data() +
                                                     (((static_cast<std::size_t>(b) * d.X + ix) *
                                                           d.Y +
                                                       iy) *
                                                          d.Z +
                                                      iz) *
                                                         d.Cin;
                                            for (std::size_t ci = 0; ci < d.Cin; ++ci) {
                                                const T* wr = wp + ci * d.Cout;
                                                T acc = T(0);
                                                for (std::size_t co = 0; co < d.Cout; ++co)
                                                    acc += wr[co] * gp[co];
                                                gxp[ci] += acc;
                                            }
                                        }
                                    }
                                }
                            }
                }
                t.accumulate(ix_, gx.data(), gx.size());
            }
        },
        "conv3d");
}

// Per-sample, per-channel normalization over spatial positions with affine
// parameters; avoids batch-size coupling entirely.
template <typename T>
Var<T> instance_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    require_same_tape(x, gamma, "instance_norm");
    const auto& s = x.shape();
    if (s.size() != 5) throw ShapeError("instance_norm: need [B,X,Y,Z,C]");
    const std::size_t B = s[0], N = s[1] * s[2] * s[3], C = s[4];
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
        throw ShapeError("instance_norm: gamma/beta must be [C]");

    TensorData<T> out(s);
    std::vector<T> mu(B * C), inv_sigma(B * C);
    const T* px = x.value().data.data();
    const T* pg = gamma.value().data.data();
    const T* pb = beta.value().data.data();
#pragma omp parallel for schedule(static) collapse(2)
    for (std::int64_t bi = 0; bi < static_cast<std::int64_t>(B); ++bi)
        for (std::int64_t ci = 0; ci < static_cast<std::int64_t>(C); ++ci) {
            const std::size_t b = static_cast<std::size_t>(bi);
            const std::size_t c = static_cast<std::size_t>(ci);
            const T* xb = px + b * N * C;
            T* yb = out.data.data() + b * N * C;
            T m = T(0);
            for (std::size_t i = 0; i < N; ++i) m += xb[i * C + c];
            m /= static_cast<T>(N);
            T var = T(0);
            for (std::size_t i = 0; i < N; ++i) {
                const T dv = xb[i * C + c] - m;
                var += dv * dv;
            }
            var /= static_cast<T>(N);
            const T is = T(1) / std::sqrt(var + eps);
            mu[b * C + c] = m;
            inv_sigma[b * C + c] = is;
            const T gc = pg[c], bc = pb[c];
            for (std::size_t i = 0; i < N; ++i)
                yb[i * C + c] = gc * ((xb[i * C + c] - m) * is) + bc;
        }

    return x.tape->make(
        std::move(out), {x.id, gamma.id, beta.id},
        [ix = x.id, ig = gamma.id, ibt = beta.id, mu = std::move(mu),
         inv_sigma = std::move(inv_sigma), B, N, C](Tape<T>& t, typename Tape<T>::Node& n) {
            const T* px = t.node(ix).value.data.data();
            const T* pg = t.node(ig).value.data.data();
            const T* g = n.grad.data.data();
            std::vector<T> gg(C, T(0)), gb(C, T(0));
            std::vector<T> gx;
            const bool need_gx = t.node(ix).requires_grad;
            if (need_gx) gx.assign(B * N * C, T(0));
            for (std::size_t b = 0; b < B; ++b) {
                const T* xb = px + b * N * C;
                const T* gyb = g + b * N * C;
                for (std::size_t c = 0; c < C; ++c) {
                    const T m = mu[b * C + c], is = inv_sigma[b * C + c], gc = pg[c];
                    T m1 = T(0), m2 = T(0);
                    for (std::size_t i = 0; i < N; ++i) {
                        const T xh = (xb[i * C + c] - m) * is;
                        const T gy = gyb[i * C + c];
                        m1 += gy;
                        m2 += gy * xh;
                        gg[c] += gy * xh;
                        gb[c] += gy;
                    }
                    if (!need_gx) continue;
                    m1 /= static_cast<T>(N);
                    m2 /= static_cast<T>(N);
                    T* gxb = gx.data() + b * N * C;
                    for (std::size_t i = 0; i < N; ++i) {
                        const T xh = (xb[i * C + c] - m) * is;
                        gxb[i * C + c] = gc * is * (gyb[i * C + c] - m1 - xh * m2);
                    }
                }
            }
            if (need_gx) t.accumulate(ix, gx.data(), gx.size());
            t.accumulate(ig, gg.data(), gg.size());
            t.accumulate(ibt, gb.data(), gb.size());
        },
        "instance_norm");
}

}  // namespace m3net::ops
