#pragma once

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <cstddef>
#include <vector>

#include "m3net/svd.hpp"
#include "m3net/tape.hpp"
#include "m3net/tensor.hpp"

// Elementwise / linear-algebra primitives with reverse-mode rules. Every op
// records one node; backward lambdas accumulate into input grads.

namespace m3net::ops {

template <typename T>
inline void require_same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.tape != b.tape) throw ShapeError(std::string(op) + ": vars from different tapes");
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same_tape(a, b, "add");
    check_same_shape(a.value(), b.value(), "add");
    TensorData<T> out = a.value();
    const T* pb = b.value().data.data();
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += pb[i];
    return a.tape->make(
        std::move(out), {a.id, b.id},
        [ia = a.id, ib = b.id](Tape<T>& t, typename Tape<T>::Node& n) {
            t.accumulate(ia, n.grad.data.data(), n.grad.numel());
            t.accumulate(ib, n.grad.data.data(), n.grad.numel());
        },
        "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    require_same_tape(a, b, "sub");
    check_same_shape(a.value(), b.value(), "sub");
    TensorData<T> out = a.value();
    const T* pb = b.value().data.data();
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= pb[i];
    return a.tape->make(
        std::move(out), {a.id, b.id},
        [ia = a.id, ib = b.id](Tape<T>& t, typename Tape<T>::Node& n) {
            t.accumulate(ia, n.grad.data.data(), n.grad.numel());
            std::vector<T> neg(n.grad.numel());
            for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -n.grad.data[i];
            t.accumulate(ib, neg.data(), neg.size());
        },
        "sub");
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    require_same_tape(a, b, "mul");
    check_same_shape(a.value(), b.value(), "mul");
    TensorData<T> out = a.value();
    const T* pb = b.value().data.data();
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= pb[i];
    return a.tape->make(
        std::move(out), {a.id, b.id},
        [ia = a.id, ib = b.id](Tape<T>& t, typename Tape<T>::Node& n) {
            const auto& va = t.node(ia).value;
            const auto& vb = t.node(ib).value;
            std::vector<T> tmp(n.grad.numel());
            for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = n.grad.data[i] * vb.data[i];
            t.accumulate(ia, tmp.data(), tmp.size());
            for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = n.grad.data[i] * va.data[i];
            t.accumulate(ib, tmp.data(), tmp.size());
        },
        "mul");
}

template <typename T>
Var<T> neg(Var<T> a) {
    TensorData<T> out = a.value();
    for (auto& v : out.data) v = -v;
    return a.tape->make(
        std::move(out), {a.id},
        [ia = a.id](Tape<T>& t, typename Tape<T>::Node& n) {
            std::vector<T> tmp(n.grad.numel());
            for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = -n.grad.data[i];
            t.accumulate(ia, tmp.data(), tmp.size());
        },
        "neg");
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
    TensorData<T> out = a.value();
    for (auto& v : out.data) v += c;
    return a.tape->make(
        std::move(out), {a.id},
        [ia = a.id](Tape<T>& t, typename Tape<T>::Node& n) {
            t.accumulate(ia, n.grad.data.data(), n.grad.numel());
        },
        "add_scalar");
}

template <typename T>
Var<T> mul_scalar(Var<T> a, T c) {
    TensorData<T> out = a.value();
    for (auto& v : out.data) v *= c;
    return a.tape->make(
        std::move(out), {a.id},
        [ia = a.id, c](Tape<T>& t, typename Tape<T>::Node& n) {
            std::vector<T> tmp(n.grad.numel());
            for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = n.grad.data[i] * c;
            t.accumulate(ia, tmp.data(), tmp.size());
        },
        "mul_scalar");
}

template <typename T>
Var<T> exp_op(Var<T> a) {
    TensorData<T> out = a.value();
    for (auto& v : out.data) v = std::exp(v);
    return a.tape->make(
        std::move(out), {a.id},
        [ia = a.id](Tape<T>& t, typename Tape<T>::Node& n) {
            std::vector<T> tmp(n.grad.numel());
            for (std::size_t i = 0; i < tmp.size(); ++i)
                tmp[i] = n.grad.data[i] * n.value.data[i];
            t.accumulate(ia, tmp.data(), tmp.size());
        },
        "exp");
}

// y = x * s where s is a [1] tensor (e.g. a learnable temperature factor).
template <typename T>
Var<T> mul_scalar_node(Var<T> x, Var<T> s) {
    require_same_tape(x, s, "mul_scalar_node");
    if (s.numel() != 1) throw ShapeError("mul_scalar_node: scale must be a [1] tensor");
    const T sv = s.value().data[0];
    TensorData<T> out = x.value();
    for (auto& v : out.data) v *= sv;
    return x.tape->make(
        std::move(out), {x.id, s.id},
        [ix = x.id, is = s.id](Tape<T>& t, typename Tape<T>::Node& n) {
            const T sval = t.node(is).value.data[0];
            const auto& xv = t.node(ix).value;
            std::vector<T> tmp(n.grad.numel());
            T ds = T(0);
            for (std::size_t i = 0; i < tmp.size(); ++i) {
                tmp[i] = n.grad.data[i] * sval;
                ds += n.grad.data[i] * xv.data[i];
            }
            t.accumulate(ix, tmp.data(), tmp.size());
            t.accumulate(is, &ds, 1);
        },
        "mul_scalar_node");
}

template <typename T>
Var<T> gelu(Var<T> a) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt2pi = T(0.39894228040143267794);
    auto erf_t = [](T x) {
        if constexpr (std::is_same_v<T, float>) return erff(x);
        else return std::erf(x);
    };
    TensorData<T> out = a.value();
    const std::int64_t n_elts = static_cast<std::int64_t>(out.numel());
#pragma omp parallel for schedule(static) if (n_elts > 65536)
    for (std::int64_t i = 0; i < n_elts; ++i) {
        T& v = out.data[static_cast<std::size_t>(i)];
        v = T(0.5) * v * (T(1) + erf_t(v * inv_sqrt2));
    }
    return a.tape->make(
        std::move(out), {a.id},
        [ia = a.id, erf_t](Tape<T>& t, typename Tape<T>::Node& n) {
            auto exp_t = [](T x) {
                if constexpr (std::is_same_v<T, float>) return expf(x);
                else return std::exp(x);
            };
            const auto& xv = t.node(ia).value;
            std::vector<T> tmp(n.grad.numel());
            const std::int64_t n_elts = static_cast<std::int64_t>(tmp.size());
#pragma omp parallel for schedule(static) if (n_elts > 65536)
            for (std::int64_t i = 0; i < n_elts; ++i) {
                const T x = xv.data[static_cast<std::size_t>(i)];
                const T cdf = T(0.5) * (T(1) + erf_t(x * inv_sqrt2));
                const T pdf = inv_sqrt2pi * exp_t(T(-0.5) * x * x);
                tmp[static_cast<std::size_t>(i)] = n.grad.data[static_cast<std::size_t>(i)] * (cdf + x * pdf);
            }
            t.accumulate(ia, tmp.data(), tmp.size());
        },
        "gelu");
}

// ------------------------------------------------------------- shape plumbing

template <typename T>
Var<T> reshape(Var<T> a, Shape s) {
    if (shape_numel(s) != a.numel())
        throw ShapeError("reshape: numel mismatch " + shape_str(a.shape()) + " -> " +
                         shape_str(s));
    TensorData<T> out(std::move(s), a.value().data);
    return a.tape->make(
        std::move(out), {a.id},
        [ia = a.id](Tape<T>& t, typename Tape<T>::Node& n) {
            t.accumulate(ia, n.grad.data.data(), n.grad.numel());
        },
        "reshape");
}

template <typename T>
Var<T> concat_axis1(Var<T> a, Var<T> b) {
    require_same_tape(a, b, "concat_axis1");
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[2])
        throw ShapeError("concat_axis1: need [B,L,D] with matching B and D");
    const std::size_t B = sa[0], La = sa[1], Lb = sb[1], D = sa[2];
    TensorData<T> out({B, La + Lb, D});
    const T* pa = a.value().data.data();
    const T* pb = b.value().data.data();
    for (std::size_t bi = 0; bi < B; ++bi) {
        std::copy(pa + bi * La * D, pa + (bi + 1) * La * D,
                  out.data.begin() + bi * (La + Lb) * D);
        std::copy(pb + bi * Lb * D, pb + (bi + 1) * Lb * D,
                  out.data.begin() + bi * (La + Lb) * D + La * D);
    }
    return a.tape->make(
        std::move(out), {a.id, b.id},
        [ia = a.id, ib = b.id, B, La, Lb, D](Tape<T>& t, typename Tape<T>::Node& n) {
            std::vector<T> ga(B * La * D), gb(B * Lb * D);
            for (std::size_t bi = 0; bi < B; ++bi) {
                const T* g = n.grad.data.data() + bi * (La + Lb) * D;
                std::copy(g, g + La * D, ga.begin() + bi * La * D);
                std::copy(g + La * D, g + (La + Lb) * D, gb.begin() + bi * Lb * D);
            }
            t.accumulate(ia, ga.data(), ga.size());
            t.accumulate(ib, gb.data(), gb.size());
        },
        "concat_axis1");
}

template <typename T>
Var<T> slice_lastdim(Var<T> a, std::size_t off, std::size_t len) {
    const auto& s = a.shape();
    const std::size_t D = s.back();
    if (off + len > D) throw ShapeError("slice_lastdim: out of range");
    const std::size_t rows = a.numel() / D;
    Shape os = s;
    os.back() = len;
    TensorData<T> out(os);
    const T* p = a.value().data.data();
    for (std::size_t r = 0; r < rows; ++r)
        std::copy(p + r * D + off, p + r * D + off + len, out.data.begin() + r * len);
    return a.tape->make(
        std::move(out), {a.id},
        [ia = a.id, off, len, D, rows](Tape<T>& t, typename Tape<T>::Node& n) {
            std::vector<T> g(rows * D, T(0));
            for (std::size_t r = 0; r < rows; ++r)
                std::copy(n.grad.data.begin() + r * len, n.grad.data.begin() + (r + 1) * len,
                          g.begin() + r * D + off);
            t.accumulate(ia, g.data(), g.size());
        },
        "slice_lastdim");
}

template <typename T>
Var<T> concat_lastdim(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_lastdim: empty");
    Tape<T>* tape = parts[0].tape;
    std::size_t D = 0;
    for (const auto& p : parts) D += p.shape().back();
    Shape os = parts[0].shape();
    const std::size_t rows = parts[0].numel() / parts[0].shape().back();
    os.back() = D;
    TensorData<T> out(os);
    std::vector<std::size_t> ids, lens;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t len = p.shape().back();
        const T* src = p.value().data.data();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy(src + r * len, src + (r + 1) * len, out.data.begin() + r * D + off);
        ids.push_back(p.id);
        lens.push_back(len);
        off += len;
    }
    return tape->make(
        std::move(out), ids,
        [ids, lens, D, rows](Tape<T>& t, typename Tape<T>::Node& n) {
            std::size_t o = 0;
            for (std::size_t k = 0; k < ids.size(); ++k) {
                std::vector<T> g(rows * lens[k]);
                for (std::size_t r = 0; r < rows; ++r)
                    std::copy(n.grad.data.begin() + r * D + o,
                              n.grad.data.begin() + r * D + o + lens[k],
                              g.begin() + r * lens[k]);
                t.accumulate(ids[k], g.data(), g.size());
                o += lens[k];
            }
        },
        "concat_lastdim");
}

// --------------------------------------------------------------- dense linear

template <typename T>
Var<T> transpose2d(Var<T> a) {
    const auto& s = a.shape();
    if (s.size() != 2) throw ShapeError("transpose2d: need matrix");
    const std::size_t m = s[0], n = s[1];
    TensorData<T> out({n, m});
    const T* p = a.value().data.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = p[i * n + j];
    return a.tape->make(
        std::move(out), {a.id},
        [ia = a.id, m, n](Tape<T>& t, typename Tape<T>::Node& n_) {
            std::vector<T> g(m * n);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[i * n + j] = n_.grad.data[j * m + i];
            t.accumulate(ia, g.data(), g.size());
        },
        "transpose2d");
}

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* c = C + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T a = A[i * k + p];
            const T* b = B + p * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = T(0);
            const T* a = A + i * k;
            const T* b = B + j * k;
            for (std::size_t p = 0; p < k; ++p) acc += a[p] * b[p];
            C[i * n + j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* a = A + i * k;
        const T* b = B + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[p];
            T* c = C + p * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    require_same_tape(a, b, "matmul");
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        throw ShapeError("matmul: incompatible " + shape_str(sa) + " x " + shape_str(sb));
    const std::size_t m = sa[0], k = sa[1], n = sb[1];
    TensorData<T> out({m, n});
    detail::gemm_acc(a.value().data.data(), b.value().data.data(), out.data.data(), m, k, n);
    return a.tape->make(
        std::move(out), {a.id, b.id},
        [ia = a.id, ib = b.id, m, k, n](Tape<T>& t, typename Tape<T>::Node& nd) {
            const T* g = nd.grad.data.data();
            const auto& va = t.node(ia).value;
            const auto& vb = t.node(ib).value;
            if (t.node(ia).requires_grad) {
                std::vector<T> ga(m * k, T(0));
                detail::gemm_nt_acc(g, vb.data.data(), ga.data(), m, n, k);
                t.accumulate(ia, ga.data(), ga.size());
            }
            if (t.node(ib).requires_grad) {
                std::vector<T> gb(k * n, T(0));
                detail::gemm_tn_acc(va.data.data(), g, gb.data(), m, k, n);
                t.accumulate(ib, gb.data(), gb.size());
            }
        },
        "matmul");
}

// Batched A[b,m,k] x B[b,k,n].
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b) {
    require_same_tape(a, b, "bmm");
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1])
        throw ShapeError("bmm: incompatible " + shape_str(sa) + " x " + shape_str(sb));
    const std::size_t B = sa[0], m = sa[1], k = sa[2], n = sb[2];
    TensorData<T> out({B, m, n});
    for (std::size_t i = 0; i < B; ++i)
        detail::gemm_acc(a.value().data.data() + i * m * k, b.value().data.data() + i * k * n,
                         out.data.data() + i * m * n, m, k, n);
    return a.tape->make(
        std::move(out), {a.id, b.id},
        [ia = a.id, ib = b.id, B, m, k, n](Tape<T>& t, typename Tape<T>::Node& nd) {
            const auto& va = t.node(ia).value;
            const auto& vb = t.node(ib).value;
            if (t.node(ia).requires_grad) {
                std::vector<T> ga(B * m * k, T(0));
                for (std::size_t i = 0; i < B; ++i)
                    detail::gemm_nt_acc(nd.grad.data.data() + i * m * n,
                                        vb.data.data() + i * k * n, ga.data() + i * m * k, m, n,
                                        k);
                t.accumulate(ia, ga.data(), ga.size());
            }
            if (t.node(ib).requires_grad) {
                std::vector<T> gb(B * k * n, T(0));
                for (std::size_t i = 0; i < B; ++i)
                    detail::gemm_tn_acc(va.data.data() + i * m * k,
                                        nd.grad.data.data() + i * m * n, gb.data() + i * k * n,
                                        m, k, n);
                t.accumulate(ib, gb.data(), gb.size());
            }
        },
        "bmm");
}

// Batched A[b,m,k] x B[b,n,k]^T -> [b,m,n]; the attention-score form.
template <typename T>
Var<T> bmm_nt(Var<T> a, Var<T> b) {
    require_same_tape(a, b, "bmm_nt");
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[2])
        throw ShapeError("bmm_nt: incompatible " + shape_str(sa) + " x " + shape_str(sb));
    const std::size_t B = sa[0], m = sa[1], k = sa[2], n = sb[1];
    TensorData<T> out({B, m, n});
    for (std::size_t i = 0; i < B; ++i)
        detail::gemm_nt_acc(a.value().data.data() + i * m * k, b.value().data.data() + i * n * k,
                            out.data.data() + i * m * n, m, k, n);
    return a.tape->make(
        std::move(out), {a.id, b.id},
        [ia = a.id, ib = b.id, B, m, k, n](Tape<T>& t, typename Tape<T>::Node& nd) {
            const auto& va = t.node(ia).value;
            const auto& vb = t.node(ib).value;
            if (t.node(ia).requires_grad) {
                std::vector<T> ga(B * m * k, T(0));
                for (std::size_t i = 0; i < B; ++i)
                    detail::gemm_acc(nd.grad.data.data() + i * m * n, vb.data.data() + i * n * k,
                                     ga.data() + i * m * k, m, n, k);
                t.accumulate(ia, ga.data(), ga.size());
            }
            if (t.node(ib).requires_grad) {
                std::vector<T> gb(B * n * k, T(0));
                for (std::size_t i = 0; i < B; ++i)
                    detail::gemm_tn_acc(nd.grad.data.data() + i * m * n,
                                        va.data.data() + i * m * k, gb.data() + i * n * k, m, n,
                                        k);
                t.accumulate(ib, gb.data(), gb.size());
            }
        },
        "bmm_nt");
}

// y = x W + b over the last axis; x is [..., Cin], W [Cin, Cout], b [Cout].
template <typename T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> b) {
    require_same_tape(x, w, "affine");
    const auto& sx = x.shape();
    const auto& sw = w.shape();
    if (sw.size() != 2 || sx.back() != sw[0])
        throw ShapeError("affine: incompatible " + shape_str(sx) + " x " + shape_str(sw));
    const std::size_t cin = sw[0], cout = sw[1];
    const std::size_t rows = x.numel() / cin;
    const bool has_bias = b.defined();
    if (has_bias && (b.shape().size() != 1 || b.shape()[0] != cout))
        throw ShapeError("affine: bias must be [Cout]");
    Shape os = sx;
    os.back() = cout;
    TensorData<T> out(os);
    if (has_bias) {
        const T* pb = b.value().data.data();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy(pb, pb + cout, out.data.begin() + r * cout);
    }
    detail::gemm_acc(x.value().data.data(), w.value().data.data(), out.data.data(), rows, cin,
                     cout);
    std::vector<std::size_t> ins = {x.id, w.id};
    if (has_bias) ins.push_back(b.id);
    return x.tape->make(
        std::move(out), ins,
        [ix = x.id, iw = w.id, ib = has_bias ? b.id : 0, has_bias, rows, cin,
         cout](Tape<T>& t, typename Tape<T>::Node& nd) {
            const T* g = nd.grad.data.data();
            if (t.node(ix).requires_grad) {
                std::vector<T> gx(rows * cin, T(0));
                detail::gemm_nt_acc(g, t.node(iw).value.data.data(), gx.data(), rows, cout, cin);
                t.accumulate(ix, gx.data(), gx.size());
            }
            if (t.node(iw).requires_grad) {
                std::vector<T> gw(cin * cout, T(0));
                detail::gemm_tn_acc(t.node(ix).value.data.data(), g, gw.data(), rows, cin, cout);
                t.accumulate(iw, gw.data(), gw.size());
            }
            if (has_bias && t.node(ib).requires_grad) {
                std::vector<T> gb(cout, T(0));
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < cout; ++j) gb[j] += g[r * cout + j];
                t.accumulate(ib, gb.data(), gb.size());
            }
        },
        "affine");
}

template <typename T>
Var<T> affine(Var<T> x, Var<T> w) {
    return affine(x, w, Var<T>{});
}

// ----------------------------------------------------------------- reductions

template <typename T>
Var<T> sum_all(Var<T> a) {
    T s = T(0);
    for (T v : a.value().data) s += v;
    return a.tape->make(
        TensorData<T>::scalar(s), {a.id},
        [ia = a.id](Tape<T>& t, typename Tape<T>::Node& n) {
            const T g = n.grad.data[0];
            std::vector<T> tmp(t.node(ia).value.numel(), g);
            t.accumulate(ia, tmp.data(), tmp.size());
        },
        "sum_all");
}

template <typename T>
Var<T> mean_all(Var<T> a) {
    return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Var<T> sumsq(Var<T> a) {
    T s = T(0);
    for (T v : a.value().data) s += v * v;
    return a.tape->make(
        TensorData<T>::scalar(s), {a.id},
        [ia = a.id](Tape<T>& t, typename Tape<T>::Node& n) {
            const T g = n.grad.data[0];
            const auto& va = t.node(ia).value;
            std::vector<T> tmp(va.numel());
            for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = T(2) * va.data[i] * g;
            t.accumulate(ia, tmp.data(), tmp.size());
        },
        "sumsq");
}

// [B,L,D] -> [B,D], mean over the token axis.
template <typename T>
Var<T> mean_axis1(Var<T> a) {
    const auto& s = a.shape();
    if (s.size() != 3) throw ShapeError("mean_axis1: need [B,L,D]");
    const std::size_t B = s[0], L = s[1], D = s[2];
    TensorData<T> out({B, D});
    const T* p = a.value().data.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t d = 0; d < D; ++d) out.data[b * D + d] += p[(b * L + l) * D + d];
    const T inv = T(1) / static_cast<T>(L);
    for (auto& v : out.data) v *= inv;
    return a.tape->make(
        std::move(out), {a.id},
        [ia = a.id, B, L, D, inv](Tape<T>& t, typename Tape<T>::Node& n) {
            std::vector<T> g(B * L * D);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t l = 0; l < L; ++l)
                    for (std::size_t d = 0; d < D; ++d)
                        g[(b * L + l) * D + d] = n.grad.data[b * D + d] * inv;
            t.accumulate(ia, g.data(), g.size());
        },
        "mean_axis1");
}

// [B,D] -> [D], mean over rows.
template <typename T>
Var<T> mean_axis0(Var<T> a) {
    const auto& s = a.shape();
    if (s.size() != 2) throw ShapeError("mean_axis0: need [B,D]");
    const std::size_t B = s[0], D = s[1];
    TensorData<T> out({D});
    const T* p = a.value().data.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t d = 0; d < D; ++d) out.data[d] += p[b * D + d];
    const T inv = T(1) / static_cast<T>(B);
    for (auto& v : out.data) v *= inv;
    return a.tape->make(
        std::move(out), {a.id},
        [ia = a.id, B, D, inv](Tape<T>& t, typename Tape<T>::Node& n) {
            std::vector<T> g(B * D);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t d = 0; d < D; ++d) g[b * D + d] = n.grad.data[d] * inv;
            t.accumulate(ia, g.data(), g.size());
        },
        "mean_axis0");
}

// y[b,d] = x[b,d] - v[d]
template <typename T>
Var<T> sub_rowvec(Var<T> x, Var<T> v) {
    require_same_tape(x, v, "sub_rowvec");
    const auto& s = x.shape();
    if (s.size() != 2 || v.shape().size() != 1 || v.shape()[0] != s[1])
        throw ShapeError("sub_rowvec: need [B,D] and [D]");
    const std::size_t B = s[0], D = s[1];
    TensorData<T> out = x.value();
    const T* pv = v.value().data.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t d = 0; d < D; ++d) out.data[b * D + d] -= pv[d];
    return x.tape->make(
        std::move(out), {x.id, v.id},
        [ix = x.id, iv = v.id, B, D](Tape<T>& t, typename Tape<T>::Node& n) {
            t.accumulate(ix, n.grad.data.data(), n.grad.numel());
            std::vector<T> gv(D, T(0));
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t d = 0; d < D; ++d) gv[d] -= n.grad.data[b * D + d];
            t.accumulate(iv, gv.data(), gv.size());
        },
        "sub_rowvec");
}

// ------------------------------------------------------- softmax / losses / norms

template <typename T>
Var<T> softmax_lastdim(Var<T> a) {
    const auto& s = a.shape();
    const std::size_t D = s.back();
    const std::size_t rows = a.numel() / D;
    TensorData<T> out(s);
    const T* p = a.value().data.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = p + r * D;
        T* y = out.data.data() + r * D;
        T mx = x[0];
        for (std::size_t j = 1; j < D; ++j) mx = std::max(mx, x[j]);
        T denom = T(0);
        for (std::size_t j = 0; j < D; ++j) {
            y[j] = std::exp(x[j] - mx);
            denom += y[j];
        }
        const T inv = T(1) / denom;
        for (std::size_t j = 0; j < D; ++j) y[j] *= inv;
    }
    return a.tape->make(
        std::move(out), {a.id},
        [ia = a.id, rows, D](Tape<T>& t, typename Tape<T>::Node& n) {
            std::vector<T> g(rows * D);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = n.value.data.data() + r * D;
                const T* gy = n.grad.data.data() + r * D;
                T dot = T(0);
                for (std::size_t j = 0; j < D; ++j) dot += gy[j] * y[j];
                for (std::size_t j = 0; j < D; ++j) g[r * D + j] = (gy[j] - dot) * y[j];
            }
            t.accumulate(ia, g.data(), g.size());
        },
        "softmax");
}

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Var<T> cross_entropy_logits(Var<T> logits, const std::vector<int>& labels) {
    const auto& s = logits.shape();
    if (s.size() != 2) throw ShapeError("cross_entropy: need [B,C] logits");
    const std::size_t B = s[0], C = s[1];
    if (labels.size() != B) throw ShapeError("cross_entropy: labels size mismatch");
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= C)
            throw ShapeError("cross_entropy: label out of range");
    const T* p = logits.value().data.data();
    // softmax rows are re-derived in backward from the stored probabilities
    TensorData<T> probs({B, C});
    T loss = T(0);
    for (std::size_t b = 0; b < B; ++b) {
        const T* x = p + b * C;
        T mx = x[0];
        for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, x[j]);
        T denom = T(0);
        for (std::size_t j = 0; j < C; ++j) denom += std::exp(x[j] - mx);
        const T logz = mx + std::log(denom);
        loss -= x[labels[b]] - logz;
        for (std::size_t j = 0; j < C; ++j) probs.data[b * C + j] = std::exp(x[j] - logz);
    }
    loss /= static_cast<T>(B);
    return logits.tape->make(
        TensorData<T>::scalar(loss), {logits.id},
        [il = logits.id, labels, probs = std::move(probs), B, C](Tape<T>& t,
                                                                 typename Tape<T>::Node& n) {
            const T g = n.grad.data[0] / static_cast<T>(B);
            std::vector<T> gx(B * C);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t j = 0; j < C; ++j) {
                    T v = probs.data[b * C + j];
                    if (j == static_cast<std::size_t>(labels[b])) v -= T(1);
                    gx[b * C + j] = v * g;
                }
            t.accumulate(il, gx.data(), gx.size());
        },
        "cross_entropy");
}

// Rowwise x / ||x||2 for [B,D]; rejects zero-norm rows.
template <typename T>
Var<T> normalize_rows(Var<T> x) {
    const auto& s = x.shape();
    if (s.size() != 2) throw ShapeError("normalize_rows: need [B,D]");
    const std::size_t B = s[0], D = s[1];
    TensorData<T> out({B, D});
    std::vector<T> norms(B);
    const T* p = x.value().data.data();
    for (std::size_t b = 0; b < B; ++b) {
        T ss = T(0);
        for (std::size_t d = 0; d < D; ++d) ss += p[b * D + d] * p[b * D + d];
        const T nrm = std::sqrt(ss);
        if (!(nrm > T(0)))
            throw NumericError("normalize_rows: zero-norm embedding row " + std::to_string(b));
        norms[b] = nrm;
        for (std::size_t d = 0; d < D; ++d) out.data[b * D + d] = p[b * D + d] / nrm;
    }
    return x.tape->make(
        std::move(out), {x.id},
        [ix = x.id, norms = std::move(norms), B, D](Tape<T>& t, typename Tape<T>::Node& n) {
            std::vector<T> g(B * D);
            for (std::size_t b = 0; b < B; ++b) {
                const T* y = n.value.data.data() + b * D;
                const T* gy = n.grad.data.data() + b * D;
                T dot = T(0);
                for (std::size_t d = 0; d < D; ++d) dot += gy[d] * y[d];
                for (std::size_t d = 0; d < D; ++d)
                    g[b * D + d] = (gy[d] - y[d] * dot) / norms[b];
            }
            t.accumulate(ix, g.data(), g.size());
        },
        "normalize_rows");
}

// LayerNorm over the last axis with affine parameters.
template <typename T>
Var<T> layer_norm_lastdim(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    require_same_tape(x, gamma, "layer_norm");
    const auto& s = x.shape();
    const std::size_t D = s.back();
    if (gamma.shape() != Shape{D} || beta.shape() != Shape{D})
        throw ShapeError("layer_norm: gamma/beta must be [D]");
    const std::size_t rows = x.numel() / D;
    TensorData<T> out(s);
    TensorData<T> xhat(s);
    std::vector<T> inv_sigma(rows);
    const T* p = x.value().data.data();
    const T* pg = gamma.value().data.data();
    const T* pb = beta.value().data.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = p + r * D;
        T mu = T(0);
        for (std::size_t d = 0; d < D; ++d) mu += xr[d];
        mu /= static_cast<T>(D);
        T var = T(0);
        for (std::size_t d = 0; d < D; ++d) var += (xr[d] - mu) * (xr[d] - mu);
        var /= static_cast<T>(D);
        const T is = T(1) / std::sqrt(var + eps);
        inv_sigma[r] = is;
        for (std::size_t d = 0; d < D; ++d) {
            const T xh = (xr[d] - mu) * is;
            xhat.data[r * D + d] = xh;
            out.data[r * D + d] = pg[d] * xh + pb[d];
        }
    }
    return x.tape->make(
        std::move(out), {x.id, gamma.id, beta.id},
        [ix = x.id, ig = gamma.id, ib = beta.id, xhat = std::move(xhat),
         inv_sigma = std::move(inv_sigma), rows, D](Tape<T>& t, typename Tape<T>::Node& n) {
            const T* pg = t.node(ig).value.data.data();
            std::vector<T> gx(rows * D), gg(D, T(0)), gb(D, T(0));
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gy = n.grad.data.data() + r * D;
                const T* xh = xhat.data.data() + r * D;
                T m1 = T(0), m2 = T(0);
                for (std::size_t d = 0; d < D; ++d) {
                    const T dxh = gy[d] * pg[d];
                    m1 += dxh;
                    m2 += dxh * xh[d];
                    gg[d] += gy[d] * xh[d];
                    gb[d] += gy[d];
                }
                m1 /= static_cast<T>(D);
                m2 /= static_cast<T>(D);
                for (std::size_t d = 0; d < D; ++d)
                    gx[r * D + d] = (gy[d] * pg[d] - m1 - xh[d] * m2) * inv_sigma[r];
            }
            t.accumulate(ix, gx.data(), gx.size());
            t.accumulate(ig, gg.data(), gg.size());
            t.accumulate(ib, gb.data(), gb.size());
        },
        "layer_norm");
}

// Sum of singular values; the subgradient U V^T flows to the input. Singular
// values near zero keep their computed direction (documented kink).
template <typename T>
Var<T> nuclear_norm(Var<T> x) {
    const auto& s = x.shape();
    if (s.size() != 2) throw ShapeError("nuclear_norm: need a matrix");
    SvdResult<T> svd = jacobi_svd(x.value());
    T total = T(0);
    for (T v : svd.s) total += v;
    const std::size_t m = s[0], n = s[1], r = svd.s.size();
    TensorData<T> uvt({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            T acc = T(0);
            for (std::size_t k = 0; k < r; ++k) acc += svd.u.data[i * r + k] * svd.v.data[j * r + k];
            uvt.data[i * n + j] = acc;
        }
    return x.tape->make(
        TensorData<T>::scalar(total), {x.id},
        [ix = x.id, uvt = std::move(uvt)](Tape<T>& t, typename Tape<T>::Node& n) {
            const T g = n.grad.data[0];
            std::vector<T> gx(uvt.numel());
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = g * uvt.data[i];
            t.accumulate(ix, gx.data(), gx.size());
        },
        "nuclear_norm");
}

}  // namespace m3net::ops
