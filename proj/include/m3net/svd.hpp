#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "m3net/errors.hpp"
#include "m3net/tensor.hpp"

namespace m3net {

template <typename T>
struct SvdResult {
    TensorData<T> u;     // [m, r], orthonormal columns (zero columns at zero singular values)
    std::vector<T> s;    // [r], non-negative, descending
    TensorData<T> v;     // [n, r], orthonormal columns
};

namespace detail_svd {

// One-sided Jacobi on an m x n matrix with m >= n: orthogonalizes columns of a
// working copy while accumulating the right rotations into V.
template <typename T>
SvdResult<T> jacobi_tall(const TensorData<T>& a) {
    const std::size_t m = a.shape[0], n = a.shape[1];
    std::vector<T> b = a.data;        // row-major [m,n]
    std::vector<T> v(n * n, T(0));    // row-major [n,n]
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = T(1);

    const T eps = std::numeric_limits<T>::epsilon();
    const T tol = T(8) * eps;
    const std::size_t max_sweeps = 100 * std::max<std::size_t>(1, std::min(m, n));

    T worst = T(0);
    bool converged = false;
    for (std::size_t sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
        converged = true;
        worst = T(0);
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                T app = T(0), aqq = T(0), apq = T(0);
                for (std::size_t i = 0; i < m; ++i) {
                    const T xp = b[i * n + p], xq = b[i * n + q];
                    app += xp * xp;
                    aqq += xq * xq;
                    apq += xp * xq;
                }
                const T scale = std::sqrt(app * aqq);
                if (scale == T(0)) continue;
                worst = std::max(worst, std::abs(apq) / scale);
                if (std::abs(apq) <= tol * scale) continue;
                converged = false;
                const T zeta = (aqq - app) / (T(2) * apq);
                const T t =
                    (zeta >= T(0) ? T(1) : T(-1)) / (std::abs(zeta) + std::sqrt(T(1) + zeta * zeta));
                const T cs = T(1) / std::sqrt(T(1) + t * t);
                const T sn = cs * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const T xp = b[i * n + p], xq = b[i * n + q];
                    b[i * n + p] = cs * xp - sn * xq;
                    b[i * n + q] = sn * xp + cs * xq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const T vp = v[i * n + p], vq = v[i * n + q];
                    v[i * n + p] = cs * vp - sn * vq;
                    v[i * n + q] = sn * vp + cs * vq;
                }
            }
        }
    }
    if (!converged)
        throw NumericError("svd: Jacobi sweeps did not converge, residual " +
                           std::to_string(static_cast<double>(worst)));

    std::vector<T> sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        T ss = T(0);
        for (std::size_t i = 0; i < m; ++i) ss += b[i * n + j] * b[i * n + j];
        sigma[j] = std::sqrt(ss);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    SvdResult<T> out;
    out.s.resize(n);
    out.u = TensorData<T>({m, n});
    out.v = TensorData<T>({n, n});
    const T tiny = std::numeric_limits<T>::min() * T(16);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        out.s[k] = sigma[j];
        if (sigma[j] > tiny) {
            const T inv = T(1) / sigma[j];
            for (std::size_t i = 0; i < m; ++i) out.u.data[i * n + k] = b[i * n + j] * inv;
        }
        for (std::size_t i = 0; i < n; ++i) out.v.data[i * n + k] = v[i * n + j];
    }
    return out;
}

}  // namespace detail_svd

// Full SVD of a 2-d tensor: M = U diag(S) V^T with S sorted descending.
template <typename T>
SvdResult<T> jacobi_svd(const TensorData<T>& m) {
    if (m.ndim() != 2) throw ShapeError("svd: input must be 2-dimensional");
    if (!m.all_finite()) throw NumericError("svd: non-finite input");
    const std::size_t rows = m.shape[0], cols = m.shape[1];
    if (rows >= cols) return detail_svd::jacobi_tall(m);
    TensorData<T> mt({cols, rows});
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) mt.data[j * rows + i] = m.data[i * cols + j];
    SvdResult<T> r = detail_svd::jacobi_tall(mt);
    std::swap(r.u, r.v);
    return r;
}

// Population covariance (1/B) (Z - mean)^T (Z - mean) of a [B,D] batch.
// Plain-value version used by oracles and non-differentiable paths.
template <typename T>
TensorData<T> covariance_value(const TensorData<T>& z) {
    if (z.ndim() != 2) throw ShapeError("covariance: need [B,D]");
    const std::size_t b = z.shape[0], d = z.shape[1];
    if (b < 1) throw ShapeError("covariance: empty batch");
    std::vector<T> mu(d, T(0));
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < d; ++j) mu[j] += z.data[i * d + j];
    for (auto& v : mu) v /= static_cast<T>(b);
    TensorData<T> cov({d, d});
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t p = 0; p < d; ++p) {
            const T cp = z.data[i * d + p] - mu[p];
            for (std::size_t q = 0; q < d; ++q)
                cov.data[p * d + q] += cp * (z.data[i * d + q] - mu[q]);
        }
    const T inv = T(1) / static_cast<T>(b);
    for (auto& v : cov.data) v *= inv;
    return cov;
}

}  // namespace m3net
