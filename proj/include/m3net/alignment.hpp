#pragma once

#include <string>
#include <vector>

#include "m3net/ops.hpp"
#include "m3net/params.hpp"

namespace m3net {

// Weights of the four alignment-loss pieces plus the InfoNCE temperature and
// the stage-2 trade-off coefficient.
template <typename T>
struct AlignWeights {
    T lambda_nce_32_64 = T(1);
    T lambda_nce_32_96 = T(1);
    T lambda_nce_64_96 = T(1);
    T lambda_cov = T(0.1);
    T lambda_orth = T(0.01);
    T lambda_nuc = T(0.001);
    T tau = T(0.1);
    T beta = T(0.5);

    void validate() const {
        if (!(tau > T(0))) throw ConfigError("alignment: tau must be positive");
        for (T v : {lambda_nce_32_64, lambda_nce_32_96, lambda_nce_64_96, lambda_cov,
                    lambda_orth, lambda_nuc})
            if (v < T(0)) throw ConfigError("alignment: lambda weights must be >= 0");
        if (beta < T(0)) throw ConfigError("alignment: beta must be >= 0");
    }
};

inline std::string proj_prefix(std::size_t scale) { return "proj" + std::to_string(scale) + "."; }

template <typename T>
void add_projection_params(ParamStore<T>& store, std::size_t scale, std::size_t feature_dim,
                           std::size_t latent_dim, std::uint64_t seed) {
    const std::string pre = proj_prefix(scale);
    store.add_uniform(pre + "weight", {feature_dim, latent_dim}, feature_dim, seed);
    store.add_const(pre + "bias", {latent_dim}, T(0));
}

// Z_s = F_s W_s + b_s; also applied per token when F is [B,L,C].
template <typename T>
Var<T> project(Var<T> f, Var<T> w, Var<T> b) {
    return ops::affine(f, w, b);
}

// Symmetrized InfoNCE over cosine similarities: anchors from one side, the
// same-row positive plus the other B-1 rows as candidates, mean over anchors,
// averaged over both directions.
template <typename T>
Var<T> info_nce(Var<T> z_i, Var<T> z_j, T tau) {
    if (!(tau > T(0))) throw ConfigError("info_nce: tau must be positive");
    const auto& si = z_i.shape();
    const auto& sj = z_j.shape();
    if (si.size() != 2 || si != sj) throw ShapeError("info_nce: need matching [B,D]");
    const std::size_t B = si[0];
    if (B < 2) throw ShapeError("info_nce: batch must be >= 2 to provide negatives");
    Var<T> ni = ops::normalize_rows(z_i);
    Var<T> nj = ops::normalize_rows(z_j);
    Var<T> sims = ops::matmul(ni, ops::transpose2d(nj));
    Var<T> logits = ops::mul_scalar(sims, T(1) / tau);
    std::vector<int> diag(B);
    for (std::size_t b = 0; b < B; ++b) diag[b] = static_cast<int>(b);
    Var<T> fwd = ops::cross_entropy_logits(logits, diag);
    Var<T> bwd = ops::cross_entropy_logits(ops::transpose2d(logits), diag);
    return ops::mul_scalar(ops::add(fwd, bwd), T(0.5));
}

// Population covariance of a [B,D] batch as a differentiable composition.
template <typename T>
Var<T> covariance_op(Var<T> z) {
    const auto& s = z.shape();
    if (s.size() != 2) throw ShapeError("covariance: need [B,D]");
    Var<T> mu = ops::mean_axis0(z);
    Var<T> zc = ops::sub_rowvec(z, mu);
    Var<T> g = ops::matmul(ops::transpose2d(zc), zc);
    return ops::mul_scalar(g, T(1) / static_cast<T>(s[0]));
}

// Sum over scale pairs of || Cov(Z_i) - Cov(Z_j) ||_F^2.
template <typename T>
Var<T> cov_align(const std::vector<Var<T>>& zs) {
    if (zs.size() < 2) throw ShapeError("cov_align: need at least two scales");
    std::vector<Var<T>> covs;
    for (const auto& z : zs) covs.push_back(covariance_op(z));
    Var<T> total;
    for (std::size_t i = 0; i < covs.size(); ++i)
        for (std::size_t j = i + 1; j < covs.size(); ++j) {
            Var<T> term = ops::sumsq(ops::sub(covs[i], covs[j]));
            total = total.defined() ? ops::add(total, term) : term;
        }
    return total;
}

// || Z^T Z - I ||_F^2. With B < D the penalty has a strictly positive floor
// of D - B; the zero-iff-orthonormal reading only holds for B >= D.
template <typename T>
Var<T> orth_penalty(Var<T> z) {
    const auto& s = z.shape();
    if (s.size() != 2) throw ShapeError("orth_penalty: need [B,D]");
    const std::size_t D = s[1];
    Var<T> g = ops::matmul(ops::transpose2d(z), z);
    TensorData<T> eye({D, D});
    for (std::size_t i = 0; i < D; ++i) eye.data[i * D + i] = T(1);
    Var<T> id = z.tape->constant(std::move(eye));
    return ops::sumsq(ops::sub(g, id));
}

template <typename T>
Var<T> nuclear_penalty(Var<T> z) {
    return ops::nuclear_norm(z);
}

// L_align over the three scales (zs ordered 32, 64, 96). Zero-weight terms
// are skipped entirely.
template <typename T>
Var<T> align_loss(const std::vector<Var<T>>& zs, const AlignWeights<T>& w) {
    if (zs.size() != 3) throw ShapeError("align_loss: expects the three scale embeddings");
    w.validate();
    Tape<T>* tape = zs[0].tape;
    Var<T> total = tape->constant(TensorData<T>::scalar(T(0)));
    const T nce[3] = {w.lambda_nce_32_64, w.lambda_nce_32_96, w.lambda_nce_64_96};
    const std::size_t pair_idx[3][2] = {{0, 1}, {0, 2}, {1, 2}};
    for (int k = 0; k < 3; ++k)
        if (nce[k] > T(0))
            total = ops::add(total, ops::mul_scalar(info_nce(zs[pair_idx[k][0]],
                                                             zs[pair_idx[k][1]], w.tau),
                                                    nce[k]));
    if (w.lambda_cov > T(0))
        total = ops::add(total, ops::mul_scalar(cov_align(zs), w.lambda_cov));
    if (w.lambda_orth > T(0)) {
        Var<T> orth = tape->constant(TensorData<T>::scalar(T(0)));
        for (const auto& z : zs) orth = ops::add(orth, orth_penalty(z));
        total = ops::add(total, ops::mul_scalar(orth, w.lambda_orth));
    }
    if (w.lambda_nuc > T(0)) {
        Var<T> nuc = tape->constant(TensorData<T>::scalar(T(0)));
        for (const auto& z : zs) nuc = ops::add(nuc, nuclear_penalty(z));
        total = ops::add(total, ops::mul_scalar(nuc, w.lambda_nuc));
    }
    return total;
}

}  // namespace m3net
