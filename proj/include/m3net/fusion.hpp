#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "m3net/encoder.hpp"
#include "m3net/ops.hpp"
#include "m3net/params.hpp"

namespace m3net {

// Three-block fusion: peripheral cross-attention (32 queries over 64 tokens),
// context assimilation (96 queries over T1), and a residual Transformer block
// over the concatenated stream, then a pooled classifier.
struct FusionConfig {
    std::size_t latent_dim = 32;
    std::size_t heads = 2;
    std::size_t ffn_dim = 64;
    std::size_t stage3_depth = 1;
    double attnreg_weight = 1e-3;
    bool use_stage1 = true;   // LSF
    bool use_stage2 = true;   // HSF
    bool use_stage3 = true;   // Transformer

    std::size_t head_dim() const { return latent_dim / heads; }

    void validate() const {
        if (latent_dim == 0 || heads == 0) throw ConfigError("fusion: zero dims");
        if (latent_dim % heads != 0)
            throw ConfigError("fusion: latent_dim must be divisible by heads");
        if (ffn_dim == 0) throw ConfigError("fusion: ffn_dim must be positive");
        if (stage3_depth == 0 && use_stage3)
            throw ConfigError("fusion: stage3 enabled with zero depth");
        if (attnreg_weight < 0) throw ConfigError("fusion: attnreg_weight must be >= 0");
    }
};

template <typename T>
struct MhaOut {
    Var<T> out;                      // [B, Lq, D]
    std::vector<Var<T>> attn_maps;   // one [B, Lq, Lkv] per head, rows sum to 1
};

template <typename T>
struct FusionState {
    Var<T> t1, t2;                  // as wired; undefined when a path is off
    Var<T> fused_tokens;            // the concatenated stream fed to stage 3
    Var<T> h;                       // stage-3 output (== fused_tokens when off)
    std::vector<Var<T>> attn_maps;  // every retained map across all blocks
    Var<T> logits;                  // [B, 2]
};

inline std::string fusion_block_prefix(const std::string& block) { return "fusion." + block + "."; }

template <typename T>
void add_mha_params(ParamStore<T>& store, const std::string& block, std::size_t dim,
                    std::size_t heads, std::uint64_t seed) {
    const std::string pre = fusion_block_prefix(block);
    store.add_uniform(pre + "wq", {dim, dim}, dim, seed);
    store.add_uniform(pre + "wk", {dim, dim}, dim, seed);
    store.add_uniform(pre + "wv", {dim, dim}, dim, seed);
    store.add_uniform(pre + "wo", {dim, dim}, dim, seed);
    // free parameter mapped through exp() so tau_h stays positive; starts at 1
    store.add_const(pre + "tau_raw", {heads}, T(0));
}

template <typename T>
void add_fusion_params(ParamStore<T>& store, const FusionConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const std::size_t D = cfg.latent_dim;
    add_mha_params<T>(store, "block1", D, cfg.heads, seed);
    add_mha_params<T>(store, "block2", D, cfg.heads, seed);
    for (std::size_t l = 0; l < cfg.stage3_depth; ++l) {
        const std::string lp = "stage3_" + std::to_string(l);
        add_mha_params<T>(store, lp, D, cfg.heads, seed);
        const std::string pre = fusion_block_prefix(lp);
        store.add_uniform(pre + "ffn1.weight", {D, cfg.ffn_dim}, D, seed);
        store.add_const(pre + "ffn1.bias", {cfg.ffn_dim}, T(0));
        store.add_uniform(pre + "ffn2.weight", {cfg.ffn_dim, D}, cfg.ffn_dim, seed);
        store.add_const(pre + "ffn2.bias", {D}, T(0));
        store.add_const(pre + "ln.gamma", {D}, T(1));
        store.add_const(pre + "ln.beta", {D}, T(0));
    }
    store.add_const("fusion.cls.ln.gamma", {D}, T(1));
    store.add_const("fusion.cls.ln.beta", {D}, T(0));
    store.add_uniform("fusion.cls.hidden.weight", {D, D}, D, seed);
    store.add_const("fusion.cls.hidden.bias", {D}, T(0));
    store.add_uniform("fusion.cls.out.weight", {D, 2}, D, seed);
    store.add_const("fusion.cls.out.bias", {2}, T(0));
}

// Temperature-scaled multi-head attention: per head,
// softmax(Q K^T / (tau_h sqrt(d_h))) V, heads concatenated, output projected.
template <typename T>
MhaOut<T> mha(const FusionConfig& cfg, const LeafMap<T>& leaves, const std::string& block,
              Var<T> q_in, Var<T> kv_in) {
    const std::string pre = fusion_block_prefix(block);
    const std::size_t D = cfg.latent_dim, H = cfg.heads, dh = cfg.head_dim();
    if (q_in.shape().size() != 3 || q_in.shape()[2] != D)
        throw ShapeError("mha: queries must be [B,Lq,D]");
    if (kv_in.shape().size() != 3 || kv_in.shape()[2] != D)
        throw ShapeError("mha: keys/values must be [B,Lkv,D]");
    Var<T> q = ops::affine(q_in, leaves.at(pre + "wq"));
    Var<T> k = ops::affine(kv_in, leaves.at(pre + "wk"));
    Var<T> v = ops::affine(kv_in, leaves.at(pre + "wv"));
    Var<T> tau_raw = leaves.at(pre + "tau_raw");
    Var<T> inv_tau = ops::exp_op(ops::neg(tau_raw));  // [H], 1/tau_h

    MhaOut<T> out;
    std::vector<Var<T>> heads;
    for (std::size_t h = 0; h < H; ++h) {
        Var<T> qh = ops::slice_lastdim(q, h * dh, dh);
        Var<T> kh = ops::slice_lastdim(k, h * dh, dh);
        Var<T> vh = ops::slice_lastdim(v, h * dh, dh);
        Var<T> scores = ops::mul_scalar(ops::bmm_nt(qh, kh),
                                        T(1) / static_cast<T>(std::sqrt(double(dh))));
        scores = ops::mul_scalar_node(scores, ops::slice_lastdim(inv_tau, h, 1));
        Var<T> attn = ops::softmax_lastdim(scores);
        out.attn_maps.push_back(attn);
        heads.push_back(ops::bmm(attn, vh));
    }
    Var<T> ctx = H == 1 ? heads[0] : ops::concat_lastdim(heads);
    out.out = ops::affine(ctx, leaves.at(pre + "wo"));
    return out;
}

// One residual Transformer layer written exactly as H = LN(T + MHA(T) + FFN(T)).
template <typename T>
Var<T> stage3_layer(const FusionConfig& cfg, const LeafMap<T>& leaves, const std::string& block,
                    Var<T> t, std::vector<Var<T>>& maps_out) {
    const std::string pre = fusion_block_prefix(block);
    MhaOut<T> att = mha(cfg, leaves, block, t, t);
    for (auto& m : att.attn_maps) maps_out.push_back(m);
    Var<T> f = ops::affine(t, leaves.at(pre + "ffn1.weight"), leaves.at(pre + "ffn1.bias"));
    f = ops::gelu(f);
    f = ops::affine(f, leaves.at(pre + "ffn2.weight"), leaves.at(pre + "ffn2.bias"));
    Var<T> summed = ops::add(ops::add(t, att.out), f);
    return ops::layer_norm_lastdim(summed, leaves.at(pre + "ln.gamma"),
                                   leaves.at(pre + "ln.beta"));
}

// Sum over retained maps of the entrywise squared norm.
template <typename T>
Var<T> attn_reg(const std::vector<Var<T>>& maps) {
    if (maps.empty()) throw ShapeError("attn_reg: no retained attention maps");
    Var<T> total;
    for (const auto& m : maps) {
        Var<T> term = ops::sumsq(m);
        total = total.defined() ? ops::add(total, term) : term;
    }
    return total;
}

// h = LN(Pool(H)), logits = W_c GELU(W_h h); the softmax lives with the loss
// or the evaluation code.
template <typename T>
Var<T> classify_logits(const LeafMap<T>& leaves, Var<T> h_tokens) {
    Var<T> pooled = ops::mean_axis1(h_tokens);
    Var<T> h = ops::layer_norm_lastdim(pooled, leaves.at("fusion.cls.ln.gamma"),
                                       leaves.at("fusion.cls.ln.beta"));
    Var<T> hidden = ops::gelu(ops::affine(h, leaves.at("fusion.cls.hidden.weight"),
                                          leaves.at("fusion.cls.hidden.bias")));
    return ops::affine(hidden, leaves.at("fusion.cls.out.weight"),
                       leaves.at("fusion.cls.out.bias"));
}

inline std::size_t count_mha_flops(std::size_t lq, std::size_t lkv, std::size_t dim) {
    // Q/K/V/O projections plus score and value contractions.
    return count_linear_flops(lq, dim, dim, false) + 2 * count_linear_flops(lkv, dim, dim, false) +
           count_linear_flops(lq, dim, dim, false) + 2 * lq * lkv * dim * 2;
}

inline std::size_t count_fusion_flops(const FusionConfig& cfg, std::size_t l32, std::size_t l64,
                                      std::size_t l96) {
    std::size_t total = 0;
    const std::size_t D = cfg.latent_dim;
    if (cfg.use_stage1) total += count_mha_flops(l32, l64, D);
    if (cfg.use_stage2) total += count_mha_flops(l96, l32, D);
    const std::size_t lsum = l32 + l96;
    if (cfg.use_stage3)
        for (std::size_t l = 0; l < cfg.stage3_depth; ++l) {
            total += count_mha_flops(lsum, lsum, D);
            total += count_linear_flops(lsum, D, cfg.ffn_dim) +
                     count_linear_flops(lsum, cfg.ffn_dim, D);
        }
    total += count_linear_flops(1, D, D) + count_linear_flops(1, D, 2);
    return total;
}

}  // namespace m3net
