#pragma once

#include <map>
#include <vector>

#include "m3net/alignment.hpp"
#include "m3net/config.hpp"
#include "m3net/encoder.hpp"
#include "m3net/fusion.hpp"

namespace m3net {

// The assembled three-scale model: per-scale encoders and heads, latent
// projections, and the fusion stack. Parameters live in one store in a fixed
// canonical order so per-scale checkpoint subsets serialize identically
// whether written from a single-scale or the fused model.
template <typename T>
struct M3Model {
    std::vector<std::size_t> scales;  // ascending subset of {32,64,96}
    std::map<std::size_t, EncoderConfig> enc_cfg;
    FusionConfig fusion_cfg;
    AlignWeights<T> align;
    ParamStore<T> store;

    static M3Model build(const RunConfig& rc, std::uint64_t seed) {
        M3Model m;
        m.scales = rc.training.scales;
        std::sort(m.scales.begin(), m.scales.end());
        m.fusion_cfg = rc.fusion;
        m.align = AlignWeights<T>{
            static_cast<T>(rc.align.lambda_nce_32_64), static_cast<T>(rc.align.lambda_nce_32_96),
            static_cast<T>(rc.align.lambda_nce_64_96), static_cast<T>(rc.align.lambda_cov),
            static_cast<T>(rc.align.lambda_orth),      static_cast<T>(rc.align.lambda_nuc),
            static_cast<T>(rc.align.tau),              static_cast<T>(rc.align.beta)};
        for (std::size_t s : m.scales) {
            m.enc_cfg[s] = rc.encoder(s);
            add_encoder_params(m.store, m.enc_cfg[s], seed);
            add_head_params(m.store, m.enc_cfg[s], seed);
        }
        for (std::size_t s : m.scales)
            add_projection_params<T>(m.store, s, m.enc_cfg[s].feature_dim(), rc.latent_dim,
                                     seed);
        add_fusion_params<T>(m.store, m.fusion_cfg, seed);
        return m;
    }

    std::vector<std::string> encoder_param_names(std::size_t scale) const {
        auto names = store.names_with_prefix(enc_prefix(scale));
        for (const auto& n : store.names_with_prefix(head_prefix(scale))) names.push_back(n);
        return names;
    }

    std::vector<std::string> all_param_names() const {
        std::vector<std::string> names;
        for (const auto& p : store.all()) names.push_back(p.name);
        return names;
    }
};

template <typename T>
struct SingleScaleOutputs {
    ScaleEmbedding<T> embedding;
    Var<T> logits;  // [B,2]
};

template <typename T>
SingleScaleOutputs<T> forward_single(const M3Model<T>& m, const LeafMap<T>& leaves,
                                     std::size_t scale, Var<T> x) {
    SingleScaleOutputs<T> out;
    out.embedding = encoder_forward(m.enc_cfg.at(scale), leaves, x);
    out.logits = head_forward(m.enc_cfg.at(scale), leaves, out.embedding.pooled);
    return out;
}

template <typename T>
struct FusedOutputs {
    std::map<std::size_t, ScaleEmbedding<T>> embeddings;
    std::map<std::size_t, Var<T>> scale_logits;   // per-scale head logits
    std::map<std::size_t, Var<T>> z_pooled;       // projected pooled embeddings
    std::map<std::size_t, Var<T>> p_tokens;       // projected token maps
    FusionState<T> fusion;
};

// Precomputed per-scale token/pooled values, used when frozen backbones allow
// caching encoder outputs across epochs.
template <typename T>
struct EncodedBatch {
    std::map<std::size_t, Var<T>> tokens;  // [B,L,C_s]
    std::map<std::size_t, Var<T>> pooled;  // [B,C_s]
};

// Fusion wiring over the available scales with the module toggles:
//   T1 = CrossAttn(P32, P64) when LSF is on and both streams exist, else the
//        finest available stream passes through untouched;
//   T2 = CrossAttn(P96, T1) when HSF is on and T1 exists, else P96;
//   H  = Transformer stack over [T1; T2] when enabled, else the raw stream.
template <typename T>
FusedOutputs<T> forward_fused_from_encoded(const M3Model<T>& m, const LeafMap<T>& leaves,
                                           const EncodedBatch<T>& enc) {
    FusedOutputs<T> out;
    for (std::size_t s : m.scales) {
        Var<T> tokens = enc.tokens.at(s);
        Var<T> pooled = enc.pooled.at(s);
        out.scale_logits[s] = head_forward(m.enc_cfg.at(s), leaves, pooled);
        const std::string pp = proj_prefix(s);
        out.z_pooled[s] = project(pooled, leaves.at(pp + "weight"), leaves.at(pp + "bias"));
        out.p_tokens[s] = project(tokens, leaves.at(pp + "weight"), leaves.at(pp + "bias"));
    }

    const bool has32 = out.p_tokens.count(32), has64 = out.p_tokens.count(64),
               has96 = out.p_tokens.count(96);
    FusionState<T>& fs = out.fusion;

    if (m.fusion_cfg.use_stage1 && has32 && has64) {
        MhaOut<T> s1 = mha(m.fusion_cfg, leaves, "block1", out.p_tokens.at(32),
                           out.p_tokens.at(64));
        fs.t1 = s1.out;
        for (auto& a : s1.attn_maps) fs.attn_maps.push_back(a);
    } else if (has32) {
        fs.t1 = out.p_tokens.at(32);
    } else if (has64) {
        fs.t1 = out.p_tokens.at(64);
    }

    if (has96) {
        if (m.fusion_cfg.use_stage2 && fs.t1.defined()) {
            MhaOut<T> s2 = mha(m.fusion_cfg, leaves, "block2", out.p_tokens.at(96), fs.t1);
            fs.t2 = s2.out;
            for (auto& a : s2.attn_maps) fs.attn_maps.push_back(a);
        } else {
            fs.t2 = out.p_tokens.at(96);
        }
    }

    if (fs.t1.defined() && fs.t2.defined())
        fs.fused_tokens = ops::concat_axis1(fs.t1, fs.t2);
    else if (fs.t1.defined())
        fs.fused_tokens = fs.t1;
    else if (fs.t2.defined())
        fs.fused_tokens = fs.t2;
    else
        throw ShapeError("forward_fused: no scale streams available");

    fs.h = fs.fused_tokens;
    if (m.fusion_cfg.use_stage3)
        for (std::size_t l = 0; l < m.fusion_cfg.stage3_depth; ++l)
            fs.h = stage3_layer(m.fusion_cfg, leaves, "stage3_" + std::to_string(l), fs.h,
                                fs.attn_maps);

    fs.logits = classify_logits(leaves, fs.h);
    return out;
}

template <typename T>
FusedOutputs<T> forward_fused(const M3Model<T>& m, const LeafMap<T>& leaves,
                              const std::map<std::size_t, Var<T>>& inputs) {
    EncodedBatch<T> enc;
    FusedOutputs<T> out;
    for (std::size_t s : m.scales) {
        ScaleEmbedding<T> emb = encoder_forward(m.enc_cfg.at(s), leaves, inputs.at(s));
        enc.tokens[s] = emb.tokens;
        enc.pooled[s] = emb.pooled;
        out.embeddings[s] = emb;
    }
    FusedOutputs<T> wired = forward_fused_from_encoded(m, leaves, enc);
    wired.embeddings = out.embeddings;
    return wired;
}

// L_align restricted to the scales actually present: InfoNCE and covariance
// need pairs; the orthogonality and nuclear terms apply per present scale.
template <typename T>
Var<T> align_loss_present(const M3Model<T>& m, const FusedOutputs<T>& fo, Tape<T>& tape) {
    std::vector<std::pair<std::size_t, Var<T>>> zs;
    for (std::size_t s : m.scales) zs.push_back({s, fo.z_pooled.at(s)});
    const AlignWeights<T>& w = m.align;
    Var<T> total = tape.constant(TensorData<T>::scalar(T(0)));
    auto nce_weight = [&](std::size_t a, std::size_t b) -> T {
        if (a == 32 && b == 64) return w.lambda_nce_32_64;
        if (a == 32 && b == 96) return w.lambda_nce_32_96;
        return w.lambda_nce_64_96;
    };
    for (std::size_t i = 0; i < zs.size(); ++i)
        for (std::size_t j = i + 1; j < zs.size(); ++j) {
            const T lam = nce_weight(zs[i].first, zs[j].first);
            if (lam > T(0))
                total = ops::add(total,
                                 ops::mul_scalar(info_nce(zs[i].second, zs[j].second, w.tau), lam));
        }
    if (w.lambda_cov > T(0) && zs.size() >= 2) {
        std::vector<Var<T>> raw;
        for (auto& [s, z] : zs) raw.push_back(z);
        total = ops::add(total, ops::mul_scalar(cov_align(raw), w.lambda_cov));
    }
    if (w.lambda_orth > T(0))
        for (auto& [s, z] : zs)
            total = ops::add(total, ops::mul_scalar(orth_penalty(z), w.lambda_orth));
    if (w.lambda_nuc > T(0))
        for (auto& [s, z] : zs)
            total = ops::add(total, ops::mul_scalar(nuclear_penalty(z), w.lambda_nuc));
    return total;
}

}  // namespace m3net
