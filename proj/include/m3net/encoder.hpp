#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "m3net/conv3d.hpp"
#include "m3net/ops.hpp"
#include "m3net/params.hpp"

namespace m3net {

struct ConvStage {
    std::size_t channels = 16;
    std::size_t stride = 2;
};

// Plain conv stack standing in for the full-size backbones: per stage
// conv(k=3) -> per-channel instance norm -> GELU.
struct EncoderConfig {
    std::size_t scale = 32;  // crop size in-plane
    std::size_t depth = 56;
    std::vector<ConvStage> stages{{16, 2}, {32, 2}, {64, 2}};
    std::size_t kernel = 3;

    std::size_t feature_dim() const { return stages.back().channels; }

    std::array<std::size_t, 3> grid_after(std::size_t n_stages) const {
        std::array<std::size_t, 3> g{scale, scale, depth};
        for (std::size_t s = 0; s < n_stages; ++s) {
            const std::size_t pad = kernel / 2, st = stages[s].stride;
            for (auto& d : g) d = (d + 2 * pad - kernel) / st + 1;
        }
        return g;
    }
    std::array<std::size_t, 3> final_grid() const { return grid_after(stages.size()); }
    std::size_t token_count() const {
        const auto g = final_grid();
        return g[0] * g[1] * g[2];
    }

    void validate() const {
        if (stages.empty()) throw ConfigError("encoder: needs at least one conv stage");
        if (kernel != 3) throw ConfigError("encoder: kernel is fixed at 3");
        const auto g = final_grid();
        if (g[0] < 2 || g[1] < 2)
            throw ConfigError("encoder(scale " + std::to_string(scale) +
                              "): strides reduce an in-plane axis below 2");
        if (g[2] < 1) throw ConfigError("encoder: depth axis vanished");
        for (const auto& s : stages)
            if (s.channels == 0 || s.stride == 0)
                throw ConfigError("encoder: zero channels or stride");
    }
};

// Pooled feature F_s, token map, and retained stage activations. pooled is the
// token mean by construction.
template <typename T>
struct ScaleEmbedding {
    Var<T> pooled;                     // [B, C_s]
    Var<T> tokens;                     // [B, L, C_s]
    std::vector<Var<T>> stage_acts;    // per-stage [B,X,Y,Z,C] outputs
    std::size_t scale = 0;
    std::array<std::size_t, 3> grid{};
};

inline std::string enc_prefix(std::size_t scale) { return "enc" + std::to_string(scale) + "."; }
inline std::string head_prefix(std::size_t scale) { return "head" + std::to_string(scale) + "."; }

template <typename T>
void add_encoder_params(ParamStore<T>& store, const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const std::string pre = enc_prefix(cfg.scale);
    std::size_t cin = 1;
    for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
        const std::size_t cout = cfg.stages[s].channels;
        const std::string sp = pre + "stage" + std::to_string(s) + ".";
        store.add_uniform(sp + "weight", {cfg.kernel, cfg.kernel, cfg.kernel, cin, cout},
                          cfg.kernel * cfg.kernel * cfg.kernel * cin, seed);
        store.add_const(sp + "bias", {cout}, T(0));
        store.add_const(sp + "gamma", {cout}, T(1));
        store.add_const(sp + "beta", {cout}, T(0));
        cin = cout;
    }
}

template <typename T>
void add_head_params(ParamStore<T>& store, const EncoderConfig& cfg, std::uint64_t seed) {
    const std::string pre = head_prefix(cfg.scale);
    store.add_uniform(pre + "weight", {cfg.feature_dim(), 2}, cfg.feature_dim(), seed);
    store.add_const(pre + "bias", {2}, T(0));
}

// x is [B, s, s, depth, 1] in network units (HU / 1000).
template <typename T>
ScaleEmbedding<T> encoder_forward(const EncoderConfig& cfg, const LeafMap<T>& leaves, Var<T> x) {
    const auto& xs = x.shape();
    if (xs.size() != 5 || xs[1] != cfg.scale || xs[2] != cfg.scale || xs[3] != cfg.depth ||
        xs[4] != 1)
        throw ShapeError("encoder_forward(scale " + std::to_string(cfg.scale) +
                         "): bad input shape " + shape_str(xs));
    const std::string pre = enc_prefix(cfg.scale);
    ScaleEmbedding<T> out;
    out.scale = cfg.scale;
    Var<T> h = x;
    for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
        const std::string sp = pre + "stage" + std::to_string(s) + ".";
        h = ops::conv3d(h, leaves.at(sp + "weight"), leaves.at(sp + "bias"),
                        cfg.stages[s].stride);
        h = ops::instance_norm(h, leaves.at(sp + "gamma"), leaves.at(sp + "beta"));
        h = ops::gelu(h);
        out.stage_acts.push_back(h);
    }
    out.grid = cfg.final_grid();
    const std::size_t B = xs[0];
    out.tokens = ops::reshape(h, {B, cfg.token_count(), cfg.feature_dim()});
    out.pooled = ops::mean_axis1(out.tokens);
    return out;
}

template <typename T>
Var<T> head_forward(const EncoderConfig& cfg, const LeafMap<T>& leaves, Var<T> pooled) {
    const std::string pre = head_prefix(cfg.scale);
    return ops::affine(pooled, leaves.at(pre + "weight"), leaves.at(pre + "bias"));
}

// Marks the first ceil(f * num_stages) conv stages non-trainable. Returns the
// per-stage frozen mask; heads are untouched.
template <typename T>
std::vector<bool> freeze_lower(ParamStore<T>& store, const EncoderConfig& cfg, double fraction) {
    if (fraction < 0.0 || fraction > 1.0) throw ConfigError("freeze fraction outside [0,1]");
    const std::size_t n = cfg.stages.size();
    const std::size_t k = static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(n)) + 0.0);
    std::vector<bool> mask(n, false);
    for (std::size_t s = 0; s < std::min(k, n); ++s) {
        mask[s] = true;
        store.set_trainable(enc_prefix(cfg.scale) + "stage" + std::to_string(s) + ".", false);
    }
    return mask;
}

// FLOP count per the conv formula 2 k^3 Cin Cout out_voxels plus bias adds.
inline std::size_t count_encoder_flops(const EncoderConfig& cfg, std::size_t batch = 1) {
    std::size_t total = 0;
    std::size_t cin = 1;
    for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
        const auto g = cfg.grid_after(s + 1);
        const std::size_t vox = g[0] * g[1] * g[2];
        const std::size_t cout = cfg.stages[s].channels;
        total += 2 * cfg.kernel * cfg.kernel * cfg.kernel * cin * cout * vox + cout * vox;
        cin = cout;
    }
    return total * batch;
}

inline std::size_t count_linear_flops(std::size_t rows, std::size_t cin, std::size_t cout,
                                      bool bias = true) {
    return 2 * rows * cin * cout + (bias ? rows * cout : 0);
}

}  // namespace m3net
