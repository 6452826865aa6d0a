#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "m3net/model.hpp"
#include "m3net/patches.hpp"
#include "m3net/trainer.hpp"
#include "m3net/volume.hpp"

namespace m3net {

// Grad-CAM over a chosen encoder stage of the fused model: channel weights
// are the spatial mean of d(target logit)/d(activations); the map is the
// rectified weighted channel sum, trilinearly upsampled to the crop grid and
// max-normalized (skipped when identically zero).
template <typename T>
SaliencyGrid gradcam(const M3Model<T>& model, const NestedPatchSet& patch, std::size_t scale,
                     std::size_t stage_idx, int target_class) {
    if (target_class != 0 && target_class != 1)
        throw ConfigError("gradcam: target class must be 0 or 1");
    const EncoderConfig& ecfg = model.enc_cfg.at(scale);
    if (stage_idx >= ecfg.stages.size())
        throw ConfigError("gradcam: encoder has no stage " + std::to_string(stage_idx));
    const auto grid = ecfg.grid_after(stage_idx + 1);
    if (grid[0] * grid[1] * grid[2] <= 1)
        throw ConfigError("gradcam: chosen stage has no spatial extent");

    Tape<T> tape;
    ParamStore<T>& store = const_cast<ParamStore<T>&>(model.store);
    LeafMap<T> leaves = bind_leaves(tape, store, /*force_grad=*/true);

    std::map<std::size_t, Var<T>> inputs;
    for (std::size_t s : model.scales) {
        const TensorData<float>& crop = patch.crop(s);
        TensorData<T> x({1, s, s, kCropDepth, 1});
        for (std::size_t i = 0; i < crop.numel(); ++i)
            x.data[i] = static_cast<T>(crop.data[i] * kHuScale);
        inputs.emplace(s, tape.leaf(std::move(x), false));
    }

    FusedOutputs<T> fo = forward_fused(model, leaves, inputs);
    Var<T> target = ops::sum_all(
        ops::slice_lastdim(fo.fusion.logits, static_cast<std::size_t>(target_class), 1));
    tape.backward(target);

    Var<T> act = fo.embeddings.at(scale).stage_acts.at(stage_idx);
    const TensorData<T> grad = tape.grad(act);
    const TensorData<T>& a = act.value();
    const std::size_t X = grid[0], Y = grid[1], Z = grid[2];
    const std::size_t C = a.shape[4];
    const std::size_t vox = X * Y * Z;

    std::vector<double> alpha(C, 0.0);
    for (std::size_t v = 0; v < vox; ++v)
        for (std::size_t c = 0; c < C; ++c)
            alpha[c] += static_cast<double>(grad.data[v * C + c]);
    for (auto& w : alpha) w /= static_cast<double>(vox);

    // coarse map in activation-grid order (x, y, z with z fastest)
    std::vector<double> coarse(vox, 0.0);
    for (std::size_t v = 0; v < vox; ++v) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c)
            acc += alpha[c] * static_cast<double>(a.data[v * C + c]);
        coarse[v] = std::max(0.0, acc);
    }

    SaliencyGrid out;
    out.dims = {static_cast<std::uint32_t>(scale), static_cast<std::uint32_t>(scale),
                static_cast<std::uint32_t>(kCropDepth)};
    out.values.assign(static_cast<std::size_t>(scale) * scale * kCropDepth, 0.0f);

    auto coarse_at = [&](std::size_t x, std::size_t y, std::size_t z) {
        return coarse[(x * Y + y) * Z + z];
    };
    auto sample_axis = [](std::size_t out_i, std::size_t out_n, std::size_t in_n, std::size_t& i0,
                          std::size_t& i1, double& w) {
        const double src = (static_cast<double>(out_i) + 0.5) *
                               (static_cast<double>(in_n) / static_cast<double>(out_n)) -
                           0.5;
        const double clamped = std::clamp(src, 0.0, static_cast<double>(in_n - 1));
        i0 = static_cast<std::size_t>(std::floor(clamped));
        i1 = std::min(i0 + 1, in_n - 1);
        w = clamped - static_cast<double>(i0);
    };

    double maxv = 0.0;
    for (std::size_t ox = 0; ox < scale; ++ox) {
        std::size_t x0, x1;
        double wx;
        sample_axis(ox, scale, X, x0, x1, wx);
        for (std::size_t oy = 0; oy < scale; ++oy) {
            std::size_t y0, y1;
            double wy;
            sample_axis(oy, scale, Y, y0, y1, wy);
            for (std::size_t oz = 0; oz < kCropDepth; ++oz) {
                std::size_t z0, z1;
                double wz;
                sample_axis(oz, kCropDepth, Z, z0, z1, wz);
                const double v =
                    (1 - wx) * ((1 - wy) * ((1 - wz) * coarse_at(x0, y0, z0) +
                                            wz * coarse_at(x0, y0, z1)) +
                                wy * ((1 - wz) * coarse_at(x0, y1, z0) +
                                      wz * coarse_at(x0, y1, z1))) +
                    wx * ((1 - wy) * ((1 - wz) * coarse_at(x1, y0, z0) +
                                      wz * coarse_at(x1, y0, z1)) +
                          wy * ((1 - wz) * coarse_at(x1, y1, z0) +
                                wz * coarse_at(x1, y1, z1)));
                // file order: x fastest, z slowest
                out.values[ox + scale * (oy + scale * oz)] = static_cast<float>(v);
                maxv = std::max(maxv, v);
            }
        }
    }
    if (maxv > 0.0)
        for (auto& v : out.values) v = static_cast<float>(v / maxv);
    return out;
}

// The z slice with the largest saliency sum, dumped as a plain CSV matrix
// (rows over y, columns over x).
inline std::size_t peak_slice(const SaliencyGrid& g) {
    const std::size_t nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
    std::size_t best = 0;
    double best_sum = -1.0;
    for (std::size_t z = 0; z < nz; ++z) {
        double s = 0.0;
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x) s += g.values[x + nx * (y + ny * z)];
        if (s > best_sum) {
            best_sum = s;
            best = z;
        }
    }
    return best;
}

inline void write_saliency_slice_csv(const SaliencyGrid& g, const std::string& path) {
    const std::size_t z = peak_slice(g);
    std::ofstream os(path);
    if (!os) throw DataError("cannot write saliency slice: " + path);
    const std::size_t nx = g.dims[0], ny = g.dims[1];
    os.precision(8);
    for (std::size_t y = 0; y < ny; ++y) {
        for (std::size_t x = 0; x < nx; ++x)
            os << (x ? "," : "") << g.values[x + nx * (y + ny * z)];
        os << '\n';
    }
}

}  // namespace m3net
