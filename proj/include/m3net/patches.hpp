#pragma once

#include <string>
#include <vector>

#include "m3net/rng.hpp"
#include "m3net/tensor.hpp"
#include "m3net/volume.hpp"

namespace m3net {

inline constexpr float kAirFillHu = -1000.0f;
inline constexpr std::size_t kCropDepth = 56;

// The three concentric crops for one nodule. Values are raw HU; scaling to
// network units happens at encoder input. Patch layout is [s, s, 56] with the
// depth axis fastest.
struct NestedPatchSet {
    TensorData<float> x96;  // [96,96,56]
    TensorData<float> x64;  // [64,64,56]
    TensorData<float> x32;  // [32,32,56]
    int label = 0;          // 0 benign, 1 malignant
    std::string source_id;

    const TensorData<float>& crop(std::size_t scale) const {
        switch (scale) {
            case 96: return x96;
            case 64: return x64;
            case 32: return x32;
        }
        throw ShapeError("no nested crop of size " + std::to_string(scale));
    }
};

// Crop of size s x s x depth centered on v.centroid: crop index i maps to
// source coordinate centroid + i - floor(s/2). Out-of-bounds voxels take the
// air fill value.
TensorData<float> extract_crop(const Volume& v, std::size_t size_xy,
                               std::size_t depth = kCropDepth);

NestedPatchSet extract_nested(const Volume& v);

// Mean reader score > 3 is malignant; <= 3 benign. Scores must be in [1,5].
int binarize_label(const std::vector<int>& scores);

// Coin-flip vertical flip and coin-flip in-plane rotation (angle uniform in
// [0, 180] degrees, bilinear in-plane resampling, air fill). The same sampled
// transform applies to all three scales; label is untouched.
NestedPatchSet augment(const NestedPatchSet& p, Rng& rng);

}  // namespace m3net
