#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "m3net/errors.hpp"

namespace m3net {

// 3-d scalar field in Hounsfield-like units. Voxel order is x fastest,
// z slowest, matching the on-disk layout.
struct Volume {
    std::array<std::uint32_t, 3> dims{};      // nx, ny, nz
    std::array<float, 3> spacing{1, 1, 1};    // mm per voxel
    std::array<std::uint32_t, 3> centroid{};  // annotated nodule center, voxel coords
    std::vector<std::int16_t> voxels;

    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
        return x + static_cast<std::size_t>(dims[0]) * (y + static_cast<std::size_t>(dims[1]) * z);
    }
    std::int16_t at(std::size_t x, std::size_t y, std::size_t z) const {
        return voxels[index(x, y, z)];
    }
    std::int16_t& at(std::size_t x, std::size_t y, std::size_t z) {
        return voxels[index(x, y, z)];
    }
    std::size_t numel() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }

    void validate() const;
};

// "M3NVOL1" container: magic, u32 dims, f32 spacing, u32 centroid, i16 voxels.
Volume read_volume(const std::string& path);
void write_volume(const Volume& v, const std::string& path);

// "M3NSAL1" container: as M3NVOL1 but f32 voxels and no centroid field.
struct SaliencyGrid {
    std::array<std::uint32_t, 3> dims{};
    std::array<float, 3> spacing{1, 1, 1};
    std::vector<float> values;
};

SaliencyGrid read_saliency(const std::string& path);
void write_saliency(const SaliencyGrid& s, const std::string& path);

}  // namespace m3net
