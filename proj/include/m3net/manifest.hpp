#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "m3net/errors.hpp"

namespace m3net {

struct ManifestEntry {
    std::string path;
    std::array<std::uint32_t, 3> centroid{};
    std::vector<int> scores;  // per-reader malignancy, 1-5
    std::string split;        // "", "train", "val" or "test"
};

struct Manifest {
    std::vector<ManifestEntry> entries;
};

// CSV with header `path,cx,cy,cz,scores,split`; scores are |-separated.
Manifest read_manifest(const std::string& path);
void write_manifest(const Manifest& m, const std::string& path);

// Per binary class: floor(0.1 n) to val, floor(0.2 n) to test, remainder to
// train. Deterministic under seed; classes with fewer than 3 entries cannot
// be stratified and are rejected.
Manifest split_dataset(const Manifest& m, std::uint64_t seed);

}  // namespace m3net
