#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "m3net/manifest.hpp"
#include "m3net/patches.hpp"
#include "m3net/volume.hpp"

namespace m3net {

struct Sample {
    Volume volume;
    int label = 0;
    std::string id;  // volume file stem, the sample identity
};

struct Dataset {
    std::vector<Sample> samples;

    std::size_t size() const { return samples.size(); }

    // split_filter "" loads everything regardless of tag.
    static Dataset load(const std::string& manifest_path, const std::string& dir,
                        const std::string& split_filter) {
        const Manifest m = read_manifest(manifest_path);
        Dataset ds;
        for (const auto& e : m.entries) {
            if (!split_filter.empty() && e.split != split_filter) continue;
            Sample s;
            const auto p = std::filesystem::path(dir) / e.path;
            s.volume = read_volume(p.string());
            if (s.volume.centroid != e.centroid)
                throw DataError("manifest centroid disagrees with volume header for " + e.path);
            s.label = binarize_label(e.scores);
            s.id = std::filesystem::path(e.path).stem().string();
            ds.samples.push_back(std::move(s));
        }
        return ds;
    }
};

}  // namespace m3net
