#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "m3net/manifest.hpp"

namespace m3net {

// Synthetic volume generator. Malignant samples carry up to three
// scale-separated cues over a textured lung-like background:
//   - spiculated nodule margin       (inside the 32 crop)
//   - vessel-like tube, radii 23-33  (outside the 32 crop, inside the 64)
//   - peripheral density arc, 46-47.5 (outside the 64 crop, inside the 96)
// Benign samples have the same nodule/texture statistics and none of the cues.
// difficulty 0 puts every cue on every malignant sample at full strength with
// low noise; higher values draw a random non-empty cue subset and raise noise.
struct SynthParams {
    std::size_t count = 4;
    double difficulty = 0.5;
    std::array<std::uint32_t, 3> dims{104, 104, 60};
    double hu_offset = 0.0;   // additive HU shift (domain-shift experiments)
    double cue_scale = 1.0;   // multiplies all cue amplitudes
    std::string prefix = "vol";
};

struct SynthSampleMeta {
    std::string id;
    int label = 0;
    std::array<double, 3> radii{};  // nodule ellipsoid radii
    bool cue_spic = false, cue_tube = false, cue_shell = false;
};

struct SynthOutput {
    Manifest manifest;  // untagged splits
    std::vector<SynthSampleMeta> meta;
};

// Writes count volumes plus manifest.csv and synth_meta.json into out_dir.
SynthOutput synth_generate(const SynthParams& p, std::uint64_t seed,
                           const std::string& out_dir);

void write_synth_meta(const std::vector<SynthSampleMeta>& meta, const std::string& path);
std::vector<SynthSampleMeta> read_synth_meta(const std::string& path);

}  // namespace m3net
