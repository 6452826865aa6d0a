#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "m3net/alignment.hpp"
#include "m3net/encoder.hpp"
#include "m3net/fusion.hpp"
#include "m3net/synth.hpp"

namespace m3net {

struct DataConfig {
    std::string dir = "data";
    std::string manifest = "manifest.csv";
    SynthParams synth;
};

struct TrainConfig {
    std::size_t epochs_stage1 = 200;
    std::size_t epochs_stage2 = 200;
    std::size_t epochs_fewshot = 10;
    std::size_t batch = 32;
    double lr_max = 1e-4;
    double lr_min = 0.0;
    double weight_decay = 1e-5;
    double l2_lambda = 1e-3;
    std::uint64_t seed = 0;
    double freeze_fraction = 0.5;
    bool stage2_train_backbones = false;  // default follows the full-freeze protocol
    bool stage2_fused_ce_only = false;    // default sums per-scale CE and fused CE
    bool augment = true;
    std::string precision = "f32";  // "f32" or "f64"
    std::size_t fewshot_pairs = 20;
    std::vector<std::size_t> scales{32, 64, 96};
};

struct RunConfig {
    DataConfig data;
    std::map<std::size_t, EncoderConfig> encoders;  // keyed by scale
    std::size_t latent_dim = 32;
    AlignWeights<double> align;
    FusionConfig fusion;
    TrainConfig training;
    double threshold = 0.5;

    void validate() const;
    const EncoderConfig& encoder(std::size_t scale) const;

    static RunConfig defaults();
    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_file(const std::string& path);
    std::string to_json_text() const;  // resolved-config echo
};

}  // namespace m3net
