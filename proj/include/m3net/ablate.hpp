#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "m3net/config.hpp"
#include "m3net/dataset.hpp"

namespace m3net {

// Ablation lattices mirroring the paper's tables: module toggles (7 variants),
// input-scale subsets (7), loss components (5), augmentation on/off (2), and
// five single-scale crop sizes.
enum class AblationKind { Crop, Modules, Inputs, Losses, Augmentation };

AblationKind ablation_kind_from_string(const std::string& s);
std::string ablation_kind_name(AblationKind k);

struct AblationVariant {
    std::string name;                 // a..g row tag
    std::vector<int> toggles;         // kind-specific indicator columns
    RunConfig cfg;                    // fully resolved variant config
    std::size_t crop_size = 0;        // crop kind only
};

std::vector<AblationVariant> make_ablation_variants(AblationKind kind, const RunConfig& base);

// Column layout is frozen per kind so re-runs diff cleanly.
std::vector<std::string> ablation_toggle_columns(AblationKind kind);

struct AblateOptions {
    AblationKind kind = AblationKind::Inputs;
    std::vector<std::uint64_t> seeds{0};
    RunConfig base;
    std::string out_dir = "out";
};

// Runs every (variant, seed), appends a mean row per variant, and writes one
// CSV. Stage-1 checkpoints are shared across variants whose stage-1 setup is
// identical (everything except the augmentation and crop kinds).
std::string run_ablation(const AblateOptions& opt, std::ostream* progress = nullptr);

}  // namespace m3net
