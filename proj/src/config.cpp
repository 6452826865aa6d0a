#include "m3net/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "m3net/patches.hpp"

namespace m3net {

using nlohmann::json;

namespace {

// unknown keys are errors, fail-closed
void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError("config section '" + where + "' must be an object");
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown config key '" + it.key() + "' in " + where);
}

template <typename V>
void read_if(const json& obj, const char* key, V& out) {
    if (obj.contains(key)) {
        try {
            out = obj.at(key).get<V>();
        } catch (const std::exception&) {
            throw ConfigError(std::string("bad value type for config key '") + key + "'");
        }
    }
}

EncoderConfig parse_encoder(const json& j, std::size_t scale, const std::string& where) {
    check_keys(j, {"stages"}, where);
    EncoderConfig cfg;
    cfg.scale = scale;
    if (j.contains("stages")) {
        cfg.stages.clear();
        for (const auto& st : j.at("stages")) {
            if (!st.is_array() || st.size() != 2)
                throw ConfigError(where + ".stages entries must be [channels, stride]");
            cfg.stages.push_back({st.at(0).get<std::size_t>(), st.at(1).get<std::size_t>()});
        }
    }
    return cfg;
}

}  // namespace

const EncoderConfig& RunConfig::encoder(std::size_t scale) const {
    auto it = encoders.find(scale);
    if (it == encoders.end())
        throw ConfigError("no encoder config for scale " + std::to_string(scale));
    return it->second;
}

void RunConfig::validate() const {
    if (training.batch < 2)
        throw ConfigError("training.batch must be >= 2 (InfoNCE needs in-batch negatives)");
    if (!(training.lr_max > 0)) throw ConfigError("training.lr_max must be positive");
    if (training.lr_min < 0 || training.lr_min > training.lr_max)
        throw ConfigError("training.lr_min must be in [0, lr_max]");
    if (training.precision != "f32" && training.precision != "f64")
        throw ConfigError("training.precision must be f32 or f64");
    if (training.scales.empty()) throw ConfigError("training.scales must be non-empty");
    for (std::size_t s : training.scales)
        if (s != 32 && s != 64 && s != 96)
            throw ConfigError("training.scales entries must be 32, 64 or 96");
    if (training.freeze_fraction < 0 || training.freeze_fraction > 1)
        throw ConfigError("training.freeze_fraction must be in [0,1]");
    align.validate();
    fusion.validate();
    if (fusion.latent_dim != latent_dim)
        throw ConfigError("fusion latent dim out of sync with alignment latent_dim");
    for (std::size_t s : training.scales) encoder(s).validate();
    if (threshold < 0 || threshold > 1) throw ConfigError("metrics.threshold must be in [0,1]");
}

RunConfig RunConfig::defaults() {
    RunConfig c;
    c.encoders[32] = EncoderConfig{32, kCropDepth, {{16, 2}, {32, 2}, {64, 2}}, 3};
    c.encoders[64] = EncoderConfig{64, kCropDepth, {{16, 2}, {32, 2}, {64, 2}}, 3};
    c.encoders[96] = EncoderConfig{96, kCropDepth, {{16, 2}, {32, 2}, {64, 2}}, 3};
    c.fusion.latent_dim = c.latent_dim;
    return c;
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    check_keys(j, {"data", "encoders", "alignment", "fusion", "training", "metrics"}, "root");
    RunConfig c = defaults();

    if (j.contains("data")) {
        const json& d = j.at("data");
        check_keys(d, {"dir", "manifest", "synth"}, "data");
        read_if(d, "dir", c.data.dir);
        read_if(d, "manifest", c.data.manifest);
        if (d.contains("synth")) {
            const json& s = d.at("synth");
            check_keys(s, {"count", "difficulty", "dims", "hu_offset", "cue_scale", "prefix"},
                       "data.synth");
            read_if(s, "count", c.data.synth.count);
            read_if(s, "difficulty", c.data.synth.difficulty);
            read_if(s, "hu_offset", c.data.synth.hu_offset);
            read_if(s, "cue_scale", c.data.synth.cue_scale);
            read_if(s, "prefix", c.data.synth.prefix);
            if (s.contains("dims")) {
                const auto v = s.at("dims").get<std::vector<std::uint32_t>>();
                if (v.size() != 3) throw ConfigError("data.synth.dims must have 3 entries");
                c.data.synth.dims = {v[0], v[1], v[2]};
            }
        }
    }

    if (j.contains("encoders")) {
        const json& e = j.at("encoders");
        check_keys(e, {"enc32", "enc64", "enc96"}, "encoders");
        if (e.contains("enc32")) c.encoders[32] = parse_encoder(e.at("enc32"), 32, "encoders.enc32");
        if (e.contains("enc64")) c.encoders[64] = parse_encoder(e.at("enc64"), 64, "encoders.enc64");
        if (e.contains("enc96")) c.encoders[96] = parse_encoder(e.at("enc96"), 96, "encoders.enc96");
    }

    if (j.contains("alignment")) {
        const json& a = j.at("alignment");
        check_keys(a,
                   {"latent_dim", "tau", "beta", "lambda_nce", "lambda_cov", "lambda_orth",
                    "lambda_nuc"},
                   "alignment");
        read_if(a, "latent_dim", c.latent_dim);
        read_if(a, "tau", c.align.tau);
        read_if(a, "beta", c.align.beta);
        read_if(a, "lambda_cov", c.align.lambda_cov);
        read_if(a, "lambda_orth", c.align.lambda_orth);
        read_if(a, "lambda_nuc", c.align.lambda_nuc);
        if (a.contains("lambda_nce")) {
            const json& n = a.at("lambda_nce");
            if (n.is_number()) {
                const double v = n.get<double>();
                c.align.lambda_nce_32_64 = c.align.lambda_nce_32_96 = c.align.lambda_nce_64_96 = v;
            } else {
                check_keys(n, {"32_64", "32_96", "64_96"}, "alignment.lambda_nce");
                read_if(n, "32_64", c.align.lambda_nce_32_64);
                read_if(n, "32_96", c.align.lambda_nce_32_96);
                read_if(n, "64_96", c.align.lambda_nce_64_96);
            }
        }
    }

    if (j.contains("fusion")) {
        const json& f = j.at("fusion");
        check_keys(f,
                   {"heads", "ffn_dim", "stage3_depth", "attnreg_weight", "use_lsf", "use_hsf",
                    "use_transformer"},
                   "fusion");
        read_if(f, "heads", c.fusion.heads);
        read_if(f, "ffn_dim", c.fusion.ffn_dim);
        read_if(f, "stage3_depth", c.fusion.stage3_depth);
        read_if(f, "attnreg_weight", c.fusion.attnreg_weight);
        read_if(f, "use_lsf", c.fusion.use_stage1);
        read_if(f, "use_hsf", c.fusion.use_stage2);
        read_if(f, "use_transformer", c.fusion.use_stage3);
    }

    if (j.contains("training")) {
        const json& t = j.at("training");
        check_keys(t,
                   {"epochs_stage1", "epochs_stage2", "epochs_fewshot", "batch", "lr_max",
                    "lr_min", "weight_decay", "l2_lambda", "seed", "freeze_fraction",
                    "stage2_train_backbones", "stage2_fused_ce_only", "augment", "precision",
                    "fewshot_pairs", "scales"},
                   "training");
        read_if(t, "epochs_stage1", c.training.epochs_stage1);
        read_if(t, "epochs_stage2", c.training.epochs_stage2);
        read_if(t, "epochs_fewshot", c.training.epochs_fewshot);
        read_if(t, "batch", c.training.batch);
        read_if(t, "lr_max", c.training.lr_max);
        read_if(t, "lr_min", c.training.lr_min);
        read_if(t, "weight_decay", c.training.weight_decay);
        read_if(t, "l2_lambda", c.training.l2_lambda);
        read_if(t, "seed", c.training.seed);
        read_if(t, "freeze_fraction", c.training.freeze_fraction);
        read_if(t, "stage2_train_backbones", c.training.stage2_train_backbones);
        read_if(t, "stage2_fused_ce_only", c.training.stage2_fused_ce_only);
        read_if(t, "augment", c.training.augment);
        read_if(t, "precision", c.training.precision);
        read_if(t, "fewshot_pairs", c.training.fewshot_pairs);
        read_if(t, "scales", c.training.scales);
    }

    if (j.contains("metrics")) {
        const json& m = j.at("metrics");
        check_keys(m, {"threshold"}, "metrics");
        read_if(m, "threshold", c.threshold);
    }

    c.fusion.latent_dim = c.latent_dim;
    c.validate();
    return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

std::string RunConfig::to_json_text() const {
    json enc = json::object();
    for (const auto& [scale, cfg] : encoders) {
        json stages = json::array();
        for (const auto& s : cfg.stages) stages.push_back({s.channels, s.stride});
        enc["enc" + std::to_string(scale)] = {{"stages", stages}};
    }
    json j = {
        {"data",
         {{"dir", data.dir},
          {"manifest", data.manifest},
          {"synth",
           {{"count", data.synth.count},
            {"difficulty", data.synth.difficulty},
            {"dims", data.synth.dims},
            {"hu_offset", data.synth.hu_offset},
            {"cue_scale", data.synth.cue_scale},
            {"prefix", data.synth.prefix}}}}},
        {"encoders", enc},
        {"alignment",
         {{"latent_dim", latent_dim},
          {"tau", align.tau},
          {"beta", align.beta},
          {"lambda_nce",
           {{"32_64", align.lambda_nce_32_64},
            {"32_96", align.lambda_nce_32_96},
            {"64_96", align.lambda_nce_64_96}}},
          {"lambda_cov", align.lambda_cov},
          {"lambda_orth", align.lambda_orth},
          {"lambda_nuc", align.lambda_nuc}}},
        {"fusion",
         {{"heads", fusion.heads},
          {"ffn_dim", fusion.ffn_dim},
          {"stage3_depth", fusion.stage3_depth},
          {"attnreg_weight", fusion.attnreg_weight},
          {"use_lsf", fusion.use_stage1},
          {"use_hsf", fusion.use_stage2},
          {"use_transformer", fusion.use_stage3}}},
        {"training",
         {{"epochs_stage1", training.epochs_stage1},
          {"epochs_stage2", training.epochs_stage2},
          {"epochs_fewshot", training.epochs_fewshot},
          {"batch", training.batch},
          {"lr_max", training.lr_max},
          {"lr_min", training.lr_min},
          {"weight_decay", training.weight_decay},
          {"l2_lambda", training.l2_lambda},
          {"seed", training.seed},
          {"freeze_fraction", training.freeze_fraction},
          {"stage2_train_backbones", training.stage2_train_backbones},
          {"stage2_fused_ce_only", training.stage2_fused_ce_only},
          {"augment", training.augment},
          {"precision", training.precision},
          {"fewshot_pairs", training.fewshot_pairs},
          {"scales", training.scales}}},
        {"metrics", {{"threshold", threshold}}}};
    return j.dump(2);
}

}  // namespace m3net
