#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "m3net/ablate.hpp"
#include "m3net/checks.hpp"
#include "m3net/config.hpp"
#include "m3net/dataset.hpp"
#include "m3net/gradcam.hpp"
#include "m3net/metrics.hpp"
#include "m3net/synth.hpp"
#include "m3net/trainer.hpp"

namespace fs = std::filesystem;
using namespace m3net;

namespace {

struct Common {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string out = "out";
};

RunConfig resolve_config(const Common& c) {
    RunConfig cfg = c.config_path.empty() ? RunConfig::defaults()
                                          : RunConfig::from_file(c.config_path);
    if (c.seed_given) cfg.training.seed = c.seed;
    cfg.validate();
    return cfg;
}

void echo_config(const RunConfig& cfg) {
    std::cout << "resolved seed: " << cfg.training.seed << "\n";
    std::cout << "resolved config:\n" << cfg.to_json_text() << "\n";
}

std::string manifest_path(const RunConfig& cfg) {
    return (fs::path(cfg.data.dir) / cfg.data.manifest).string();
}

PredictionSet read_predictions_csv(const std::string& path, double threshold) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open predictions file: " + path);
    std::string line;
    if (!std::getline(is, line)) throw DataError("empty predictions file: " + path);
    if (line != "score,label" && line != "score,label\r")
        throw DataError("predictions header must be `score,label`");
    PredictionSet p;
    p.threshold = threshold;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw DataError("bad predictions line: " + line);
        p.scores.push_back(std::stod(line.substr(0, comma)));
        p.labels.push_back(std::stoi(line.substr(comma + 1)));
    }
    return p;
}

void write_predictions_csv(const PredictionSet& p, const std::string& path) {
    std::ofstream os(path);
    os.precision(12);
    os << "score,label\n";
    for (std::size_t i = 0; i < p.scores.size(); ++i)
        os << p.scores[i] << ',' << p.labels[i] << '\n';
}

void write_report(const MetricsReport& r, const std::string& out_dir, const std::string& stem) {
    fs::create_directories(out_dir);
    std::ofstream js((fs::path(out_dir) / (stem + ".json")).string());
    js << r.to_json() << '\n';
    std::ofstream cs((fs::path(out_dir) / (stem + ".csv")).string());
    cs.precision(12);
    cs << MetricsReport::csv_header() << '\n' << r.csv_row() << '\n';
}

int run(int argc, char** argv) {
    CLI::App app{"m3net: macro-meso-micro hierarchical 3D nodule classifier"};
    app.require_subcommand(1);
    app.fallthrough();

    Common common;
    app.add_option("--config", common.config_path, "JSON run config");
    auto* seed_opt = app.add_option("--seed", common.seed, "override training seed (default 0)");
    app.add_option("--out", common.out, "output directory");

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset into data.dir");
    auto* split = app.add_subcommand("split", "stratified 70/10/20 split of the manifest");
    auto* train1 = app.add_subcommand("train1", "stage-1 per-scale pretraining");
    auto* train2 = app.add_subcommand("train2", "stage-2 fusion training");
    auto* fewshot = app.add_subcommand("fewshot", "few-shot fine-tune with replay");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or a predictions file");
    auto* ablate = app.add_subcommand("ablate", "run an ablation lattice");
    auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    auto* params_cmd = app.add_subcommand("params", "parameter and FLOP accounting");
    auto* gradcam_cmd = app.add_subcommand("gradcam", "saliency volume for one sample");

    std::string ckpt_dir, checkpoint, preds_file, split_name = "test";
    std::string target_dir, target_manifest = "manifest.csv";
    std::string kind = "inputs", sample_id;
    std::vector<std::uint64_t> seeds{0};
    std::size_t gc_seeds = 20;
    std::size_t cam_scale = 64, cam_stage = ~std::size_t{0};
    int cam_target = -1;

    train2->add_option("--checkpoint", ckpt_dir, "directory with stage-1 checkpoints");
    fewshot->add_option("--checkpoint", checkpoint, "fused checkpoint path");
    fewshot->add_option("--target-dir", target_dir, "domain-shifted dataset directory")
        ->required();
    fewshot->add_option("--target-manifest", target_manifest, "target manifest name");
    eval->add_option("--checkpoint", checkpoint, "fused checkpoint path");
    eval->add_option("--preds", preds_file, "score,label CSV to evaluate directly");
    eval->add_option("--split", split_name, "split to evaluate (train/val/test)");
    ablate->add_option("--kind", kind, "crop|modules|inputs|losses|augmentation")->required();
    ablate->add_option("--seeds", seeds, "seed list");
    gradcheck_cmd->add_option("--gc-seeds", gc_seeds, "seeds per component");
    gradcam_cmd->add_option("--checkpoint", checkpoint, "fused checkpoint path")->required();
    gradcam_cmd->add_option("--sample", sample_id, "sample id (volume stem)")->required();
    gradcam_cmd->add_option("--scale", cam_scale, "encoder scale (32/64/96)");
    gradcam_cmd->add_option("--stage", cam_stage, "encoder stage (default: last)");
    gradcam_cmd->add_option("--target", cam_target, "target class (default: predicted)");

    CLI11_PARSE(app, argc, argv);
    common.seed_given = seed_opt->count() > 0;

    RunConfig cfg = resolve_config(common);
    echo_config(cfg);
    fs::create_directories(common.out);

    if (synth->parsed()) {
        synth_generate(cfg.data.synth, cfg.training.seed, cfg.data.dir);
        std::cout << "wrote " << cfg.data.synth.count << " volumes to " << cfg.data.dir << "\n";
        return 0;
    }

    if (split->parsed()) {
        Manifest m = read_manifest(manifest_path(cfg));
        Manifest tagged = split_dataset(m, cfg.training.seed);
        write_manifest(tagged, manifest_path(cfg));
        std::size_t n_train = 0, n_val = 0, n_test = 0;
        for (const auto& e : tagged.entries) {
            if (e.split == "train") ++n_train;
            else if (e.split == "val") ++n_val;
            else ++n_test;
        }
        std::cout << "split: train=" << n_train << " val=" << n_val << " test=" << n_test
                  << "\n";
        return 0;
    }

    if (eval->parsed() && !preds_file.empty()) {
        PredictionSet p = read_predictions_csv(preds_file, cfg.threshold);
        MetricsReport r = compute_metrics(p);
        write_report(r, common.out, "metrics");
        std::cout << r.to_json() << "\n";
        return 0;
    }

    if (gradcheck_cmd->parsed()) {
        bool all_pass = true;
        for (const auto& r : gradcheck_suite(cfg.training.seed, gc_seeds)) {
            std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.component
                      << " worst_rel_err=" << r.worst_rel_err << " tol=" << r.tol
                      << " seeds=" << r.seeds << "\n";
            all_pass = all_pass && r.pass;
        }
        if (!all_pass) return 4;
        return 0;
    }

    if (params_cmd->parsed()) {
        M3Model<float> model = M3Model<float>::build(cfg, cfg.training.seed);
        std::size_t gross = 0;
        std::cout << "component,params,flops_per_sample\n";
        for (std::size_t s : model.scales) {
            std::size_t n = 0;
            for (const auto& name : model.encoder_param_names(s))
                n += model.store.at(name).value.numel();
            const std::size_t fl = count_encoder_flops(cfg.encoder(s));
            gross += fl;
            std::cout << "enc" << s << "," << n << "," << fl << "\n";
        }
        std::size_t fusion_params = 0;
        for (const auto& p : model.store.all())
            if (p.name.rfind("fusion.", 0) == 0 || p.name.rfind("proj", 0) == 0)
                fusion_params += p.value.numel();
        const std::size_t l32 = cfg.encoder(32).token_count();
        const std::size_t l64 = cfg.encoder(64).token_count();
        const std::size_t l96 = cfg.encoder(96).token_count();
        const std::size_t ffl = count_fusion_flops(cfg.fusion, l32, l64, l96);
        gross += ffl;
        std::cout << "fusion," << fusion_params << "," << ffl << "\n";
        std::cout << "total," << model.store.count_scalars(false) << "," << gross << "\n";
        std::cout << "trainable," << model.store.count_scalars(true) << ",\n";
        return 0;
    }

    // remaining commands need datasets
    const std::string mpath = manifest_path(cfg);
    auto load_split = [&](const std::string& which) {
        return Dataset::load(mpath, cfg.data.dir, which);
    };

    if (train1->parsed()) {
        Trainer<float> trainer(cfg, load_split("train"), load_split("val"), load_split("test"),
                               &std::cerr);
        auto log = trainer.stage1_pretrain(common.out);
        write_log(log, common.out + "/stage1_log.jsonl");
        std::cout << "stage-1 checkpoints in " << common.out << "\n";
        return 0;
    }

    if (train2->parsed()) {
        Trainer<float> trainer(cfg, load_split("train"), load_split("val"), load_split("test"),
                               &std::cerr);
        const std::string dir = ckpt_dir.empty() ? common.out : ckpt_dir;
        std::vector<std::string> ckpts;
        for (std::size_t s : trainer.model().scales)
            ckpts.push_back(Trainer<float>::stage1_ckpt_path(dir, s));
        auto log = trainer.stage2_fuse(common.out, ckpts);
        write_log(log, common.out + "/stage2_log.jsonl");
        std::cout << "fused checkpoint: " << common.out << "/fused.ckpt\n";
        return 0;
    }

    if (fewshot->parsed()) {
        Trainer<float> trainer(cfg, load_split("train"), load_split("val"), load_split("test"),
                               &std::cerr);
        trainer.load_fused_checkpoint(checkpoint.empty() ? common.out + "/fused.ckpt"
                                                         : checkpoint);
        const std::string tm = (fs::path(target_dir) / target_manifest).string();
        Dataset t_train = Dataset::load(tm, target_dir, "train");
        Dataset t_val = Dataset::load(tm, target_dir, "val");
        Dataset t_test = Dataset::load(tm, target_dir, "test");
        auto log = trainer.few_shot_finetune(t_train, t_val, t_test, common.out);
        write_log(log, common.out + "/fewshot_log.jsonl");
        MetricsReport r = compute_metrics(trainer.predict_fused(t_test));
        write_report(r, common.out, "fewshot_target_test");
        std::cout << r.to_json() << "\n";
        return 0;
    }

    if (eval->parsed()) {
        Trainer<float> trainer(cfg, load_split("train"), load_split("val"), load_split("test"),
                               nullptr);
        trainer.load_fused_checkpoint(checkpoint.empty() ? common.out + "/fused.ckpt"
                                                         : checkpoint);
        Dataset ds = load_split(split_name);
        PredictionSet p = trainer.predict_fused(ds);
        write_predictions_csv(p, common.out + "/predictions.csv");
        MetricsReport r = compute_metrics(p);
        write_report(r, common.out, "metrics");
        std::cout << r.to_json() << "\n";
        return 0;
    }

    if (ablate->parsed()) {
        AblateOptions opt;
        opt.kind = ablation_kind_from_string(kind);
        opt.seeds = seeds;
        opt.base = cfg;
        opt.out_dir = common.out;
        const std::string csv = run_ablation(opt, &std::cerr);
        std::cout << "ablation table: " << csv << "\n";
        return 0;
    }

    if (gradcam_cmd->parsed()) {
        Trainer<float> trainer(cfg, load_split("train"), load_split("val"), load_split("test"),
                               nullptr);
        trainer.load_fused_checkpoint(checkpoint);
        Dataset all = Dataset::load(mpath, cfg.data.dir, "");
        const Sample* found = nullptr;
        for (const auto& s : all.samples)
            if (s.id == sample_id) found = &s;
        if (!found) throw DataError("no sample with id " + sample_id);
        NestedPatchSet patch = extract_nested(found->volume);
        patch.label = found->label;
        patch.source_id = found->id;
        M3Model<float>& model = trainer.model();
        const std::size_t stage = cam_stage == ~std::size_t{0}
                                      ? model.enc_cfg.at(cam_scale).stages.size() - 1
                                      : cam_stage;
        int target = cam_target;
        if (target < 0) {
            Dataset one;
            one.samples.push_back(*found);
            PredictionSet p = trainer.predict_fused(one);
            target = p.scores[0] >= cfg.threshold ? 1 : 0;
        }
        SaliencyGrid sal = gradcam(model, patch, cam_scale, stage, target);
        const std::string stem = common.out + "/saliency_" + sample_id;
        write_saliency(sal, stem + ".m3nsal");
        write_saliency_slice_csv(sal, stem + "_slice.csv");
        std::cout << "saliency: " << stem << ".m3nsal (peak slice z=" << peak_slice(sal)
                  << ")\n";
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric check failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
