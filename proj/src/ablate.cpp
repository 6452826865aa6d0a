#include "m3net/ablate.hpp"

#include <filesystem>
#include <fstream>
#include <map>

#include "m3net/metrics.hpp"
#include "m3net/optim.hpp"
#include "m3net/trainer.hpp"

namespace m3net {

namespace fs = std::filesystem;

AblationKind ablation_kind_from_string(const std::string& s) {
    if (s == "crop") return AblationKind::Crop;
    if (s == "modules") return AblationKind::Modules;
    if (s == "inputs") return AblationKind::Inputs;
    if (s == "losses") return AblationKind::Losses;
    if (s == "augmentation") return AblationKind::Augmentation;
    throw ConfigError("unknown ablation kind: " + s);
}

std::string ablation_kind_name(AblationKind k) {
    switch (k) {
        case AblationKind::Crop: return "crop";
        case AblationKind::Modules: return "modules";
        case AblationKind::Inputs: return "inputs";
        case AblationKind::Losses: return "losses";
        case AblationKind::Augmentation: return "augmentation";
    }
    return "?";
}

std::vector<std::string> ablation_toggle_columns(AblationKind kind) {
    switch (kind) {
        case AblationKind::Crop: return {"crop_size"};
        case AblationKind::Modules: return {"lsf", "hsf", "transformer"};
        case AblationKind::Inputs: return {"x32", "x64", "x96"};
        case AblationKind::Losses: return {"l_align", "l_cov", "l_orth", "l_nuc"};
        case AblationKind::Augmentation: return {"augment"};
    }
    return {};
}

std::vector<AblationVariant> make_ablation_variants(AblationKind kind, const RunConfig& base) {
    std::vector<AblationVariant> out;
    auto add = [&](const std::string& name, std::vector<int> toggles, RunConfig cfg,
                   std::size_t crop = 0) {
        out.push_back(AblationVariant{name, std::move(toggles), std::move(cfg), crop});
    };
    switch (kind) {
        case AblationKind::Modules: {
            const int rows[7][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0},
                                    {1, 0, 1}, {0, 1, 1}, {1, 1, 1}};
            for (int i = 0; i < 7; ++i) {
                RunConfig c = base;
                c.fusion.use_stage1 = rows[i][0];
                c.fusion.use_stage2 = rows[i][1];
                c.fusion.use_stage3 = rows[i][2];
                add(std::string(1, static_cast<char>('a' + i)),
                    {rows[i][0], rows[i][1], rows[i][2]}, std::move(c));
            }
            break;
        }
        case AblationKind::Inputs: {
            const int rows[7][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0},
                                    {1, 0, 1}, {0, 1, 1}, {1, 1, 1}};
            for (int i = 0; i < 7; ++i) {
                RunConfig c = base;
                c.training.scales.clear();
                if (rows[i][0]) c.training.scales.push_back(32);
                if (rows[i][1]) c.training.scales.push_back(64);
                if (rows[i][2]) c.training.scales.push_back(96);
                add(std::string(1, static_cast<char>('a' + i)),
                    {rows[i][0], rows[i][1], rows[i][2]}, std::move(c));
            }
            break;
        }
        case AblationKind::Losses: {
            const int rows[5][4] = {
                {1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}, {1, 1, 1, 1}};
            for (int i = 0; i < 5; ++i) {
                RunConfig c = base;
                if (!rows[i][0]) {
                    c.align.lambda_nce_32_64 = 0;
                    c.align.lambda_nce_32_96 = 0;
                    c.align.lambda_nce_64_96 = 0;
                }
                if (!rows[i][1]) c.align.lambda_cov = 0;
                if (!rows[i][2]) c.align.lambda_orth = 0;
                if (!rows[i][3]) c.align.lambda_nuc = 0;
                add(std::string(1, static_cast<char>('a' + i)),
                    {rows[i][0], rows[i][1], rows[i][2], rows[i][3]}, std::move(c));
            }
            break;
        }
        case AblationKind::Augmentation: {
            RunConfig off = base;
            off.training.augment = false;
            add("without", {0}, std::move(off));
            RunConfig on = base;
            on.training.augment = true;
            add("with", {1}, std::move(on));
            break;
        }
        case AblationKind::Crop: {
            const std::size_t sizes[5] = {32, 48, 64, 80, 96};
            for (int i = 0; i < 5; ++i) {
                add(std::string(1, static_cast<char>('a' + i)),
                    {static_cast<int>(sizes[i])}, base, sizes[i]);
            }
            break;
        }
    }
    return out;
}

namespace {

// Single-scale classifier for the crop-size table: encoder + head trained with
// plain cross entropy on crops of arbitrary in-plane size.
MetricsReport run_crop_variant(const RunConfig& base, std::size_t crop_size,
                               const Dataset& train, const Dataset& val, const Dataset& test,
                               std::uint64_t seed, std::ostream* progress) {
    EncoderConfig cfg = base.encoder(64);  // stage pattern template
    cfg.scale = crop_size;
    cfg.validate();
    using T = float;
    ParamStore<T> store;
    add_encoder_params(store, cfg, seed);
    add_head_params(store, cfg, seed);

    auto batch_of = [&](const Dataset& ds, const std::vector<std::size_t>& idx, Tape<T>& tape,
                        bool aug, std::size_t epoch) {
        TensorData<T> x({idx.size(), crop_size, crop_size, kCropDepth, 1});
        std::vector<int> labels;
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const Sample& s = ds.samples[idx[b]];
            NestedPatchSet p;
            p.x96 = extract_crop(s.volume, crop_size);
            p.x64 = p.x96;
            p.x32 = p.x96;
            if (aug && base.training.augment) {
                Rng arng = Rng(seed).derive("augment.crop", epoch, hash_str(s.id));
                p = augment(p, arng);
            }
            const TensorData<float>& crop = p.x96;
            T* dst = x.data.data() + b * crop.numel();
            for (std::size_t i = 0; i < crop.numel(); ++i)
                dst[i] = static_cast<T>(crop.data[i] * kHuScale);
            labels.push_back(s.label);
        }
        return std::make_pair(tape.leaf(std::move(x), false), labels);
    };

    AdamW<T> opt;
    const std::size_t B = base.training.batch;
    const std::size_t steps_per_epoch = std::max<std::size_t>(1, train.size() / B);
    const std::size_t total = std::max<std::size_t>(1, base.training.epochs_stage1 * steps_per_epoch);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < base.training.epochs_stage1; ++epoch) {
        std::vector<std::size_t> order(train.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng = Rng(seed).derive("order.crop", epoch);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_int(i)]);
        for (std::size_t start = 0; start + 2 <= order.size(); start += B) {
            const std::size_t end = std::min(order.size(), start + B);
            std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
            Tape<T> tape;
            LeafMap<T> leaves = bind_leaves(tape, store, false);
            auto [x, labels] = batch_of(train, idx, tape, true, epoch);
            ScaleEmbedding<T> emb = encoder_forward(cfg, leaves, x);
            Var<T> logits = head_forward(cfg, leaves, emb.pooled);
            Var<T> loss = ops::cross_entropy_logits(logits, labels);
            if (base.training.l2_lambda > 0) {
                Var<T> l2 = tape.constant(TensorData<T>::scalar(T(0)));
                for (const auto& p : store.all()) l2 = ops::add(l2, ops::sumsq(leaves.at(p.name)));
                loss = ops::add(loss, ops::mul_scalar(l2, static_cast<T>(0.5 * base.training.l2_lambda)));
            }
            tape.backward(loss);
            const double lr = cosine_lr(step, total, base.training.lr_max, base.training.lr_min);
            opt.step(store, tape.grad_map(), static_cast<T>(lr),
                     static_cast<T>(base.training.weight_decay));
            ++step;
        }
        if (progress) (*progress) << "crop[" << crop_size << "] epoch " << epoch << "\n";
    }
    (void)val;

    PredictionSet preds;
    preds.threshold = base.threshold;
    for (std::size_t start = 0; start < test.size(); start += B) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(test.size(), start + B); ++i) idx.push_back(i);
        Tape<T> tape;
        LeafMap<T> leaves = bind_leaves(tape, store, false);
        auto [x, labels] = batch_of(test, idx, tape, false, 0);
        ScaleEmbedding<T> emb = encoder_forward(cfg, leaves, x);
        Var<T> probs = ops::softmax_lastdim(head_forward(cfg, leaves, emb.pooled));
        for (std::size_t b = 0; b < idx.size(); ++b) {
            preds.scores.push_back(static_cast<double>(probs.value().data[b * 2 + 1]));
            preds.labels.push_back(labels[b]);
        }
    }
    return compute_metrics(preds);
}

MetricsReport run_fused_variant(const AblationVariant& v, const Dataset& train,
                                const Dataset& val, const Dataset& test, std::uint64_t seed,
                                const std::string& stage1_dir, std::ostream* progress) {
    RunConfig cfg = v.cfg;
    cfg.training.seed = seed;
    Trainer<float> trainer(cfg, train, val, test, progress);
    std::vector<std::string> ckpts;
    for (std::size_t s : trainer.model().scales)
        ckpts.push_back(Trainer<float>::stage1_ckpt_path(stage1_dir, s));
    const std::string vdir = stage1_dir + "/variant_" + v.name;
    fs::create_directories(vdir);
    trainer.stage2_fuse(vdir, ckpts);
    PredictionSet preds = trainer.predict_fused(test);
    return compute_metrics(preds);
}

void append_metrics_row(std::ostream& os, const std::string& variant,
                        const std::vector<int>& toggles, const std::string& seed_tag,
                        const MetricsReport& r) {
    os << variant;
    for (int t : toggles) os << ',' << t;
    os << ',' << seed_tag << ',' << r.csv_row() << '\n';
}

}  // namespace

std::string run_ablation(const AblateOptions& opt, std::ostream* progress) {
    fs::create_directories(opt.out_dir);
    const auto variants = make_ablation_variants(opt.kind, opt.base);

    const std::string manifest_path =
        (fs::path(opt.base.data.dir) / opt.base.data.manifest).string();
    Dataset train = Dataset::load(manifest_path, opt.base.data.dir, "train");
    Dataset val = Dataset::load(manifest_path, opt.base.data.dir, "val");
    Dataset test = Dataset::load(manifest_path, opt.base.data.dir, "test");

    const std::string csv_path =
        (fs::path(opt.out_dir) / ("ablate_" + ablation_kind_name(opt.kind) + ".csv")).string();
    std::ofstream os(csv_path);
    if (!os) throw DataError("cannot write ablation csv: " + csv_path);
    os << "variant";
    for (const auto& c : ablation_toggle_columns(opt.kind)) os << ',' << c;
    os << ",seed," << MetricsReport::csv_header() << '\n';
    os.precision(12);

    // stage-1 checkpoints shared across variants with identical stage-1 setup
    const bool share_stage1 =
        opt.kind == AblationKind::Modules || opt.kind == AblationKind::Inputs ||
        opt.kind == AblationKind::Losses;

    for (const auto& v : variants) {
        std::vector<MetricsReport> per_seed;
        for (std::uint64_t seed : opt.seeds) {
            MetricsReport r;
            if (opt.kind == AblationKind::Crop) {
                r = run_crop_variant(v.cfg, v.crop_size, train, val, test, seed, progress);
            } else {
                const std::string s1dir =
                    (fs::path(opt.out_dir) / ("stage1_seed" + std::to_string(seed) +
                                              (share_stage1 ? "" : "_" + v.name)))
                        .string();
                fs::create_directories(s1dir);
                RunConfig s1cfg = v.cfg;
                s1cfg.training.seed = seed;
                s1cfg.training.scales = {32, 64, 96};  // train all, variants load subsets
                if (!fs::exists(Trainer<float>::stage1_ckpt_path(s1dir, 96))) {
                    Trainer<float> t1(s1cfg, train, val, test, progress);
                    t1.stage1_pretrain(s1dir);
                }
                r = run_fused_variant(v, train, val, test, seed, s1dir, progress);
            }
            per_seed.push_back(r);
            append_metrics_row(os, v.name, v.toggles, std::to_string(seed), r);
            if (progress)
                (*progress) << "ablate " << ablation_kind_name(opt.kind) << " variant " << v.name
                            << " seed " << seed << " acc=" << r.acc << "\n";
        }
        MetricsReport mean;
        for (const auto& r : per_seed) {
            mean.acc += r.acc; mean.acc_std += r.acc_std; mean.bacc += r.bacc;
            mean.precision += r.precision; mean.recall += r.recall;
            mean.specificity += r.specificity; mean.f1 += r.f1;
            mean.roc_auc += r.roc_auc; mean.pr_auc += r.pr_auc;
        }
        const double n = static_cast<double>(per_seed.size());
        mean.acc /= n; mean.acc_std /= n; mean.bacc /= n; mean.precision /= n;
        mean.recall /= n; mean.specificity /= n; mean.f1 /= n; mean.roc_auc /= n;
        mean.pr_auc /= n;
        append_metrics_row(os, v.name, v.toggles, "mean", mean);
    }
    return csv_path;
}

}  // namespace m3net
