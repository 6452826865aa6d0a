#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "m3net/checkpoint.hpp"
#include "m3net/config.hpp"
#include "m3net/dataset.hpp"
#include "m3net/metrics.hpp"
#include "m3net/model.hpp"
#include "m3net/optim.hpp"

namespace m3net {

inline constexpr float kHuScale = 1.0f / 1000.0f;  // raw HU -> network units

struct EpochLog {
    std::size_t epoch = 0;
    std::string split;
    double loss_total = 0, loss_ce = 0, loss_align = 0, loss_attnreg = 0, loss_l2 = 0;
    double acc = 0;
    std::size_t acc_count_ = 0;  // running sample count while accumulating

    std::string json_line() const {
        char buf[320];
        std::snprintf(buf, sizeof buf,
                      "{\"epoch\":%zu,\"split\":\"%s\",\"loss_total\":%.9g,\"loss_ce\":%.9g,"
                      "\"loss_align\":%.9g,\"loss_attnreg\":%.9g,\"loss_l2\":%.9g,\"acc\":%.9g}",
                      epoch, split.c_str(), loss_total, loss_ce, loss_align, loss_attnreg,
                      loss_l2, acc);
        return buf;
    }
};

inline void write_log(const std::vector<EpochLog>& log, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write metric log: " + path);
    for (const auto& e : log) os << e.json_line() << '\n';
}

template <typename T>
class Trainer {
public:
    Trainer(RunConfig cfg, Dataset train, Dataset val, Dataset test,
            std::ostream* progress = nullptr)
        : cfg_(std::move(cfg)),
          train_(std::move(train)),
          val_(std::move(val)),
          test_(std::move(test)),
          progress_(progress) {
        cfg_.validate();
        model_ = M3Model<T>::build(cfg_, cfg_.training.seed);
    }

    M3Model<T>& model() { return model_; }
    const RunConfig& config() const { return cfg_; }

    // ------------------------------------------------------------- stage 1

    // Supervised pretraining of each scale branch on its own crop stream.
    // Best-val parameters (accuracy, ties by lower val loss) are retained and
    // written as one checkpoint per scale.
    std::vector<EpochLog> stage1_pretrain(const std::string& out_dir) {
        std::vector<EpochLog> log;
        for (std::size_t scale : model_.scales) {
            set_trainable_stage1(scale);
            AdamW<T> opt;
            const std::size_t steps_per_epoch = steps_in_epoch(train_.size());
            const std::size_t total_steps =
                std::max<std::size_t>(1, cfg_.training.epochs_stage1 * steps_per_epoch);
            const auto names = model_.encoder_param_names(scale);
            auto best = records_from_store(model_.store, names);
            double best_acc = -1.0, best_loss = 0.0;
            std::size_t step = 0;
            for (std::size_t epoch = 0; epoch < cfg_.training.epochs_stage1; ++epoch) {
                EpochLog tl = run_epoch_single(scale, epoch, &opt, &step, total_steps);
                tl.split = "train";
                log.push_back(tl);
                EpochLog vl = eval_single_epoch(scale, epoch, val_);
                vl.split = "val";
                log.push_back(vl);
                if (vl.acc > best_acc || (vl.acc == best_acc && vl.loss_total < best_loss)) {
                    best_acc = vl.acc;
                    best_loss = vl.loss_total;
                    best = records_from_store(model_.store, names);
                }
                progress("stage1", scale, epoch, tl, &vl);
            }
            write_checkpoint(stage1_ckpt_path(out_dir, scale), best);
            // training continues from the best snapshot
            load_records(best);
        }
        set_all_trainable(true);
        return log;
    }

    static std::string stage1_ckpt_path(const std::string& out_dir, std::size_t scale) {
        return out_dir + "/enc" + std::to_string(scale) + ".ckpt";
    }

    // ------------------------------------------------------------- stage 2

    // Joint objective over the fused stack starting from the stage-1
    // checkpoints. Default freezing: every encoder and per-scale head is
    // untouchable and only projection/fusion/classifier train.
    std::vector<EpochLog> stage2_fuse(const std::string& out_dir,
                                      const std::vector<std::string>& stage1_ckpts) {
        for (const auto& p : stage1_ckpts) load_params(model_.store, p);
        apply_stage2_freeze();
        const bool cache = !cfg_.training.stage2_train_backbones && !cfg_.training.augment;
        if (cache) build_encoder_cache();

        AdamW<T> opt;
        const std::size_t steps_per_epoch = steps_in_epoch(train_.size());
        const std::size_t total_steps =
            std::max<std::size_t>(1, cfg_.training.epochs_stage2 * steps_per_epoch);
        auto best = records_from_store(model_.store, model_.all_param_names());
        double best_acc = -1.0, best_loss = 0.0;
        std::vector<EpochLog> log;
        std::size_t step = 0;
        for (std::size_t epoch = 0; epoch < cfg_.training.epochs_stage2; ++epoch) {
            EpochLog tl = run_epoch_fused(epoch, &opt, &step, total_steps, cache, "stage2");
            tl.split = "train";
            log.push_back(tl);
            EpochLog vl = eval_fused_epoch(epoch, val_, cache ? &cache_val_ : nullptr);
            vl.split = "val";
            log.push_back(vl);
            if (vl.acc > best_acc || (vl.acc == best_acc && vl.loss_total < best_loss)) {
                best_acc = vl.acc;
                best_loss = vl.loss_total;
                best = records_from_store(model_.store, model_.all_param_names());
            }
            progress("stage2", 0, epoch, tl, &vl);
        }
        load_records(best);
        write_checkpoint(out_dir + "/fused.ckpt", best);
        return log;
    }

    // ------------------------------------------------------------ few-shot

    // Replay fine-tuning: mixed mini-batches drawn half from the source
    // (replay) pool and half from the domain-shifted target pool. Stage-2
    // freeze rules stay in force. Fine-tune identities must be disjoint from
    // both test sets.
    std::vector<EpochLog> few_shot_finetune(const Dataset& target_train,
                                            const Dataset& target_val,
                                            const Dataset& target_test,
                                            const std::string& out_dir) {
        apply_stage2_freeze();
        auto replay = pick_pairs(train_, cfg_.training.fewshot_pairs, "fewshot.replay");
        auto target = pick_pairs(target_train, cfg_.training.fewshot_pairs, "fewshot.target");

        std::set<std::string> test_ids;
        for (const auto& s : test_.samples) test_ids.insert(s.id);
        for (const auto& s : target_test.samples) test_ids.insert(s.id);
        for (std::size_t i : replay)
            if (test_ids.count(train_.samples[i].id))
                throw DataError("few-shot replay sample overlaps a test set: " +
                                train_.samples[i].id);
        for (std::size_t i : target)
            if (test_ids.count(target_train.samples[i].id))
                throw DataError("few-shot target sample overlaps a test set: " +
                                target_train.samples[i].id);

        AdamW<T> opt;
        const std::size_t half = std::max<std::size_t>(1, cfg_.training.batch / 2);
        const std::size_t steps_per_epoch =
            std::max<std::size_t>(1, (target.size() + half - 1) / half);
        const std::size_t total_steps =
            std::max<std::size_t>(1, cfg_.training.epochs_fewshot * steps_per_epoch);
        std::vector<EpochLog> log;
        std::size_t step = 0;
        for (std::size_t epoch = 0; epoch < cfg_.training.epochs_fewshot; ++epoch) {
            Rng order_rng = root_rng().derive("fewshot.order", epoch);
            auto rep_order = shuffled(replay, order_rng.derive("replay"));
            auto tgt_order = shuffled(target, order_rng.derive("target"));
            EpochLog tl;
            tl.epoch = epoch;
            std::size_t n_steps = 0;
            for (std::size_t b = 0; b < steps_per_epoch; ++b) {
                std::vector<const Sample*> batch;
                std::vector<int> labels;
                for (std::size_t k = 0; k < half; ++k) {
                    const Sample& s = train_.samples[rep_order[(b * half + k) % rep_order.size()]];
                    batch.push_back(&s);
                    labels.push_back(s.label);
                }
                for (std::size_t k = 0; k < half; ++k) {
                    const Sample& s =
                        target_train.samples[tgt_order[(b * half + k) % tgt_order.size()]];
                    batch.push_back(&s);
                    labels.push_back(s.label);
                }
                StepStats st = fused_step(batch, labels, epoch, &opt, &step, total_steps,
                                          nullptr, "fewshot");
                accumulate_stats(tl, st);
                ++n_steps;
            }
            finalize_stats(tl, n_steps);
            tl.split = "train";
            log.push_back(tl);
            EpochLog vl = eval_fused_epoch(epoch, target_val, nullptr);
            vl.split = "val";
            log.push_back(vl);
            progress("fewshot", 0, epoch, tl, &vl);
        }
        auto recs = records_from_store(model_.store, model_.all_param_names());
        write_checkpoint(out_dir + "/fewshot.ckpt", recs);
        return log;
    }

    // ------------------------------------------------------------ evaluation

    PredictionSet predict_fused(const Dataset& ds) {
        PredictionSet out;
        out.threshold = cfg_.threshold;
        for_batches_eval(ds, [&](const std::vector<const Sample*>& batch) {
            Tape<T> tape;
            LeafMap<T> leaves = bind_leaves(tape, model_.store, false);
            std::map<std::size_t, Var<T>> inputs = batch_inputs(tape, batch, false, 0, 0);
            FusedOutputs<T> fo = forward_fused(model_, leaves, inputs);
            append_scores(fo.fusion.logits, batch, out);
        });
        return out;
    }

    PredictionSet predict_single(std::size_t scale, const Dataset& ds) {
        PredictionSet out;
        out.threshold = cfg_.threshold;
        for_batches_eval(ds, [&](const std::vector<const Sample*>& batch) {
            Tape<T> tape;
            LeafMap<T> leaves = bind_leaves(tape, model_.store, false);
            Var<T> x = batch_input_scale(tape, batch, scale, false, 0, 0);
            SingleScaleOutputs<T> so = forward_single(model_, leaves, scale, x);
            append_scores(so.logits, batch, out);
        });
        return out;
    }

    // ----------------------------------------------------------- bookkeeping

    void load_fused_checkpoint(const std::string& path) { load_params(model_.store, path); }

    Rng root_rng() const { return Rng(cfg_.training.seed); }

private:
    struct StepStats {
        double total = 0, ce = 0, align = 0, attnreg = 0, l2 = 0;
        std::size_t correct = 0, count = 0;
    };

    std::size_t steps_in_epoch(std::size_t n) const {
        const std::size_t b = cfg_.training.batch;
        std::size_t steps = n / b;
        if (n % b >= 2) ++steps;  // trailing singletons are dropped (InfoNCE needs pairs)
        return std::max<std::size_t>(steps, 0);
    }

    void set_all_trainable(bool flag) {
        for (auto& p : model_.store.all()) p.trainable = flag;
    }

    void set_trainable_stage1(std::size_t scale) {
        set_all_trainable(false);
        model_.store.set_trainable(enc_prefix(scale), true);
        model_.store.set_trainable(head_prefix(scale), true);
    }

    void apply_stage2_freeze() {
        set_all_trainable(true);
        if (!cfg_.training.stage2_train_backbones) {
            for (std::size_t s : model_.scales) {
                model_.store.set_trainable(enc_prefix(s), false);
                model_.store.set_trainable(head_prefix(s), false);
            }
        } else {
            for (std::size_t s : model_.scales)
                freeze_lower(model_.store, model_.enc_cfg.at(s), cfg_.training.freeze_fraction);
        }
    }

    void load_records(const std::vector<CheckpointRecord>& recs) {
        for (const auto& r : recs) {
            Param<T>& p = model_.store.at(r.name);
            for (std::size_t i = 0; i < r.data.size(); ++i)
                p.value.data[i] = static_cast<T>(r.data[i]);
        }
    }

    // ------------------------------------------------------ batch assembly

    static std::vector<std::size_t> shuffled(std::vector<std::size_t> v, Rng rng) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.uniform_int(i)]);
        return v;
    }

    std::vector<std::size_t> epoch_order(std::size_t n, const char* tag, std::size_t epoch) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        return shuffled(idx, root_rng().derive(tag, epoch));
    }

    // Extracts (and optionally augments) nested patches for one sample.
    NestedPatchSet sample_patches(const Sample& s, bool do_augment, std::size_t phase,
                                  std::size_t epoch) const {
        NestedPatchSet p = extract_nested(s.volume);
        p.label = s.label;
        p.source_id = s.id;
        if (do_augment && cfg_.training.augment) {
            Rng arng = Rng(cfg_.training.seed)
                           .derive("augment", (phase << 24) ^ epoch, hash_str(s.id));
            p = augment(p, arng);
        }
        return p;
    }

    Var<T> batch_input_scale(Tape<T>& tape, const std::vector<const Sample*>& batch,
                             std::size_t scale, bool do_augment, std::size_t phase,
                             std::size_t epoch) const {
        const std::size_t B = batch.size();
        TensorData<T> x({B, scale, scale, kCropDepth, 1});
        for (std::size_t b = 0; b < B; ++b) {
            NestedPatchSet p = sample_patches(*batch[b], do_augment, phase, epoch);
            const TensorData<float>& crop = p.crop(scale);
            T* dst = x.data.data() + b * crop.numel();
            for (std::size_t i = 0; i < crop.numel(); ++i)
                dst[i] = static_cast<T>(crop.data[i] * kHuScale);
        }
        return tape.leaf(std::move(x), false);
    }

    std::map<std::size_t, Var<T>> batch_inputs(Tape<T>& tape,
                                               const std::vector<const Sample*>& batch,
                                               bool do_augment, std::size_t phase,
                                               std::size_t epoch) const {
        const std::size_t B = batch.size();
        std::map<std::size_t, TensorData<T>> xs;
        for (std::size_t s : model_.scales) xs.emplace(s, TensorData<T>({B, s, s, kCropDepth, 1}));
        for (std::size_t b = 0; b < B; ++b) {
            NestedPatchSet p = sample_patches(*batch[b], do_augment, phase, epoch);
            for (std::size_t s : model_.scales) {
                const TensorData<float>& crop = p.crop(s);
                T* dst = xs.at(s).data.data() + b * crop.numel();
                for (std::size_t i = 0; i < crop.numel(); ++i)
                    dst[i] = static_cast<T>(crop.data[i] * kHuScale);
            }
        }
        std::map<std::size_t, Var<T>> out;
        for (auto& [s, x] : xs) out.emplace(s, tape.leaf(std::move(x), false));
        return out;
    }

    template <typename F>
    void for_batches_eval(const Dataset& ds, F&& fn) {
        const std::size_t B = cfg_.training.batch;
        for (std::size_t start = 0; start < ds.size(); start += B) {
            std::vector<const Sample*> batch;
            for (std::size_t i = start; i < std::min(ds.size(), start + B); ++i)
                batch.push_back(&ds.samples[i]);
            fn(batch);
        }
    }

    void append_scores(Var<T> logits, const std::vector<const Sample*>& batch,
                       PredictionSet& out) {
        Var<T> probs = ops::softmax_lastdim(logits);
        const auto& v = probs.value();
        for (std::size_t b = 0; b < batch.size(); ++b) {
            out.scores.push_back(static_cast<double>(v.data[b * 2 + 1]));
            out.labels.push_back(batch[b]->label);
        }
    }

    // --------------------------------------------------------- encoder cache

    // With fully frozen backbones and augmentation off, encoder outputs are
    // constant across epochs; token maps are computed once per sample.
    void build_encoder_cache() {
        cache_train_ = compute_cache(train_);
        cache_val_ = compute_cache(val_);
    }

    using TokenCache = std::vector<std::map<std::size_t, TensorData<T>>>;

    TokenCache compute_cache(const Dataset& ds) {
        TokenCache cache(ds.size());
        const std::size_t B = cfg_.training.batch;
        for (std::size_t start = 0; start < ds.size(); start += B) {
            std::vector<const Sample*> batch;
            for (std::size_t i = start; i < std::min(ds.size(), start + B); ++i)
                batch.push_back(&ds.samples[i]);
            Tape<T> tape;
            LeafMap<T> leaves = bind_leaves(tape, model_.store, false);
            std::map<std::size_t, Var<T>> inputs = batch_inputs(tape, batch, false, 0, 0);
            for (std::size_t s : model_.scales) {
                ScaleEmbedding<T> emb = encoder_forward(model_.enc_cfg.at(s), leaves,
                                                        inputs.at(s));
                const auto& tok = emb.tokens.value();
                const std::size_t per = tok.numel() / batch.size();
                for (std::size_t b = 0; b < batch.size(); ++b) {
                    TensorData<T> one({1, tok.shape[1], tok.shape[2]});
                    std::copy(tok.data.begin() + b * per, tok.data.begin() + (b + 1) * per,
                              one.data.begin());
                    cache[start + b].emplace(s, std::move(one));
                }
            }
        }
        return cache;
    }

    EncodedBatch<T> encoded_from_cache(Tape<T>& tape, const TokenCache& cache,
                                       const std::vector<std::size_t>& idx) {
        EncodedBatch<T> enc;
        for (std::size_t s : model_.scales) {
            const auto& first = cache[idx[0]].at(s);
            TensorData<T> tok({idx.size(), first.shape[1], first.shape[2]});
            const std::size_t per = first.numel();
            for (std::size_t b = 0; b < idx.size(); ++b) {
                const auto& one = cache[idx[b]].at(s);
                std::copy(one.data.begin(), one.data.end(), tok.data.begin() + b * per);
            }
            Var<T> tokens = tape.leaf(std::move(tok), false);
            enc.tokens.emplace(s, tokens);
            enc.pooled.emplace(s, ops::mean_axis1(tokens));
        }
        return enc;
    }

    // -------------------------------------------------------- training steps

    Var<T> l2_term(Tape<T>& tape, const LeafMap<T>& leaves) {
        const T lam = static_cast<T>(cfg_.training.l2_lambda);
        Var<T> total = tape.constant(TensorData<T>::scalar(T(0)));
        if (lam <= T(0)) return total;
        for (const auto& p : model_.store.all()) {
            if (!p.trainable) continue;
            total = ops::add(total, ops::sumsq(leaves.at(p.name)));
        }
        return ops::mul_scalar(total, lam * T(0.5));
    }

    EpochLog run_epoch_single(std::size_t scale, std::size_t epoch, AdamW<T>* opt,
                              std::size_t* step, std::size_t total_steps) {
        EpochLog el;
        el.epoch = epoch;
        auto order = epoch_order(train_.size(), "order.stage1", epoch * 131 + scale);
        const std::size_t B = cfg_.training.batch;
        std::size_t n_steps = 0;
        for (std::size_t start = 0; start < order.size(); start += B) {
            const std::size_t end = std::min(order.size(), start + B);
            if (end - start < 2) break;
            std::vector<const Sample*> batch;
            std::vector<int> labels;
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(&train_.samples[order[i]]);
                labels.push_back(batch.back()->label);
            }
            Tape<T> tape;
            LeafMap<T> leaves = bind_leaves(tape, model_.store, false);
            Var<T> x = batch_input_scale(tape, batch, scale, true, 1, epoch);
            SingleScaleOutputs<T> so = forward_single(model_, leaves, scale, x);
            Var<T> ce = ops::cross_entropy_logits(so.logits, labels);
            Var<T> l2 = l2_term(tape, leaves);
            Var<T> total = ops::add(ce, l2);
            tape.backward(total);
            const double lr = cosine_lr(*step, total_steps, cfg_.training.lr_max,
                                        cfg_.training.lr_min);
            opt->step(model_.store, tape.grad_map(), static_cast<T>(lr),
                      static_cast<T>(cfg_.training.weight_decay));
            ++*step;
            StepStats st;
            st.total = static_cast<double>(total.item());
            st.ce = static_cast<double>(ce.item());
            st.l2 = static_cast<double>(l2.item());
            count_correct(so.logits, labels, st);
            accumulate_stats(el, st);
            ++n_steps;
        }
        finalize_stats(el, n_steps);
        return el;
    }

    EpochLog eval_single_epoch(std::size_t scale, std::size_t epoch, const Dataset& ds) {
        EpochLog el;
        el.epoch = epoch;
        std::size_t n_batches = 0;
        for_batches_eval(ds, [&](const std::vector<const Sample*>& batch) {
            std::vector<int> labels;
            for (const Sample* s : batch) labels.push_back(s->label);
            Tape<T> tape;
            LeafMap<T> leaves = bind_leaves(tape, model_.store, false);
            Var<T> x = batch_input_scale(tape, batch, scale, false, 0, 0);
            SingleScaleOutputs<T> so = forward_single(model_, leaves, scale, x);
            Var<T> ce = ops::cross_entropy_logits(so.logits, labels);
            StepStats st;
            st.ce = st.total = static_cast<double>(ce.item());
            count_correct(so.logits, labels, st);
            accumulate_stats(el, st);
            ++n_batches;
        });
        finalize_stats(el, n_batches);
        return el;
    }

    StepStats fused_step(const std::vector<const Sample*>& batch, const std::vector<int>& labels,
                         std::size_t epoch, AdamW<T>* opt, std::size_t* step,
                         std::size_t total_steps, const std::vector<std::size_t>* cache_idx,
                         const char* phase) {
        Tape<T> tape;
        LeafMap<T> leaves = bind_leaves(tape, model_.store, false);
        FusedOutputs<T> fo;
        if (cache_idx) {
            EncodedBatch<T> enc = encoded_from_cache(tape, cache_train_, *cache_idx);
            fo = forward_fused_from_encoded(model_, leaves, enc);
        } else {
            std::map<std::size_t, Var<T>> inputs =
                batch_inputs(tape, batch, true, hash_str(phase) & 0xff, epoch);
            fo = forward_fused(model_, leaves, inputs);
        }
        LossParts parts = fused_loss(tape, leaves, fo, labels);
        tape.backward(parts.total);
        const double lr =
            cosine_lr(*step, total_steps, cfg_.training.lr_max, cfg_.training.lr_min);
        opt->step(model_.store, tape.grad_map(), static_cast<T>(lr),
                  static_cast<T>(cfg_.training.weight_decay));
        ++*step;
        StepStats st = stats_from_parts(parts);
        count_correct(fo.fusion.logits, labels, st);
        return st;
    }

    EpochLog run_epoch_fused(std::size_t epoch, AdamW<T>* opt, std::size_t* step,
                             std::size_t total_steps, bool cache, const char* phase) {
        EpochLog el;
        el.epoch = epoch;
        auto order = epoch_order(train_.size(), "order.stage2", epoch);
        const std::size_t B = cfg_.training.batch;
        std::size_t n_steps = 0;
        for (std::size_t start = 0; start < order.size(); start += B) {
            const std::size_t end = std::min(order.size(), start + B);
            if (end - start < 2) break;
            std::vector<const Sample*> batch;
            std::vector<int> labels;
            std::vector<std::size_t> idx;
            for (std::size_t i = start; i < end; ++i) {
                idx.push_back(order[i]);
                batch.push_back(&train_.samples[order[i]]);
                labels.push_back(batch.back()->label);
            }
            StepStats st = fused_step(batch, labels, epoch, opt, step, total_steps,
                                      cache ? &idx : nullptr, phase);
            accumulate_stats(el, st);
            ++n_steps;
        }
        finalize_stats(el, n_steps);
        return el;
    }

    EpochLog eval_fused_epoch(std::size_t epoch, const Dataset& ds, const TokenCache* cache) {
        EpochLog el;
        el.epoch = epoch;
        std::size_t n_batches = 0;
        const std::size_t B = cfg_.training.batch;
        for (std::size_t start = 0; start < ds.size(); start += B) {
            std::vector<const Sample*> batch;
            std::vector<std::size_t> idx;
            for (std::size_t i = start; i < std::min(ds.size(), start + B); ++i) {
                batch.push_back(&ds.samples[i]);
                idx.push_back(i);
            }
            if (batch.size() < 2) break;  // InfoNCE in the loss needs pairs
            std::vector<int> labels;
            for (const Sample* s : batch) labels.push_back(s->label);
            Tape<T> tape;
            LeafMap<T> leaves = bind_leaves(tape, model_.store, false);
            FusedOutputs<T> fo;
            if (cache) {
                EncodedBatch<T> enc = encoded_from_cache(tape, *cache, idx);
                fo = forward_fused_from_encoded(model_, leaves, enc);
            } else {
                std::map<std::size_t, Var<T>> inputs = batch_inputs(tape, batch, false, 0, 0);
                fo = forward_fused(model_, leaves, inputs);
            }
            LossParts parts = fused_loss(tape, leaves, fo, labels);
            StepStats st = stats_from_parts(parts);
            count_correct(fo.fusion.logits, labels, st);
            accumulate_stats(el, st);
            ++n_batches;
        }
        finalize_stats(el, n_batches);
        return el;
    }

    struct LossParts {
        Var<T> total, ce, align, attnreg, l2;
    };

    LossParts fused_loss(Tape<T>& tape, const LeafMap<T>& leaves, FusedOutputs<T>& fo,
                         const std::vector<int>& labels) {
        LossParts parts;
        Var<T> ce = ops::cross_entropy_logits(fo.fusion.logits, labels);
        if (!cfg_.training.stage2_fused_ce_only)
            for (std::size_t s : model_.scales)
                ce = ops::add(ce, ops::cross_entropy_logits(fo.scale_logits.at(s), labels));
        parts.ce = ce;
        parts.align = ops::mul_scalar(align_loss_present(model_, fo, tape), model_.align.beta);
        if (attnreg_enabled() && !fo.fusion.attn_maps.empty())
            parts.attnreg = ops::mul_scalar(attn_reg(fo.fusion.attn_maps),
                                            static_cast<T>(cfg_.fusion.attnreg_weight));
        else
            parts.attnreg = tape.constant(TensorData<T>::scalar(T(0)));
        parts.l2 = l2_term(tape, leaves);
        parts.total = ops::add(ops::add(parts.ce, parts.align),
                               ops::add(parts.attnreg, parts.l2));
        return parts;
    }

    bool attnreg_enabled() const { return cfg_.fusion.attnreg_weight > 0; }

    // ------------------------------------------------------------- utilities

    std::vector<std::size_t> pick_pairs(const Dataset& ds, std::size_t n_pairs,
                                        const char* tag) {
        std::vector<std::size_t> pos, neg;
        for (std::size_t i = 0; i < ds.size(); ++i)
            (ds.samples[i].label == 1 ? pos : neg).push_back(i);
        if (pos.size() < n_pairs || neg.size() < n_pairs)
            throw DataError(std::string("few-shot pool too small for ") +
                            std::to_string(n_pairs) + " pairs");
        pos = shuffled(pos, root_rng().derive(tag, 1));
        neg = shuffled(neg, root_rng().derive(tag, 2));
        std::vector<std::size_t> out;
        for (std::size_t k = 0; k < n_pairs; ++k) {
            out.push_back(pos[k]);
            out.push_back(neg[k]);
        }
        return out;
    }

    static void count_correct(Var<T> logits, const std::vector<int>& labels, StepStats& st) {
        const auto& v = logits.value();
        for (std::size_t b = 0; b < labels.size(); ++b) {
            const int pred = v.data[b * 2 + 1] > v.data[b * 2 + 0] ? 1 : 0;
            st.correct += (pred == labels[b]) ? 1 : 0;
            ++st.count;
        }
    }

    StepStats stats_from_parts(const LossParts& p) {
        StepStats st;
        st.total = static_cast<double>(p.total.item());
        st.ce = static_cast<double>(p.ce.item());
        st.align = static_cast<double>(p.align.item());
        st.attnreg = static_cast<double>(p.attnreg.item());
        st.l2 = static_cast<double>(p.l2.item());
        return st;
    }

    static void accumulate_stats(EpochLog& el, const StepStats& st) {
        el.loss_total += st.total;
        el.loss_ce += st.ce;
        el.loss_align += st.align;
        el.loss_attnreg += st.attnreg;
        el.loss_l2 += st.l2;
        el.acc += static_cast<double>(st.correct);
        el.acc_count_ += st.count;
    }

    static void finalize_stats(EpochLog& el, std::size_t n_steps) {
        if (n_steps > 0) {
            el.loss_total /= n_steps;
            el.loss_ce /= n_steps;
            el.loss_align /= n_steps;
            el.loss_attnreg /= n_steps;
            el.loss_l2 /= n_steps;
        }
        el.acc = el.acc_count_ ? el.acc / static_cast<double>(el.acc_count_) : 0.0;
    }

    void progress(const char* phase, std::size_t scale, std::size_t epoch, const EpochLog& tl,
                  const EpochLog* vl) {
        if (!progress_) return;
        (*progress_) << phase;
        if (scale) (*progress_) << "[" << scale << "]";
        (*progress_) << " epoch " << epoch << " train_loss=" << tl.loss_total
                     << " train_acc=" << tl.acc;
        if (vl) (*progress_) << " val_acc=" << vl->acc;
        (*progress_) << "\n";
        progress_->flush();
    }

    RunConfig cfg_;
    Dataset train_, val_, test_;
    M3Model<T> model_;
    TokenCache cache_train_, cache_val_;
    std::ostream* progress_ = nullptr;
};

}  // namespace m3net
