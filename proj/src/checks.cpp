#include "m3net/checks.hpp"

#include "m3net/conv3d.hpp"
#include "m3net/patches.hpp"

namespace m3net {

using detail_checks::randn;
using detail_checks::well_separated_matrix;
using ParamList = std::vector<std::pair<std::string, TensorData<double>>>;

namespace {

std::vector<int> random_labels(Rng& rng, std::size_t n) {
    std::vector<int> l(n);
    for (auto& v : l) v = static_cast<int>(rng.uniform_int(2));
    return l;
}

// Micro fused model: token maps as inputs, every downstream parameter free.
struct MicroModel {
    M3Model<double> model;
    std::vector<int> labels;

    static MicroModel make(std::uint64_t seed) {
        RunConfig rc = RunConfig::defaults();
        rc.encoders[32] = EncoderConfig{32, kCropDepth, {{6, 2}}, 3};
        rc.encoders[64] = EncoderConfig{64, kCropDepth, {{6, 2}}, 3};
        rc.encoders[96] = EncoderConfig{96, kCropDepth, {{6, 2}}, 3};
        rc.latent_dim = 8;
        rc.fusion.latent_dim = 8;
        rc.fusion.heads = 2;
        rc.fusion.ffn_dim = 16;
        rc.fusion.stage3_depth = 1;
        MicroModel mm;
        mm.model = M3Model<double>::build(rc, seed);
        return mm;
    }
};

}  // namespace

std::vector<CheckResult> gradcheck_suite(std::uint64_t seed0, std::size_t seeds) {
    std::vector<CheckResult> out;

    out.push_back(run_component(
        "cross_entropy", 1e-4, seeds, seed0, [](Rng& rng) {
            const std::size_t B = 2 + rng.uniform_int(4), C = 2;
            auto labels = random_labels(rng, B);
            ParamList params{{"logits", randn(rng, {B, C}, 2.0)}};
            GradCheckFn fn = [labels](Tape<double>&, const std::vector<Var<double>>& ps) {
                return ops::cross_entropy_logits(ps[0], labels);
            };
            return std::make_pair(fn, params);
        }));

    out.push_back(run_component(
        "info_nce", 1e-4, seeds, seed0, [](Rng& rng) {
            const std::size_t B = 3 + rng.uniform_int(3), D = 2 + rng.uniform_int(4);
            const double tau = 0.07 + 0.4 * rng.uniform();
            ParamList params{{"z_i", randn(rng, {B, D})}, {"z_j", randn(rng, {B, D})}};
            GradCheckFn fn = [tau](Tape<double>&, const std::vector<Var<double>>& ps) {
                return info_nce(ps[0], ps[1], tau);
            };
            return std::make_pair(fn, params);
        }));

    out.push_back(run_component(
        "cov_align", 1e-4, seeds, seed0, [](Rng& rng) {
            const std::size_t B = 3 + rng.uniform_int(4), D = 2 + rng.uniform_int(3);
            ParamList params{{"z32", randn(rng, {B, D})},
                             {"z64", randn(rng, {B, D})},
                             {"z96", randn(rng, {B, D})}};
            GradCheckFn fn = [](Tape<double>&, const std::vector<Var<double>>& ps) {
                return cov_align(std::vector<Var<double>>{ps[0], ps[1], ps[2]});
            };
            return std::make_pair(fn, params);
        }));

    out.push_back(run_component(
        "orth_penalty", 1e-4, seeds, seed0, [](Rng& rng) {
            const std::size_t B = 3 + rng.uniform_int(4), D = 2 + rng.uniform_int(4);
            ParamList params{{"z", randn(rng, {B, D})}};
            GradCheckFn fn = [](Tape<double>&, const std::vector<Var<double>>& ps) {
                return orth_penalty(ps[0]);
            };
            return std::make_pair(fn, params);
        }));

    out.push_back(run_component(
        "nuclear_penalty", 1e-3, seeds, seed0, [](Rng& rng) {
            const std::size_t B = 4 + rng.uniform_int(3), D = 3;
            ParamList params{{"z", well_separated_matrix(rng, B, D)}};
            GradCheckFn fn = [](Tape<double>&, const std::vector<Var<double>>& ps) {
                return nuclear_penalty(ps[0]);
            };
            return std::make_pair(fn, params);
        }));

    out.push_back(run_component(
        "align_loss", 1e-3, seeds, seed0, [](Rng& rng) {
            const std::size_t B = 4, D = 3;
            AlignWeights<double> w;
            w.tau = 0.1 + 0.3 * rng.uniform();
            ParamList params{{"z32", well_separated_matrix(rng, B, D)},
                             {"z64", well_separated_matrix(rng, B, D)},
                             {"z96", well_separated_matrix(rng, B, D)}};
            GradCheckFn fn = [w](Tape<double>&, const std::vector<Var<double>>& ps) {
                return align_loss(std::vector<Var<double>>{ps[0], ps[1], ps[2]}, w);
            };
            return std::make_pair(fn, params);
        }));

    out.push_back(run_component(
        "attn_reg", 1e-4, seeds, seed0, [](Rng& rng) {
            const std::size_t B = 2, Lq = 2 + rng.uniform_int(3), Lk = 2 + rng.uniform_int(3);
            ParamList params{{"scores1", randn(rng, {B, Lq, Lk})},
                             {"scores2", randn(rng, {B, Lk, Lq})}};
            GradCheckFn fn = [](Tape<double>&, const std::vector<Var<double>>& ps) {
                std::vector<Var<double>> maps{ops::softmax_lastdim(ps[0]),
                                              ops::softmax_lastdim(ps[1])};
                return attn_reg(maps);
            };
            return std::make_pair(fn, params);
        }));

    // conv + instance-norm + GELU + head composition; the conv bias is held
    // constant because per-channel normalization removes it exactly and a
    // structurally-zero gradient only measures finite-difference noise
    out.push_back(run_component(
        "encoder_ce", 1e-3, seeds, seed0, [](Rng& rng) {
            auto labels = random_labels(rng, 2);
            TensorData<double> bias = randn(rng, {3}, 0.1);
            ParamList params{{"x", randn(rng, {2, 5, 5, 4, 1}, 0.7)},
                             {"w", randn(rng, {3, 3, 3, 1, 3}, 0.35)},
                             {"gamma", randn(rng, {3}, 0.2)},
                             {"beta", randn(rng, {3}, 0.1)},
                             {"hw", randn(rng, {3, 2}, 0.5)},
                             {"hb", randn(rng, {2}, 0.1)}};
            params[2].second.data[0] += 1.0;  // keep gamma away from zero
            GradCheckFn fn = [labels, bias](Tape<double>& tape,
                                            const std::vector<Var<double>>& ps) {
                Var<double> b = tape.constant(bias);
                Var<double> h = ops::conv3d(ps[0], ps[1], b, 2);
                h = ops::instance_norm(h, ps[2], ps[3]);
                h = ops::gelu(h);
                const auto& s = h.shape();
                Var<double> tokens = ops::reshape(h, {s[0], s[1] * s[2] * s[3], s[4]});
                Var<double> pooled = ops::mean_axis1(tokens);
                Var<double> logits = ops::affine(pooled, ps[4], ps[5]);
                return ops::cross_entropy_logits(logits, labels);
            };
            return std::make_pair(fn, params);
        },
        1e-4));

    // Full stage-2 objective on a micro config (D=8, h=2, L32=L96=4, B=3):
    // all projection/head/fusion parameters plus the three token maps.
    out.push_back(run_component(
        "stage2_objective", 1e-3, seeds, seed0, [seed0](Rng& rng) {
            MicroModel mm = MicroModel::make(seed0 + 7);
            const std::size_t B = 3, L = 4;
            auto labels = random_labels(rng, B);
            ParamList params;
            for (const auto& p : mm.model.store.all()) params.push_back({p.name, p.value});
            params.push_back({"tokens32", randn(rng, {B, L, 6}, 0.8)});
            params.push_back({"tokens64", randn(rng, {B, L, 6}, 0.8)});
            params.push_back({"tokens96", randn(rng, {B, L, 6}, 0.8)});
            M3Model<double> model = mm.model;
            GradCheckFn fn = [model, labels](Tape<double>& tape,
                                             const std::vector<Var<double>>& ps) {
                LeafMap<double> leaves;
                const std::size_t n_model = model.store.size();
                for (std::size_t i = 0; i < n_model; ++i)
                    leaves.vars.emplace(model.store.all()[i].name, ps[i]);
                EncodedBatch<double> enc;
                enc.tokens[32] = ps[n_model + 0];
                enc.tokens[64] = ps[n_model + 1];
                enc.tokens[96] = ps[n_model + 2];
                for (std::size_t s : model.scales)
                    enc.pooled[s] = ops::mean_axis1(enc.tokens[s]);
                FusedOutputs<double> fo = forward_fused_from_encoded(model, leaves, enc);
                Var<double> loss = ops::cross_entropy_logits(fo.fusion.logits, labels);
                for (std::size_t s : model.scales)
                    loss = ops::add(loss,
                                    ops::cross_entropy_logits(fo.scale_logits.at(s), labels));
                loss = ops::add(loss, ops::mul_scalar(align_loss_present(model, fo, tape),
                                                      model.align.beta));
                loss = ops::add(loss, ops::mul_scalar(attn_reg(fo.fusion.attn_maps), 1e-3));
                Var<double> l2 = tape.constant(TensorData<double>::scalar(0.0));
                for (std::size_t i = 0; i < ps.size(); ++i)
                    l2 = ops::add(l2, ops::sumsq(ps[i]));
                return ops::add(loss, ops::mul_scalar(l2, 0.5e-3));
            };
            return std::make_pair(fn, params);
        },
        1e-4));

    return out;
}

}  // namespace m3net
