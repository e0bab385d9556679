#include "ckda/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace ckda {

void TrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (lr <= 0.0) throw ConfigError("learning rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (batch_identities < 2) throw ConfigError("batch_identities must be >= 2");
    if (visible_per_identity < 1 || infrared_per_identity < 1)
        throw ConfigError("per-identity sample counts must be >= 1");
    if (tau <= 0.0) throw ConfigError("tau must be positive");
    if (ema_lambda < 0.0 || ema_lambda > 1.0) throw ConfigError("ema_lambda must be in [0,1]");
    weights.validate();
}

namespace {

struct Batch {
    Tensor images;  // (B,H,W,C), visible block first
    std::vector<int> labels;
    std::vector<Modality> modalities;
    int b_visible = 0;
};

// PK sampler over one stage's training set: per step, P identities with
// K visible + K infrared samples each, drawn without replacement within the
// batch.
class PkSampler {
public:
    PkSampler(const StageDataset& ds, const TrainConfig& cfg) : ds_(ds), cfg_(cfg) {
        for (size_t i = 0; i < ds.train.size(); ++i) {
            const Sample& s = ds.train[i];
            auto& slot = by_identity_[s.identity];
            (s.modality == Modality::visible ? slot.visible : slot.infrared)
                .push_back(static_cast<int>(i));
        }
        if (static_cast<int>(by_identity_.size()) < cfg.batch_identities)
            throw ConfigError("batch_identities exceeds identities in stage " +
                              std::to_string(ds.stage_index));
        for (const auto& [id, slot] : by_identity_) {
            if (static_cast<int>(slot.visible.size()) < cfg.visible_per_identity)
                throw ConfigError("identity " + std::to_string(id) +
                                  " lacks visible training samples for the batch spec");
            if (static_cast<int>(slot.infrared.size()) < cfg.infrared_per_identity)
                throw ConfigError("identity " + std::to_string(id) +
                                  " lacks infrared training samples for the batch spec");
            identities_.push_back(id);
        }
    }

    Batch next(Rng& rng) {
        std::vector<int> ids = identities_;
        rng.shuffle(ids);
        ids.resize(static_cast<size_t>(cfg_.batch_identities));

        std::vector<int> vis_rows, ir_rows;
        for (int id : ids) {
            const auto& slot = by_identity_.at(id);
            pick(slot.visible, cfg_.visible_per_identity, rng, vis_rows);
            pick(slot.infrared, cfg_.infrared_per_identity, rng, ir_rows);
        }

        const StageConfig& sc = ds_.config;
        Batch b;
        b.b_visible = static_cast<int>(vis_rows.size());
        const int total = static_cast<int>(vis_rows.size() + ir_rows.size());
        b.images = Tensor({total, sc.height, sc.width, sc.channels});
        int row = 0;
        auto emit = [&](const std::vector<int>& rows) {
            for (int r : rows) {
                const Sample& s = ds_.train_sample(static_cast<size_t>(r));
                std::copy(s.image.vec().begin(), s.image.vec().end(),
                          b.images.data() + static_cast<int64_t>(row) * s.image.numel());
                b.labels.push_back(ds_.local_label(s.identity));
                b.modalities.push_back(s.modality);
                ++row;
            }
        };
        emit(vis_rows);
        emit(ir_rows);
        return b;
    }

private:
    struct Slot {
        std::vector<int> visible, infrared;
    };

    static void pick(const std::vector<int>& pool, int k, Rng& rng, std::vector<int>& out) {
        std::vector<int> copy = pool;
        rng.shuffle(copy);
        out.insert(out.end(), copy.begin(), copy.begin() + k);
    }

    const StageDataset& ds_;
    const TrainConfig& cfg_;
    std::map<int, Slot> by_identity_;
    std::vector<int> identities_;
};

double scalar(const Var& v) { return v ? v->value[0] : 0.0; }

// current-model post-neck (or pre-neck) features for the CKA terms
Var cka_features(const BatchForward& fwd, bool pre_neck) {
    return pre_neck ? fwd.z_pre : fwd.z;
}

struct CkaTerms {
    Var inter;
    Var intra;
};

// one frozen forward per step feeds both the prompt target and the old
// feature space
struct FrozenPass {
    Var prompt_target;  // null when prompting is off
    Tensor features;
};

FrozenPass frozen_pass(Model& old_model, const Batch& batch, const TrainConfig& cfg) {
    NoGradGuard ng;
    Rng dummy(0);
    BatchForward of = old_model.forward_batch(batch.images, batch.b_visible,
                                              cfg.forward_toggles(), false, dummy);
    FrozenPass fp;
    if (of.k_p_vis) fp.prompt_target = of.k_p_vis;
    if (of.k_p_ir)
        fp.prompt_target =
            fp.prompt_target ? ag::concat0(fp.prompt_target, of.k_p_ir) : of.k_p_ir;
    fp.features = cfg.cka_pre_neck ? of.z_pre->value : of.z->value;
    return fp;
}

CkaTerms cka_terms(const BatchForward& fwd, const Tensor& old_feats, const Batch& batch,
                   const PrototypeBank& bank, const TrainConfig& cfg) {
    const int bsz = batch.images.dim(0);
    Var z = cka_features(fwd, cfg.cka_pre_neck);
    auto block = [&](const Var& m, int start, int count) {
        std::vector<int> idx(static_cast<size_t>(count));
        for (int i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = start + i;
        return ag::gather_rows(m, std::move(idx));
    };
    const int bv = batch.b_visible;
    const int bt = bsz - bv;
    Var z_v = block(z, 0, bv);
    Var z_t = block(z, bv, bt);
    Var o_all = make_const(old_feats);
    Var o_v = block(o_all, 0, bv);
    Var o_t = block(o_all, bv, bt);

    const double tau = cfg.tau;
    auto rel = [&](const Var& feats, const Tensor& protos) {
        return relational(affinity(feats, protos, tau), tau);
    };
    Var y_o_vt = rel(o_v, bank.infrared);
    Var y_z_vt = rel(z_v, bank.infrared);
    Var y_o_tv = rel(o_t, bank.visible);
    Var y_z_tv = rel(z_t, bank.visible);
    Var y_o_vv = rel(o_v, bank.visible);
    Var y_z_vv = rel(z_v, bank.visible);
    Var y_o_tt = rel(o_t, bank.infrared);
    Var y_z_tt = rel(z_t, bank.infrared);

    return {inter_loss(y_o_vt, y_z_vt, y_o_tv, y_z_tv),
            intra_loss(y_o_vv, y_z_vv, y_o_tt, y_z_tt)};
}

}  // namespace

std::vector<StepLog> train_stage(Model& model, const StageSnapshot* snapshot,
                                 const StageDataset& dataset, const TrainConfig& cfg) {
    cfg.validate();
    const int stage = dataset.stage_index;
    if ((snapshot == nullptr) != (stage == 1))
        throw StateError("train_stage: snapshot must be present exactly for stages >= 2");

    std::vector<StepLog> log;
    if (cfg.epochs == 0) return log;

    PkSampler sampler(dataset, cfg);
    const int steps_per_epoch =
        std::max<int>(1, static_cast<int>(dataset.train.size()) / cfg.batch_size());
    const int total_steps = cfg.epochs * steps_per_epoch;

    AdamW opt(model.trainable_params(stage, cfg.forward_toggles()), cfg.weight_decay);
    Rng batch_rng = Rng(cfg.seed).child(0xBA7C000ULL + static_cast<uint64_t>(stage));
    Rng dropout_rng = Rng(cfg.seed).child(0xD0C000ULL + static_cast<uint64_t>(stage));

    const bool prompts_on = cfg.toggles.mcp || cfg.toggles.msp;
    int global_step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int step = 0; step < steps_per_epoch; ++step, ++global_step) {
            const double lr =
                cfg.lr * 0.5 *
                (1.0 + std::cos(3.14159265358979323846 * global_step / total_steps));
            Batch batch = sampler.next(batch_rng);

            opt.zero_grad();
            BatchForward fwd = model.forward_batch(batch.images, batch.b_visible,
                                                   cfg.forward_toggles(), true, dropout_rng);
            Var logits = model.classify(fwd.z, stage);
            Var l_ce = ce_loss(logits, batch.labels);
            Var l_trip = triplet_loss(fwd.z_pre, batch.labels, cfg.weights.margin,
                                      cfg.triplet_within_modality, &batch.modalities);
            Var l_base = ag::add(l_ce, l_trip);

            Var l_p, l_inter, l_intra;
            if (snapshot && (prompts_on || cfg.toggles.cka)) {
                FrozenPass frozen = frozen_pass(*snapshot->frozen, batch, cfg);
                if (prompts_on) {
                    Var current;
                    if (fwd.k_p_vis) current = fwd.k_p_vis;
                    if (fwd.k_p_ir)
                        current = current ? ag::concat0(current, fwd.k_p_ir) : fwd.k_p_ir;
                    l_p = Msp::prompt_alignment_loss(current, frozen.prompt_target);
                }
                if (cfg.toggles.cka) {
                    CkaTerms terms =
                        cka_terms(fwd, frozen.features, batch, snapshot->bank, cfg);
                    l_inter = terms.inter;
                    l_intra = terms.intra;
                }
            }
            Var total = total_loss(l_base, l_p, l_inter, l_intra, cfg.weights, stage);
            backward(total);
            opt.step(lr);

            log.push_back({stage, epoch, global_step, lr, scalar(l_ce), scalar(l_trip),
                           scalar(l_p), scalar(l_inter), scalar(l_intra), scalar(total)});
        }
    }

    if (snapshot && cfg.toggles.ema) {
        auto merged =
            ema_merge(*snapshot->frozen, model, cfg.ema_lambda, cfg.merge_prompts_in_ema);
        ParamMap src = merged->collect();
        ParamMap dst = model.collect();
        for (size_t i = 0; i < src.params.size(); ++i)
            dst.params[i].var->value = src.params[i].var->value;
        for (size_t i = 0; i < src.buffers.size(); ++i)
            *dst.buffers[i].tensor = *src.buffers[i].tensor;
    }
    return log;
}

MetricRecord evaluate_stage(Model& model, const StageDataset& dataset,
                            const ForwardToggles& toggles) {
    NoGradGuard ng;
    const int d = model.feature_dim();
    auto encode_set = [&](const std::vector<Sample>& samples, Tensor& feats,
                          std::vector<int>& ids) {
        feats = Tensor({static_cast<int>(samples.size()), d});
        for (size_t i = 0; i < samples.size(); ++i) {
            FeaturePair f = model.encode(samples[i].image, samples[i].modality, toggles);
            for (int j = 0; j < d; ++j) feats.at2(static_cast<int>(i), j) = f.z[j];
            ids.push_back(samples[i].identity);
        }
    };
    Tensor qf, gf;
    std::vector<int> qids, gids;
    encode_set(dataset.query, qf, qids);
    encode_set(dataset.gallery, gf, gids);
    return evaluate_retrieval(qf, qids, gf, gids);
}

RunResult run_stream(Model& model, const std::vector<StageDataset>& stream,
                     const TrainConfig& cfg, const StreamHooks* hooks) {
    cfg.validate();
    if (stream.empty()) throw ConfigError("run_stream: empty stage stream");
    model.ema_lambda = cfg.ema_lambda;

    RunResult result;
    const int stages = static_cast<int>(stream.size());
    result.metrics = MetricsMatrix::empty(stages);

    std::unique_ptr<StageSnapshot> snapshot;
    Rng head_rng = Rng(cfg.seed).child(0x4EAD);

    for (int s = 1; s <= stages; ++s) {
        const StageDataset& ds = stream[static_cast<size_t>(s - 1)];
        if (ds.stage_index != s) throw StateError("run_stream: stream stages out of order");
        if (hooks && hooks->on_stage_start) hooks->on_stage_start(s);

        if (s >= 2) {
            snapshot = std::make_unique<StageSnapshot>();
            snapshot->frozen = model.clone();
            snapshot->bank = result.banks.back();
        }

        model.add_head(static_cast<int>(ds.identity_roster.size()), head_rng);
        std::vector<StepLog> stage_log = train_stage(model, snapshot.get(), ds, cfg);
        if (hooks && hooks->on_step)
            for (const StepLog& l : stage_log) hooks->on_step(l);
        result.log.insert(result.log.end(), stage_log.begin(), stage_log.end());
        model.stage_index = s;

        // prototypes represent the post-merge model that the next stage will
        // treat as its frozen reference
        result.banks.push_back(
            extract_prototypes(model, ds, cfg.forward_toggles(), cfg.cka_pre_neck));

        for (int i = 1; i <= s; ++i)
            result.metrics.set(
                s, i, evaluate_stage(model, stream[static_cast<size_t>(i - 1)],
                                     cfg.forward_toggles()));
        if (hooks && hooks->on_stage_end) hooks->on_stage_end(s, model, result.banks.back());
    }
    return result;
}

}  // namespace ckda
