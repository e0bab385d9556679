#pragma once

#include <functional>
#include <memory>

#include "ckda/cka.hpp"
#include "ckda/eval.hpp"
#include "ckda/losses.hpp"
#include "ckda/model.hpp"

namespace ckda {

struct Toggles {
    bool mcp = true;
    bool msp = true;
    bool cka = true;
    bool ema = true;
};

struct TrainConfig {
    int epochs = 20;
    double lr = 3e-4;
    double weight_decay = 1e-4;
    int batch_identities = 8;
    int visible_per_identity = 2;
    int infrared_per_identity = 2;
    LossWeights weights;
    double tau = 0.1;
    double ema_lambda = 0.5;
    uint64_t seed = 1;
    Toggles toggles;
    bool triplet_within_modality = false;
    bool cka_pre_neck = false;
    bool merge_prompts_in_ema = true;
    bool af_from_max = false;

    int batch_size() const {
        return batch_identities * (visible_per_identity + infrared_per_identity);
    }
    void validate() const;
    ForwardToggles forward_toggles() const { return {toggles.mcp, toggles.msp}; }
};

struct StepLog {
    int stage = 0, epoch = 0, step = 0;
    double lr = 0.0;
    double ce = 0.0, trip = 0.0, lp = 0.0, inter = 0.0, intra = 0.0, total = 0.0;
};

// Frozen artifacts of the previous stage: the post-merge model (backbone and
// prompt modules, eval mode) and its prototype bank.
struct StageSnapshot {
    std::unique_ptr<Model> frozen;
    PrototypeBank bank;
};

struct StreamHooks {
    std::function<void(int stage)> on_stage_start;
    std::function<void(int stage, Model& model, const PrototypeBank& bank)> on_stage_end;
    std::function<void(const StepLog&)> on_step;
};

std::vector<StepLog> train_stage(Model& model, const StageSnapshot* snapshot,
                                 const StageDataset& dataset, const TrainConfig& cfg);

struct RunResult {
    MetricsMatrix metrics;
    std::vector<StepLog> log;
    std::vector<PrototypeBank> banks;  // one per stage, in order
};

RunResult run_stream(Model& model, const std::vector<StageDataset>& stream,
                     const TrainConfig& cfg, const StreamHooks* hooks = nullptr);

// Retrieval metrics of the current model on one stage's query/gallery pair.
MetricRecord evaluate_stage(Model& model, const StageDataset& dataset,
                            const ForwardToggles& toggles);

}  // namespace ckda
