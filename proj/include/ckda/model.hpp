#pragma once

#include <memory>

#include "ckda/backbone.hpp"
#include "ckda/mcp.hpp"
#include "ckda/msp.hpp"
#include "ckda/synth_data.hpp"

namespace ckda {

struct ModelConfig {
    BackboneConfig backbone;
    int mcp_latent_dim = 8;
    int reduction = 4;
    double mcp_eps = 1e-5;
    bool mcp_literal_masks = false;
    double msp_dropout = 0.1;

    McpConfig mcp() const;
    MspConfig msp() const;
    void validate() const;
};

struct ForwardToggles {
    bool mcp = true;
    bool msp = true;
};

// One forward pass over a modality-blocked batch: rows [0, b_visible) are
// visible samples, the rest infrared.
struct BatchForward {
    Var z_pre;  // (B, d_f) triplet features
    Var z;      // (B, d_f) post-neck features
    Var k_com;  // (B,H,W,C) or null when MCP disabled
    Var k_spe_vis, k_spe_ir;  // per-block specific prompts or null
    Var k_p_vis, k_p_ir;      // composed prompts per block or null
    Var prompted;             // network input actually encoded
    int b_visible = 0;
    int b_infrared = 0;
};

struct FeaturePair {
    Tensor z_pre;
    Tensor z;
};

class Model {
public:
    Model() = default;
    Model(const ModelConfig& cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    int feature_dim() const { return cfg_.backbone.embed_dim; }

    int stage_index = 0;      // highest trained stage, 0 before any training
    double ema_lambda = 0.5;  // in [0,1]

    void add_head(int num_classes, Rng& rng);
    int head_count() const { return static_cast<int>(heads_.size()); }
    const Head& head(int stage) const;  // 1-based stage

    // images must be modality-blocked: visible rows first.
    BatchForward forward_batch(const Tensor& images, int b_visible, const ForwardToggles& toggles,
                               bool training, Rng& dropout_rng);

    // eval-mode single-sample feature (no gradient tape)
    FeaturePair encode(const Tensor& image, Modality m, const ForwardToggles& toggles);

    Var classify(const Var& z, int stage) const;

    ParamMap collect();  // canonical names; stable ordering
    std::unique_ptr<Model> clone() const;

    TinyVit& vit() { return vit_; }
    BnNeck& neck() { return neck_; }
    Mcp& mcp() { return mcp_; }
    Msp& msp() { return msp_; }

    // Trainable parameters for one stage's optimizer: backbone, neck, enabled
    // prompt modules and the current stage head only.
    std::vector<Var> trainable_params(int stage, const ForwardToggles& toggles);

private:
    ModelConfig cfg_;
    TinyVit vit_;
    BnNeck neck_;
    Mcp mcp_;
    Msp msp_;
    std::vector<Head> heads_;
};

// Convex parameter merge after a stage: backbone and (by default) prompt
// parameters and buffers are interpolated; classifier heads are taken from
// the new state unchanged.
std::unique_ptr<Model> ema_merge(const Model& old_state, const Model& new_state, double lambda,
                                 bool merge_prompts = true);

}  // namespace ckda
