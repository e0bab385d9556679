#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "ckda/model.hpp"
#include "ckda/trainer.hpp"

namespace ckda {

// Whole-experiment configuration: data stream, model geometry, training
// schedule, output layout and the ablation grid. Loaded from JSON with
// defaults; any scalar may be overridden with dotted-path assignments
// (flag > file > default).
struct ExperimentConfig {
    // stream
    int stages = 3;
    int identities_per_stage = 20;
    int samples_per_identity_per_modality = 6;
    double noise_amp = 0.03;
    double style_strength = 1.0;
    double ir_channel_bound = 0.0;
    uint64_t master_seed = 77;

    // model
    ModelConfig model;

    // training
    TrainConfig train;

    // output
    std::string out_dir = "runs/ckda";
    bool export_stream_files = false;
    int heatmap_samples = 4;

    // ablation
    std::vector<uint64_t> ablation_seeds = {1, 2, 3};

    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::string& path);
    nlohmann::json to_json() const;  // canonical (sorted keys)
    std::string config_hash() const;

    // "a.b.c=value"; value parsed as JSON scalar, bare words as strings
    void apply_override(const std::string& assignment);

    void validate() const;  // field-level messages
    StageConfig stage_template() const;
};

inline constexpr const char* kVersionString = "ckda 0.1.0";

}  // namespace ckda
