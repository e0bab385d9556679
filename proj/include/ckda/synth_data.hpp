#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ckda/tensor.hpp"

namespace ckda {

enum class Modality { visible, infrared };

const char* modality_name(Modality m);

// Per-stage global appearance drift: affine pixel transform plus a
// background tone offset, clipped to [0,1] after application.
struct StyleShift {
    double gain = 1.0;
    double bias = 0.0;
    double background = 0.0;
};

struct IdentitySpec {
    int identity_id = 0;
    // fractions of min(H,W): torso_rx, torso_ry, torso_rot, center_dx, head_r, head_dx
    std::vector<double> silhouette_params;
    std::array<std::array<double, 3>, 3> visible_palette{};  // head, torso, legs
    uint64_t thermal_seed = 0;
};

struct StageConfig {
    int stage_index = 1;
    int num_identities = 20;
    int samples_per_identity_per_modality = 6;
    StyleShift style_shift;
    int height = 32;
    int width = 32;
    int channels = 3;
    int patch_size = 8;
    double noise_amp = 0.03;
    double ir_channel_bound = 0.0;  // max allowed channel deviation in infrared renders
    double style_strength = 1.0;    // scales the per-stage style drift drawn by make_stream

    void validate() const;  // throws ConfigError naming the offending field
};

struct Sample {
    Tensor image;  // (H,W,C) in [0,1]
    int identity = 0;
    Modality modality = Modality::visible;
    int stage = 1;
};

struct StageDataset {
    int stage_index = 1;
    std::vector<Sample> train;
    std::vector<Sample> query;    // single modality
    std::vector<Sample> gallery;  // the other modality
    Modality query_modality = Modality::visible;
    std::vector<IdentitySpec> identity_roster;
    StageConfig config;

    // Trainer reads training samples through this accessor; the counter backs
    // the rehearsal-freeness check.
    const Sample& train_sample(size_t i) const {
        ++train_reads_;
        return train[i];
    }
    uint64_t train_read_count() const { return train_reads_; }

    // local class index of a global identity id (roster order)
    int local_label(int identity_id) const;

private:
    mutable uint64_t train_reads_ = 0;
};

// Binary body mask shared by both modality renders of one identity.
Tensor silhouette_mask(const IdentitySpec& spec, int height, int width);
// Region masks behind the visible palette: 0 head, 1 torso, 2 legs.
Tensor palette_region_mask(const IdentitySpec& spec, int height, int width, int region);

Tensor render_visible(const IdentitySpec& spec, const StyleShift& style, const StageConfig& cfg,
                      Rng& rng);
Tensor render_infrared(const IdentitySpec& spec, const StyleShift& style, const StageConfig& cfg,
                       Rng& rng);

IdentitySpec draw_identity(int identity_id, Rng& rng);

std::vector<StageDataset> make_stream(int num_stages, const StageConfig& per_stage,
                                      uint64_t master_seed);

// One image file per sample plus manifest.jsonl with fields
// {file, stage, identity, modality, split}.
void export_stream(const std::vector<StageDataset>& stream, const std::string& dir);

}  // namespace ckda
