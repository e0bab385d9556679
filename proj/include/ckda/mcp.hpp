#pragma once

#include "ckda/layers.hpp"

namespace ckda {

struct McpConfig {
    int token_dim = 0;   // ps*ps*C
    int latent_dim = 8;  // d
    int reduction = 4;   // r
    double eps = 1e-5;
    bool literal_mask_order = false;  // rectified outer / sigmoid inner variant
    int height = 0, width = 0, channels = 0, patch = 0;

    void validate() const;
};

// Modality-common prompting: embed patch tokens to a small latent grid,
// suppress per-sample channel style with instance normalization, gate the
// original and normalized grids against each other, and restore an
// image-space prompt shared by both modalities.
class Mcp {
public:
    Mcp() = default;
    explicit Mcp(const McpConfig& cfg, Rng& rng);

    // tokens: (B,M,token_dim) -> x_ori: (B,M,latent_dim); grid order is the
    // row-major patch grid.
    Var embed_tokens(const Var& tokens) const;
    Var normalize(const Var& x_ori) const;  // per (sample, channel) over positions
    std::pair<Var, Var> channel_masks(const Var& x_ori, const Var& x_in) const;
    static Var fuse_common(const Var& x_ori, const Var& x_in, const Var& e_o, const Var& e_i);
    Var restore_prompt(const Var& x_com) const;  // -> (B,H,W,C)
    Var forward(const Var& tokens) const;

    const McpConfig& config() const { return cfg_; }
    void collect(const std::string& prefix, ParamMap& map) const;

private:
    McpConfig cfg_;
    LinearLayer embed_;      // token_dim -> d
    LinearLayer mask_ori1_;  // d -> d/r
    LinearLayer mask_ori2_;  // d/r -> d
    LinearLayer mask_in1_;
    LinearLayer mask_in2_;
    LinearLayer restore_;  // d -> token_dim

    Var mask_branch(const Var& x, const LinearLayer& l1, const LinearLayer& l2) const;
};

}  // namespace ckda
