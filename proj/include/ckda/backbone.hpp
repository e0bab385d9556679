#pragma once

#include "ckda/layers.hpp"

namespace ckda {

// Lossless tensor-level tokenization (single image, (H,W,C) <-> (M,Dtok)).
Tensor patchify_image(const Tensor& image, int patch);
Tensor depatchify_tokens(const Tensor& tokens, int height, int width, int channels, int patch);

struct BackboneConfig {
    int height = 32, width = 32, channels = 3;
    int patch = 8;
    int embed_dim = 64;
    int blocks = 2;
    int heads = 4;
    int mlp_ratio = 2;

    int token_dim() const { return patch * patch * channels; }
    int token_count() const { return (height / patch) * (width / patch); }
    void validate() const;
};

// Small pre-norm ViT: patch embedding, class token, learned positions,
// transformer blocks, final layer norm; the class-token output is the
// pre-neck feature.
class TinyVit {
public:
    TinyVit() = default;
    TinyVit(const BackboneConfig& cfg, Rng& rng);

    Var forward(const Var& images) const;  // (B,H,W,C) -> (B, embed_dim)
    const BackboneConfig& config() const { return cfg_; }
    void collect(const std::string& prefix, ParamMap& map) const;

private:
    struct Block {
        LayerNormLayer ln1, ln2;
        LinearLayer qkv;   // d -> 3d
        LinearLayer proj;  // d -> d
        LinearLayer fc1;   // d -> mlp
        LinearLayer fc2;   // mlp -> d
    };

    BackboneConfig cfg_;
    LinearLayer patch_embed_;
    Var cls_;  // (d)
    Var pos_;  // (M+1, d)
    std::vector<Block> blocks_;
    LayerNormLayer ln_final_;

    Var attention(const Block& blk, const Var& x) const;
};

// Batch-norm neck between embedding and classifier.
struct BnNeck {
    BatchNormLayer bn;

    void init(int dim) { bn.init(dim); }
    Var forward(const Var& z_pre, bool training) { return bn.forward(z_pre, training); }
    void collect(const std::string& prefix, ParamMap& map) { bn.collect(prefix + ".bn", map); }
};

// Per-stage identity classifier.
struct Head {
    LinearLayer fc;
    int num_classes = 0;

    void init(int feature_dim, int classes, Rng& rng) {
        num_classes = classes;
        fc.init(feature_dim, classes, rng, 0.01);
    }
    Var forward(const Var& z) const { return fc.forward(z); }
};

}  // namespace ckda
