#include "ckda/backbone.hpp"

#include <cmath>

namespace ckda {

Tensor patchify_image(const Tensor& image, int patch) {
    if (image.rank() != 3) throw StateError("patchify_image: expected (H,W,C)");
    Var v = ag::patchify(make_const(image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)})),
                         patch);
    const Tensor& t = v->value;
    return t.reshaped({t.dim(1), t.dim(2)});
}

Tensor depatchify_tokens(const Tensor& tokens, int height, int width, int channels, int patch) {
    if (tokens.rank() != 2) throw StateError("depatchify_tokens: expected (M,Dtok)");
    Var v = ag::depatchify(make_const(tokens.reshaped({1, tokens.dim(0), tokens.dim(1)})), height,
                           width, channels, patch);
    return v->value.reshaped({height, width, channels});
}

void BackboneConfig::validate() const {
    if (patch <= 0) throw ConfigError("patch must be positive");
    if (height <= 0 || height % patch != 0)
        throw ConfigError("height must be a positive multiple of patch");
    if (width <= 0 || width % patch != 0)
        throw ConfigError("width must be a positive multiple of patch");
    if (channels <= 0) throw ConfigError("channels must be positive");
    if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
        throw ConfigError("embed_dim must be a positive multiple of heads");
    if (blocks < 1) throw ConfigError("blocks must be >= 1");
    if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
}

TinyVit::TinyVit(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg.embed_dim;
    patch_embed_.init(cfg.token_dim(), d, rng, 0.02);

    Tensor cls({d});
    for (int64_t i = 0; i < cls.numel(); ++i) cls[i] = 0.02 * rng.normal();
    cls_ = make_leaf(std::move(cls));

    Tensor pos({cfg.token_count() + 1, d});
    for (int64_t i = 0; i < pos.numel(); ++i) pos[i] = 0.02 * rng.normal();
    pos_ = make_leaf(std::move(pos));

    blocks_.resize(static_cast<size_t>(cfg.blocks));
    for (Block& blk : blocks_) {
        blk.ln1.init(d);
        blk.ln2.init(d);
        blk.qkv.init(d, 3 * d, rng, 0.02);
        blk.proj.init(d, d, rng, 0.02);
        blk.fc1.init(d, cfg.mlp_ratio * d, rng, 0.02);
        blk.fc2.init(cfg.mlp_ratio * d, d, rng, 0.02);
    }
    ln_final_.init(d);
}

Var TinyVit::attention(const Block& blk, const Var& x) const {
    const int bsz = x->value.dim(0);
    const int t = x->value.dim(1);
    const int d = cfg_.embed_dim;
    const int nh = cfg_.heads;
    const int dh = d / nh;

    Var qkv = blk.qkv.forward(x);  // (B,T,3d)
    auto split_heads = [&](const Var& m) {
        Var r = ag::reshape(m, {bsz, t, nh, dh});
        r = ag::permute_axes(r, {0, 2, 1, 3});  // (B,nh,T,dh)
        return ag::reshape(r, {bsz * nh, t, dh});
    };
    Var q = split_heads(ag::slice_last(qkv, 0, d));
    Var k = split_heads(ag::slice_last(qkv, d, d));
    Var v = split_heads(ag::slice_last(qkv, 2 * d, d));

    Var scores = ag::bmm(q, ag::permute_axes(k, {0, 2, 1}));
    scores = ag::affine(scores, 1.0 / std::sqrt(static_cast<double>(dh)), 0.0);
    Var attn = ag::softmax_last(scores);
    Var out = ag::bmm(attn, v);  // (B*nh,T,dh)
    out = ag::reshape(out, {bsz, nh, t, dh});
    out = ag::permute_axes(out, {0, 2, 1, 3});
    out = ag::reshape(out, {bsz, t, d});
    return blk.proj.forward(out);
}

Var TinyVit::forward(const Var& images) const {
    const Tensor& iv = images->value;
    if (iv.rank() != 4 || iv.dim(1) != cfg_.height || iv.dim(2) != cfg_.width ||
        iv.dim(3) != cfg_.channels)
        throw StateError("TinyVit::forward: image shape " + shape_str(iv.shape()) +
                         " does not match configured geometry");
    Var tokens = ag::patchify(images, cfg_.patch);
    Var x = patch_embed_.forward(tokens);  // (B,M,d)
    x = ag::prepend_row(x, cls_);
    x = ag::add_rows(x, pos_);
    for (const Block& blk : blocks_) {
        x = ag::add(x, attention(blk, blk.ln1.forward(x)));
        Var m = blk.ln2.forward(x);
        m = blk.fc1.forward(m);
        m = ag::gelu(m);
        m = blk.fc2.forward(m);
        x = ag::add(x, m);
    }
    x = ln_final_.forward(x);
    return ag::select_row(x, 0);
}

void TinyVit::collect(const std::string& prefix, ParamMap& map) const {
    patch_embed_.collect(prefix + ".patch_embed", map);
    map.add(prefix + ".cls", cls_);
    map.add(prefix + ".pos", pos_);
    for (size_t i = 0; i < blocks_.size(); ++i) {
        const std::string bp = prefix + ".block" + std::to_string(i);
        blocks_[i].ln1.collect(bp + ".ln1", map);
        blocks_[i].ln2.collect(bp + ".ln2", map);
        blocks_[i].qkv.collect(bp + ".qkv", map);
        blocks_[i].proj.collect(bp + ".proj", map);
        blocks_[i].fc1.collect(bp + ".fc1", map);
        blocks_[i].fc2.collect(bp + ".fc2", map);
    }
    ln_final_.collect(prefix + ".ln_final", map);
}

}  // namespace ckda
