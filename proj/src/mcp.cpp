#include "ckda/mcp.hpp"

namespace ckda {

void McpConfig::validate() const {
    if (latent_dim <= 0) throw ConfigError("mcp latent_dim must be positive");
    if (reduction <= 0 || latent_dim % reduction != 0)
        throw ConfigError("mcp latent_dim must be divisible by reduction");
    if (latent_dim / reduction < 1) throw ConfigError("mcp latent_dim/reduction must be >= 1");
    if (eps <= 0.0) throw ConfigError("mcp eps must be positive");
    if (token_dim <= 0) throw ConfigError("mcp token_dim must be positive");
}

Mcp::Mcp(const McpConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg.latent_dim;
    const int dr = d / cfg.reduction;
    embed_.init(cfg.token_dim, d, rng, 0.02);
    mask_ori1_.init(d, dr, rng, 0.02);
    mask_ori2_.init(dr, d, rng, 0.02);
    mask_in1_.init(d, dr, rng, 0.02);
    mask_in2_.init(dr, d, rng, 0.02);
    // restoration starts at zero so the common prompt begins as a no-op
    restore_.init_zero(d, cfg.token_dim);
}

Var Mcp::embed_tokens(const Var& tokens) const {
    const Tensor& tv = tokens->value;
    if (tv.rank() != 3 || tv.dim(2) != cfg_.token_dim)
        throw ConfigError("embed_tokens: expected (B,M," + std::to_string(cfg_.token_dim) +
                          ") tokens, got " + shape_str(tv.shape()));
    return embed_.forward(tokens);
}

Var Mcp::normalize(const Var& x_ori) const { return ag::instance_norm(x_ori, cfg_.eps); }

Var Mcp::mask_branch(const Var& x, const LinearLayer& l1, const LinearLayer& l2) const {
    if (cfg_.literal_mask_order) {
        // as printed: rectifier outside, sigmoid inside (masks may exceed 1)
        return ag::relu(l2.forward(ag::sigmoid(l1.forward(x))));
    }
    return ag::sigmoid(l2.forward(ag::relu(l1.forward(x))));
}

std::pair<Var, Var> Mcp::channel_masks(const Var& x_ori, const Var& x_in) const {
    if (!x_ori->value.same_shape(x_in->value))
        throw StateError("channel_masks: operand shapes differ");
    return {mask_branch(x_ori, mask_ori1_, mask_ori2_),
            mask_branch(x_in, mask_in1_, mask_in2_)};
}

Var Mcp::fuse_common(const Var& x_ori, const Var& x_in, const Var& e_o, const Var& e_i) {
    // x_com = e_o*x_ori + (1 - e_o)*(e_i*x_in)
    Var keep = ag::mul(e_o, x_ori);
    Var inv = ag::affine(e_o, -1.0, 1.0);
    Var repl = ag::mul(inv, ag::mul(e_i, x_in));
    return ag::add(keep, repl);
}

Var Mcp::restore_prompt(const Var& x_com) const {
    Var gated = ag::sigmoid(x_com);
    Var tokens = restore_.forward(gated);
    return ag::depatchify(tokens, cfg_.height, cfg_.width, cfg_.channels, cfg_.patch);
}

Var Mcp::forward(const Var& tokens) const {
    Var x_ori = embed_tokens(tokens);
    Var x_in = normalize(x_ori);
    auto [e_o, e_i] = channel_masks(x_ori, x_in);
    Var x_com = fuse_common(x_ori, x_in, e_o, e_i);
    return restore_prompt(x_com);
}

void Mcp::collect(const std::string& prefix, ParamMap& map) const {
    embed_.collect(prefix + ".embed", map);
    mask_ori1_.collect(prefix + ".mask_ori1", map);
    mask_ori2_.collect(prefix + ".mask_ori2", map);
    mask_in1_.collect(prefix + ".mask_in1", map);
    mask_in2_.collect(prefix + ".mask_in2", map);
    restore_.collect(prefix + ".restore", map);
}

}  // namespace ckda
