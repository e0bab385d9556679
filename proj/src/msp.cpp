#include "ckda/msp.hpp"

namespace ckda {

void MspConfig::validate() const {
    if (token_dim <= 0) throw ConfigError("msp token_dim must be positive");
    if (reduction <= 0 || token_dim % reduction != 0)
        throw ConfigError("msp token_dim must be divisible by reduction");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("msp dropout must be in [0,1)");
}

Msp::Msp(const MspConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int dr = cfg.token_dim / cfg.reduction;
    for (Branch* br : {&visible_, &infrared_}) {
        br->fc1.init(cfg.token_dim, dr, rng, 0.02);
        br->bn.init(dr);
        // zero-initialized output layer: the specific prompt starts as a no-op
        br->fc2.init_zero(dr, cfg.token_dim);
    }
}

Var Msp::forward(const Var& tokens, Modality m, bool training, Rng& rng) {
    const Tensor& tv = tokens->value;
    if (tv.rank() != 3 || tv.dim(2) != cfg_.token_dim)
        throw ConfigError("msp forward: expected (B,M," + std::to_string(cfg_.token_dim) +
                          ") tokens, got " + shape_str(tv.shape()));
    if (training && tv.dim(0) < 2)
        throw StateError("msp forward: training mode needs batch size >= 2 for batch norm");
    Branch& br = branch(m);
    Var u = br.fc1.forward(tokens);
    u = br.bn.forward(u, training);
    Var v = br.fc2.forward(u);
    v = ag::dropout(v, cfg_.dropout, training, rng);
    return ag::depatchify(v, cfg_.height, cfg_.width, cfg_.channels, cfg_.patch);
}

Var Msp::compose_prompt(const Var& k_com, const Var& k_spe) {
    if (!k_com->value.same_shape(k_spe->value))
        throw StateError("compose_prompt: shape mismatch " + shape_str(k_com->value.shape()) +
                         " vs " + shape_str(k_spe->value.shape()));
    return ag::add(k_spe, k_com);
}

Var Msp::merge_prompt(const Var& image, const Var& k_p) {
    if (!image->value.same_shape(k_p->value))
        throw StateError("merge_prompt: shape mismatch " + shape_str(image->value.shape()) +
                         " vs " + shape_str(k_p->value.shape()));
    return ag::add(image, k_p);
}

Var Msp::prompt_alignment_loss(const Var& current, const Var& previous) {
    return ag::l1_mean(current, previous);
}

void Msp::collect(const std::string& prefix, ParamMap& map) {
    visible_.fc1.collect(prefix + ".visible.fc1", map);
    visible_.bn.collect(prefix + ".visible.bn", map);
    visible_.fc2.collect(prefix + ".visible.fc2", map);
    infrared_.fc1.collect(prefix + ".infrared.fc1", map);
    infrared_.bn.collect(prefix + ".infrared.bn", map);
    infrared_.fc2.collect(prefix + ".infrared.fc2", map);
}

}  // namespace ckda
