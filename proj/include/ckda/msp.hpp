#pragma once

#include "ckda/layers.hpp"
#include "ckda/synth_data.hpp"

namespace ckda {

struct MspConfig {
    int token_dim = 0;
    int reduction = 4;
    double dropout = 0.1;
    int height = 0, width = 0, channels = 0, patch = 0;

    void validate() const;
};

// Modality-specific prompting: one lightweight bottleneck generator per
// modality (no shared parameters), batch-normalized over the batch x token
// axis, with dropout active only in training mode.
class Msp {
public:
    Msp() = default;
    Msp(const MspConfig& cfg, Rng& rng);

    // tokens: (B,M,token_dim) -> k_spe: (B,H,W,C)
    Var forward(const Var& tokens, Modality m, bool training, Rng& rng);

    static Var compose_prompt(const Var& k_com, const Var& k_spe);   // k_p = k_spe + k_com
    static Var merge_prompt(const Var& image, const Var& k_p);       // prompted image
    // mean absolute difference between current and previous-stage prompts
    static Var prompt_alignment_loss(const Var& current, const Var& previous);

    const MspConfig& config() const { return cfg_; }
    void collect(const std::string& prefix, ParamMap& map);

private:
    struct Branch {
        LinearLayer fc1;  // token_dim -> token_dim/r
        BatchNormLayer bn;
        LinearLayer fc2;  // token_dim/r -> token_dim
    };
    MspConfig cfg_;
    Branch visible_;
    Branch infrared_;

    Branch& branch(Modality m) { return m == Modality::visible ? visible_ : infrared_; }
};

}  // namespace ckda
