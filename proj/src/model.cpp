#include "ckda/model.hpp"

#include <unordered_map>

namespace ckda {

McpConfig ModelConfig::mcp() const {
    McpConfig m;
    m.token_dim = backbone.token_dim();
    m.latent_dim = mcp_latent_dim;
    m.reduction = reduction;
    m.eps = mcp_eps;
    m.literal_mask_order = mcp_literal_masks;
    m.height = backbone.height;
    m.width = backbone.width;
    m.channels = backbone.channels;
    m.patch = backbone.patch;
    return m;
}

MspConfig ModelConfig::msp() const {
    MspConfig m;
    m.token_dim = backbone.token_dim();
    m.reduction = reduction;
    m.dropout = msp_dropout;
    m.height = backbone.height;
    m.width = backbone.width;
    m.channels = backbone.channels;
    m.patch = backbone.patch;
    return m;
}

void ModelConfig::validate() const {
    backbone.validate();
    mcp().validate();
    msp().validate();
}

Model::Model(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    Rng vit_rng = rng.child(1);
    Rng mcp_rng = rng.child(2);
    Rng msp_rng = rng.child(3);
    vit_ = TinyVit(cfg.backbone, vit_rng);
    neck_.init(cfg.backbone.embed_dim);
    mcp_ = Mcp(cfg.mcp(), mcp_rng);
    msp_ = Msp(cfg.msp(), msp_rng);
}

void Model::add_head(int num_classes, Rng& rng) {
    Head h;
    h.init(cfg_.backbone.embed_dim, num_classes, rng);
    heads_.push_back(std::move(h));
}

const Head& Model::head(int stage) const {
    if (stage < 1 || stage > static_cast<int>(heads_.size()))
        throw StateError("no classifier head for stage " + std::to_string(stage));
    return heads_[static_cast<size_t>(stage - 1)];
}

Var Model::classify(const Var& z, int stage) const { return head(stage).forward(z); }

namespace {

// contiguous block of rows along axis 0, preserving trailing shape
Var rows_block(const Var& x, int start, int count) {
    Shape s = x->value.shape();
    const int total = s[0];
    const int64_t per = x->value.numel() / total;
    Var flat = ag::reshape(x, {total, static_cast<int>(per)});
    std::vector<int> idx(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = start + i;
    Var block = ag::gather_rows(flat, std::move(idx));
    s[0] = count;
    return ag::reshape(block, std::move(s));
}

}  // namespace

BatchForward Model::forward_batch(const Tensor& images, int b_visible,
                                  const ForwardToggles& toggles, bool training,
                                  Rng& dropout_rng) {
    if (images.rank() != 4) throw StateError("forward_batch: images must be (B,H,W,C)");
    const int bsz = images.dim(0);
    if (b_visible < 0 || b_visible > bsz)
        throw StateError("forward_batch: invalid visible block size");

    BatchForward out;
    out.b_visible = b_visible;
    out.b_infrared = bsz - b_visible;

    Var x = make_const(images);
    if (!toggles.mcp && !toggles.msp) {
        out.prompted = x;
    } else {
        Var tokens = ag::patchify(x, cfg_.backbone.patch);
        if (toggles.mcp) out.k_com = mcp_.forward(tokens);

        Var prompted_vis, prompted_ir;
        auto run_block = [&](Modality m, int start, int count, Var& k_spe_out, Var& k_p_out) {
            if (count == 0) return Var();
            Var imgs_m = rows_block(x, start, count);
            Var k_p;
            if (toggles.msp) {
                Var tok_m = rows_block(tokens, start, count);
                k_spe_out = msp_.forward(tok_m, m, training, dropout_rng);
                k_p = k_spe_out;
            }
            if (toggles.mcp) {
                Var k_com_m = rows_block(out.k_com, start, count);
                k_p = k_p ? Msp::compose_prompt(k_com_m, k_p) : k_com_m;
            }
            k_p_out = k_p;
            return Msp::merge_prompt(imgs_m, k_p);
        };
        prompted_vis = run_block(Modality::visible, 0, b_visible, out.k_spe_vis, out.k_p_vis);
        prompted_ir =
            run_block(Modality::infrared, b_visible, out.b_infrared, out.k_spe_ir, out.k_p_ir);
        if (prompted_vis && prompted_ir)
            out.prompted = ag::concat0(prompted_vis, prompted_ir);
        else
            out.prompted = prompted_vis ? prompted_vis : prompted_ir;
    }

    out.z_pre = vit_.forward(out.prompted);
    out.z = neck_.forward(out.z_pre, training);
    return out;
}

FeaturePair Model::encode(const Tensor& image, Modality m, const ForwardToggles& toggles) {
    NoGradGuard ng;
    Rng dummy(0);
    Tensor batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
    BatchForward fwd =
        forward_batch(batch, m == Modality::visible ? 1 : 0, toggles, false, dummy);
    const int d = feature_dim();
    return {fwd.z_pre->value.reshaped({d}), fwd.z->value.reshaped({d})};
}

ParamMap Model::collect() {
    ParamMap map;
    vit_.collect("vit", map);
    neck_.collect("neck", map);
    mcp_.collect("mcp", map);
    msp_.collect("msp", map);
    for (size_t i = 0; i < heads_.size(); ++i)
        heads_[i].fc.collect("heads." + std::to_string(i), map);
    return map;
}

std::unique_ptr<Model> Model::clone() const {
    auto copy = std::make_unique<Model>(cfg_, 0);
    copy->stage_index = stage_index;
    copy->ema_lambda = ema_lambda;
    Rng dummy(0);
    for (const Head& h : heads_) copy->add_head(h.num_classes, dummy);

    ParamMap src = const_cast<Model*>(this)->collect();
    ParamMap dst = copy->collect();
    if (src.params.size() != dst.params.size() || src.buffers.size() != dst.buffers.size())
        throw StateError("clone: parameter map mismatch");
    for (size_t i = 0; i < src.params.size(); ++i) {
        if (src.params[i].name != dst.params[i].name)
            throw StateError("clone: name mismatch at " + src.params[i].name);
        dst.params[i].var->value = src.params[i].var->value;
    }
    for (size_t i = 0; i < src.buffers.size(); ++i)
        *dst.buffers[i].tensor = *src.buffers[i].tensor;
    return copy;
}

std::vector<Var> Model::trainable_params(int stage, const ForwardToggles& toggles) {
    std::vector<Var> out;
    ParamMap map;
    vit_.collect("vit", map);
    neck_.collect("neck", map);
    if (toggles.mcp) mcp_.collect("mcp", map);
    if (toggles.msp) msp_.collect("msp", map);
    for (const ParamRef& p : map.params) out.push_back(p.var);
    const Head& h = head(stage);
    out.push_back(h.fc.w);
    out.push_back(h.fc.b);
    return out;
}

std::unique_ptr<Model> ema_merge(const Model& old_state, const Model& new_state, double lambda,
                                 bool merge_prompts) {
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("ema lambda must be in [0,1]");
    auto merged = new_state.clone();

    ParamMap old_map = const_cast<Model&>(old_state).collect();
    std::unordered_map<std::string, const Tensor*> old_params, old_buffers;
    for (const ParamRef& p : old_map.params) old_params[p.name] = &p.var->value;
    for (const BufferRef& b : old_map.buffers) old_buffers[b.name] = b.tensor;

    auto should_merge = [&](const std::string& name) {
        if (name.rfind("heads.", 0) == 0) return false;  // heads are stage-specific
        if (!merge_prompts && (name.rfind("mcp.", 0) == 0 || name.rfind("msp.", 0) == 0))
            return false;
        return true;
    };
    auto blend = [lambda](const std::string& name, const Tensor& oldv, Tensor& target) {
        if (!oldv.same_shape(target))
            throw StateError("ema_merge: shape mismatch for " + name + ": " +
                             shape_str(oldv.shape()) + " vs " + shape_str(target.shape()));
        for (int64_t i = 0; i < target.numel(); ++i)
            target[i] = lambda * oldv[i] + (1.0 - lambda) * target[i];
    };

    ParamMap dst = merged->collect();
    for (ParamRef& p : dst.params) {
        if (!should_merge(p.name)) continue;
        auto it = old_params.find(p.name);
        if (it == old_params.end()) throw StateError("ema_merge: old state lacks " + p.name);
        blend(p.name, *it->second, p.var->value);
    }
    for (BufferRef& b : dst.buffers) {
        if (!should_merge(b.name)) continue;
        auto it = old_buffers.find(b.name);
        if (it == old_buffers.end()) throw StateError("ema_merge: old state lacks " + b.name);
        blend(b.name, *it->second, *b.tensor);
    }
    return merged;
}

}  // namespace ckda
