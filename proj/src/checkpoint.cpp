#include "ckda/checkpoint.hpp"

#include <fstream>

#include "json.hpp"

namespace ckda {

namespace {

using nlohmann::json;

json tensor_to_json(const Tensor& t) {
    return json{{"shape", t.shape()}, {"data", t.vec()}};
}

Tensor tensor_from_json(const json& j) {
    Shape shape = j.at("shape").get<Shape>();
    std::vector<double> data = j.at("data").get<std::vector<double>>();
    return Tensor::from(std::move(shape), std::move(data));
}

json model_config_to_json(const ModelConfig& c) {
    return json{{"height", c.backbone.height},
                {"width", c.backbone.width},
                {"channels", c.backbone.channels},
                {"patch", c.backbone.patch},
                {"embed_dim", c.backbone.embed_dim},
                {"blocks", c.backbone.blocks},
                {"heads", c.backbone.heads},
                {"mlp_ratio", c.backbone.mlp_ratio},
                {"mcp_latent_dim", c.mcp_latent_dim},
                {"reduction", c.reduction},
                {"mcp_eps", c.mcp_eps},
                {"mcp_literal_masks", c.mcp_literal_masks},
                {"msp_dropout", c.msp_dropout}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.backbone.height = j.at("height").get<int>();
    c.backbone.width = j.at("width").get<int>();
    c.backbone.channels = j.at("channels").get<int>();
    c.backbone.patch = j.at("patch").get<int>();
    c.backbone.embed_dim = j.at("embed_dim").get<int>();
    c.backbone.blocks = j.at("blocks").get<int>();
    c.backbone.heads = j.at("heads").get<int>();
    c.backbone.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.mcp_latent_dim = j.at("mcp_latent_dim").get<int>();
    c.reduction = j.at("reduction").get<int>();
    c.mcp_eps = j.at("mcp_eps").get<double>();
    c.mcp_literal_masks = j.at("mcp_literal_masks").get<bool>();
    c.msp_dropout = j.at("msp_dropout").get<double>();
    return c;
}

}  // namespace

void save_checkpoint(const std::string& path, Model& model,
                     const std::optional<PrototypeBank>& bank, const std::string& config_hash) {
    json j;
    j["format"] = "ckda-checkpoint";
    j["version"] = kCheckpointVersion;
    j["stage_index"] = model.stage_index;
    j["ema_lambda"] = model.ema_lambda;
    j["config_hash"] = config_hash;
    j["model_config"] = model_config_to_json(model.config());

    std::vector<int> head_sizes;
    for (int s = 1; s <= model.head_count(); ++s) head_sizes.push_back(model.head(s).num_classes);
    j["head_sizes"] = head_sizes;

    ParamMap map = model.collect();
    json params = json::object();
    for (const ParamRef& p : map.params) params[p.name] = tensor_to_json(p.var->value);
    j["params"] = std::move(params);
    json buffers = json::object();
    for (const BufferRef& b : map.buffers) buffers[b.name] = tensor_to_json(*b.tensor);
    j["buffers"] = std::move(buffers);

    if (bank) {
        j["prototype_bank"] = json{{"stage", bank->stage},
                                   {"identity_ids", bank->identity_ids},
                                   {"visible", tensor_to_json(bank->visible)},
                                   {"infrared", tensor_to_json(bank->infrared)}};
    } else {
        j["prototype_bank"] = nullptr;
    }

    std::ofstream out(path);
    if (!out) throw StateError("cannot open checkpoint path " + path + " for writing");
    out << j.dump();
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw StateError("cannot open checkpoint " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw StateError("checkpoint " + path + " is not valid JSON: " + e.what());
    }
    if (j.value("format", "") != "ckda-checkpoint")
        throw StateError("checkpoint " + path + " has unknown format tag");
    if (j.value("version", -1) != kCheckpointVersion)
        throw StateError("checkpoint " + path + " has unsupported version");

    LoadedCheckpoint out;
    out.config_hash = j.at("config_hash").get<std::string>();
    ModelConfig cfg = model_config_from_json(j.at("model_config"));
    out.model = std::make_unique<Model>(cfg, 0);
    out.model->stage_index = j.at("stage_index").get<int>();
    out.model->ema_lambda = j.at("ema_lambda").get<double>();
    Rng dummy(0);
    for (int n : j.at("head_sizes").get<std::vector<int>>()) out.model->add_head(n, dummy);

    ParamMap map = out.model->collect();
    const json& params = j.at("params");
    for (ParamRef& p : map.params) {
        if (!params.contains(p.name))
            throw StateError("checkpoint missing parameter " + p.name);
        Tensor t = tensor_from_json(params.at(p.name));
        if (!t.same_shape(p.var->value))
            throw StateError("checkpoint parameter " + p.name + " has shape " +
                             shape_str(t.shape()) + ", expected " +
                             shape_str(p.var->value.shape()));
        p.var->value = std::move(t);
    }
    const json& buffers = j.at("buffers");
    for (BufferRef& b : map.buffers) {
        if (!buffers.contains(b.name)) throw StateError("checkpoint missing buffer " + b.name);
        Tensor t = tensor_from_json(buffers.at(b.name));
        if (!t.same_shape(*b.tensor))
            throw StateError("checkpoint buffer " + b.name + " has unexpected shape");
        *b.tensor = std::move(t);
    }

    if (!j.at("prototype_bank").is_null()) {
        const json& bj = j.at("prototype_bank");
        PrototypeBank bank;
        bank.stage = bj.at("stage").get<int>();
        bank.identity_ids = bj.at("identity_ids").get<std::vector<int>>();
        bank.visible = tensor_from_json(bj.at("visible"));
        bank.infrared = tensor_from_json(bj.at("infrared"));
        bank.validate();
        out.bank = std::move(bank);
    }
    return out;
}

}  // namespace ckda
