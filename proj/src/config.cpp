#include "ckda/config.hpp"

#include <fstream>
#include <sstream>

namespace ckda {

using nlohmann::json;

namespace {

template <typename T>
void read_field(const json& j, const std::string& section, const char* key, T& out) {
    if (!j.contains(section)) return;
    const json& s = j.at(section);
    if (!s.contains(key)) return;
    try {
        out = s.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(section + "." + key + ": wrong type (got " + s.at(key).dump() + ")");
    }
}

void check(bool ok, const std::string& field, const std::string& rule) {
    if (!ok) throw ConfigError(field + ": " + rule);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (key != "stream" && key != "model" && key != "train" && key != "output" &&
            key != "ablation")
            throw ConfigError("unknown config section '" + key + "'");
    }
    ExperimentConfig c;
    read_field(j, "stream", "stages", c.stages);
    read_field(j, "stream", "identities_per_stage", c.identities_per_stage);
    read_field(j, "stream", "samples_per_identity_per_modality",
               c.samples_per_identity_per_modality);
    read_field(j, "stream", "noise_amp", c.noise_amp);
    read_field(j, "stream", "style_strength", c.style_strength);
    read_field(j, "stream", "ir_channel_bound", c.ir_channel_bound);
    read_field(j, "stream", "master_seed", c.master_seed);

    read_field(j, "model", "height", c.model.backbone.height);
    read_field(j, "model", "width", c.model.backbone.width);
    read_field(j, "model", "channels", c.model.backbone.channels);
    read_field(j, "model", "patch", c.model.backbone.patch);
    read_field(j, "model", "embed_dim", c.model.backbone.embed_dim);
    read_field(j, "model", "blocks", c.model.backbone.blocks);
    read_field(j, "model", "heads", c.model.backbone.heads);
    read_field(j, "model", "mlp_ratio", c.model.backbone.mlp_ratio);
    read_field(j, "model", "mcp_latent_dim", c.model.mcp_latent_dim);
    read_field(j, "model", "reduction", c.model.reduction);
    read_field(j, "model", "mcp_eps", c.model.mcp_eps);
    read_field(j, "model", "mcp_literal_masks", c.model.mcp_literal_masks);
    read_field(j, "model", "msp_dropout", c.model.msp_dropout);

    read_field(j, "train", "epochs", c.train.epochs);
    read_field(j, "train", "lr", c.train.lr);
    read_field(j, "train", "weight_decay", c.train.weight_decay);
    read_field(j, "train", "batch_identities", c.train.batch_identities);
    read_field(j, "train", "visible_per_identity", c.train.visible_per_identity);
    read_field(j, "train", "infrared_per_identity", c.train.infrared_per_identity);
    read_field(j, "train", "alpha", c.train.weights.alpha);
    read_field(j, "train", "beta", c.train.weights.beta);
    read_field(j, "train", "mu", c.train.weights.mu);
    read_field(j, "train", "margin", c.train.weights.margin);
    read_field(j, "train", "tau", c.train.tau);
    read_field(j, "train", "ema_lambda", c.train.ema_lambda);
    read_field(j, "train", "seed", c.train.seed);
    read_field(j, "train", "triplet_within_modality", c.train.triplet_within_modality);
    read_field(j, "train", "cka_pre_neck", c.train.cka_pre_neck);
    read_field(j, "train", "merge_prompts_in_ema", c.train.merge_prompts_in_ema);
    read_field(j, "train", "af_from_max", c.train.af_from_max);
    if (j.contains("train") && j.at("train").contains("toggles")) {
        const json& t = j.at("train").at("toggles");
        auto flag = [&](const char* key, bool& out) {
            if (!t.contains(key)) return;
            if (!t.at(key).is_boolean())
                throw ConfigError(std::string("train.toggles.") + key + ": must be a boolean");
            out = t.at(key).get<bool>();
        };
        flag("mcp", c.train.toggles.mcp);
        flag("msp", c.train.toggles.msp);
        flag("cka", c.train.toggles.cka);
        flag("ema", c.train.toggles.ema);
    }

    read_field(j, "output", "dir", c.out_dir);
    read_field(j, "output", "export_stream", c.export_stream_files);
    read_field(j, "output", "heatmap_samples", c.heatmap_samples);

    read_field(j, "ablation", "seeds", c.ablation_seeds);
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + std::string(e.what()));
    }
    return from_json(j);
}

json ExperimentConfig::to_json() const {
    json j;
    j["stream"] = {{"stages", stages},
                   {"identities_per_stage", identities_per_stage},
                   {"samples_per_identity_per_modality", samples_per_identity_per_modality},
                   {"noise_amp", noise_amp},
                   {"style_strength", style_strength},
                   {"ir_channel_bound", ir_channel_bound},
                   {"master_seed", master_seed}};
    j["model"] = {{"height", model.backbone.height},
                  {"width", model.backbone.width},
                  {"channels", model.backbone.channels},
                  {"patch", model.backbone.patch},
                  {"embed_dim", model.backbone.embed_dim},
                  {"blocks", model.backbone.blocks},
                  {"heads", model.backbone.heads},
                  {"mlp_ratio", model.backbone.mlp_ratio},
                  {"mcp_latent_dim", model.mcp_latent_dim},
                  {"reduction", model.reduction},
                  {"mcp_eps", model.mcp_eps},
                  {"mcp_literal_masks", model.mcp_literal_masks},
                  {"msp_dropout", model.msp_dropout}};
    j["train"] = {{"epochs", train.epochs},
                  {"lr", train.lr},
                  {"weight_decay", train.weight_decay},
                  {"batch_identities", train.batch_identities},
                  {"visible_per_identity", train.visible_per_identity},
                  {"infrared_per_identity", train.infrared_per_identity},
                  {"alpha", train.weights.alpha},
                  {"beta", train.weights.beta},
                  {"mu", train.weights.mu},
                  {"margin", train.weights.margin},
                  {"tau", train.tau},
                  {"ema_lambda", train.ema_lambda},
                  {"seed", train.seed},
                  {"toggles",
                   {{"mcp", train.toggles.mcp},
                    {"msp", train.toggles.msp},
                    {"cka", train.toggles.cka},
                    {"ema", train.toggles.ema}}},
                  {"triplet_within_modality", train.triplet_within_modality},
                  {"cka_pre_neck", train.cka_pre_neck},
                  {"merge_prompts_in_ema", train.merge_prompts_in_ema},
                  {"af_from_max", train.af_from_max}};
    j["output"] = {{"dir", out_dir},
                   {"export_stream", export_stream_files},
                   {"heatmap_samples", heatmap_samples}};
    j["ablation"] = {{"seeds", ablation_seeds}};
    return j;
}

std::string ExperimentConfig::config_hash() const {
    // identity of the experiment: data, model and schedule; output layout and
    // ablation seeds do not change what a single run computes
    json j = to_json();
    j.erase("output");
    j.erase("ablation");
    std::ostringstream os;
    os << std::hex << fnv1a64(j.dump());
    return os.str();
}

void ExperimentConfig::apply_override(const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override '" + assignment + "' must have the form path=value");
    std::string path = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);

    json j = to_json();
    std::string pointer = "/";
    for (char c : path) pointer += (c == '.') ? '/' : c;
    json::json_pointer ptr(pointer);
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value;  // bare word -> string
    }
    try {
        if (!j.contains(ptr)) throw ConfigError("override targets unknown field '" + path + "'");
        j[ptr] = parsed;
    } catch (const json::exception&) {
        throw ConfigError("override targets unknown field '" + path + "'");
    }
    *this = from_json(j);
}

void ExperimentConfig::validate() const {
    check(stages >= 1, "stream.stages", "must be >= 1");
    check(identities_per_stage >= 2, "stream.identities_per_stage", "must be >= 2");
    check(samples_per_identity_per_modality >= 2,
          "stream.samples_per_identity_per_modality", "must be >= 2");
    check(noise_amp >= 0.0, "stream.noise_amp", "must be >= 0");
    check(style_strength >= 0.0, "stream.style_strength", "must be >= 0");
    try {
        model.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
    try {
        train.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("train: ") + e.what());
    }
    try {
        stage_template().validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("stream: ") + e.what());
    }
    check(heatmap_samples >= 1, "output.heatmap_samples", "must be >= 1");
    check(!ablation_seeds.empty(), "ablation.seeds", "must not be empty");
}

StageConfig ExperimentConfig::stage_template() const {
    StageConfig sc;
    sc.num_identities = identities_per_stage;
    sc.samples_per_identity_per_modality = samples_per_identity_per_modality;
    sc.height = model.backbone.height;
    sc.width = model.backbone.width;
    sc.channels = model.backbone.channels;
    sc.patch_size = model.backbone.patch;
    sc.noise_amp = noise_amp;
    sc.style_strength = style_strength;
    sc.ir_channel_bound = ir_channel_bound;
    return sc;
}

}  // namespace ckda
