// Experiment runner: stream generation, stage-sequential training, metric
// reports, ablation grids and prompt heatmap diagnostics.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "ckda/checkpoint.hpp"
#include "ckda/config.hpp"
#include "ckda/report.hpp"
#include "ckda/synth_data.hpp"
#include "ckda/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ckda;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct CommonArgs {
    std::string config_path;
    std::string out_override;
    std::vector<std::string> overrides;
};

ExperimentConfig load_config(const CommonArgs& args) {
    ExperimentConfig cfg = ExperimentConfig::load(args.config_path);
    for (const std::string& o : args.overrides) cfg.apply_override(o);
    if (!args.out_override.empty()) cfg.out_dir = args.out_override;
    cfg.validate();
    return cfg;
}

void prepare_run_dir(const fs::path& dir) {
    if (fs::exists(dir) && !fs::is_empty(dir))
        throw StateError("output directory " + dir.string() +
                         " already exists and is not empty; choose a fresh path");
    fs::create_directories(dir);
}

void archive_config(const ExperimentConfig& cfg, const std::string& source_path,
                    const fs::path& dir) {
    if (!source_path.empty()) {
        std::ifstream src(source_path, std::ios::binary);
        std::ofstream dst(dir / "config_input.json", std::ios::binary);
        dst << src.rdbuf();
    }
    std::ofstream resolved(dir / "config_resolved.json");
    resolved << cfg.to_json().dump(2) << "\n";
}

// One full training run into `dir`; writes checkpoints, the training log,
// and the metrics report.
RunResult run_once(const ExperimentConfig& cfg, const fs::path& dir) {
    std::vector<StageDataset> stream =
        make_stream(cfg.stages, cfg.stage_template(), cfg.master_seed);
    if (cfg.export_stream_files) export_stream(stream, (dir / "stream").string());

    fs::create_directories(dir / "checkpoints");
    std::ofstream train_log(dir / "train_log.jsonl");

    Model model(cfg.model, cfg.train.seed);
    StreamHooks hooks;
    hooks.on_step = [&](const StepLog& l) { train_log << step_log_json(l).dump() << "\n"; };
    hooks.on_stage_end = [&](int stage, Model& m, const PrototypeBank& bank) {
        save_checkpoint((dir / "checkpoints" / ("stage_" + std::to_string(stage) + ".json"))
                            .string(),
                        m, bank, cfg.config_hash());
    };

    RunResult result = run_stream(model, stream, cfg.train, &hooks);

    std::ofstream metrics(dir / "metrics.json");
    metrics << metrics_report(result.metrics, cfg, cfg.train.seed).dump(2) << "\n";
    std::ofstream table(dir / "metrics.txt");
    table << metrics_table(result.metrics);
    return result;
}

int cmd_run(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    fs::path dir(cfg.out_dir);
    prepare_run_dir(dir);
    try {
        archive_config(cfg, args.config_path, dir);
        RunResult result = run_once(cfg, dir);
        std::cout << metrics_table(result.metrics);
        std::cout << "outputs written to " << dir.string() << "\n";
        return 0;
    } catch (const std::exception& e) {
        std::ofstream err(dir / "error.log");
        err << e.what() << "\n";
        std::cerr << "run failed (partial outputs in " << dir.string() << "): " << e.what()
                  << "\n";
        return kExitRuntime;
    }
}

struct AblationRow {
    std::string name;
    Toggles toggles;
};

std::vector<AblationRow> full_grid() {
    std::vector<AblationRow> rows;
    for (int mask = 0; mask < 8; ++mask) {
        Toggles t;
        t.mcp = mask & 1;
        t.msp = mask & 2;
        t.cka = mask & 4;
        std::string name = "base";
        if (t.mcp) name += "+mcp";
        if (t.msp) name += "+msp";
        if (t.cka) name += "+cka";
        rows.push_back({name, t});
    }
    return rows;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double spread_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

int cmd_ablate(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    fs::path dir(cfg.out_dir);
    prepare_run_dir(dir);
    archive_config(cfg, args.config_path, dir);

    std::vector<AblationRow> rows = full_grid();
    json report = json::array();
    bool any_failed = false;

    for (const AblationRow& row : rows) {
        std::vector<double> maps, r1s, af_maps;
        json seeds_json = json::array();
        for (uint64_t seed : cfg.ablation_seeds) {
            ExperimentConfig run_cfg = cfg;
            run_cfg.train.toggles.mcp = row.toggles.mcp;
            run_cfg.train.toggles.msp = row.toggles.msp;
            run_cfg.train.toggles.cka = row.toggles.cka;
            run_cfg.train.seed = seed;
            fs::path run_dir = dir / "rows" / row.name / ("seed_" + std::to_string(seed));
            fs::create_directories(run_dir);
            try {
                RunResult r = run_once(run_cfg, run_dir);
                double fmap = r.metrics.final_average(true);
                double fr1 = r.metrics.final_average(false);
                maps.push_back(fmap);
                r1s.push_back(fr1);
                json entry = {{"seed", seed}, {"final_mAP", fmap}, {"final_R1", fr1}};
                if (cfg.stages >= 2) {
                    double af = average_forgetting(r.metrics, MetricSelector::map);
                    af_maps.push_back(af);
                    entry["AF_mAP"] = af;
                }
                seeds_json.push_back(std::move(entry));
            } catch (const std::exception& e) {
                any_failed = true;
                seeds_json.push_back({{"seed", seed}, {"error", e.what()}});
                std::cerr << "ablation row " << row.name << " seed " << seed
                          << " failed: " << e.what() << "\n";
            }
        }
        json rj = {{"row", row.name},
                   {"toggles",
                    {{"mcp", row.toggles.mcp}, {"msp", row.toggles.msp}, {"cka", row.toggles.cka}}},
                   {"final_mAP_mean", mean_of(maps)},
                   {"final_mAP_spread", spread_of(maps)},
                   {"final_R1_mean", mean_of(r1s)},
                   {"final_R1_spread", spread_of(r1s)},
                   {"runs", std::move(seeds_json)}};
        if (!af_maps.empty()) {
            rj["AF_mAP_mean"] = mean_of(af_maps);
            rj["AF_mAP_spread"] = spread_of(af_maps);
        }
        report.push_back(std::move(rj));
        std::cout << row.name << ": mAP " << mean_of(maps) << " +- " << spread_of(maps)
                  << ", R1 " << mean_of(r1s);
        if (!af_maps.empty()) std::cout << ", AF(mAP) " << mean_of(af_maps);
        std::cout << "\n";
    }

    std::ofstream out(dir / "ablation.json");
    out << report.dump(2) << "\n";
    std::ofstream table(dir / "ablation.txt");
    table << "row                 mAP_mean  mAP_spread  R1_mean   AF(mAP)_mean\n";
    for (const auto& rj : report) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-18s %9.4f %11.4f %8.4f %13.4f\n",
                      rj.at("row").get<std::string>().c_str(),
                      rj.at("final_mAP_mean").get<double>(),
                      rj.at("final_mAP_spread").get<double>(),
                      rj.at("final_R1_mean").get<double>(),
                      rj.contains("AF_mAP_mean") ? rj.at("AF_mAP_mean").get<double>() : 0.0);
        table << buf;
    }
    return any_failed ? kExitRuntime : 0;
}

int cmd_report_heatmaps(const CommonArgs& args, const std::string& checkpoint_path,
                        int samples) {
    ExperimentConfig cfg = load_config(args);
    LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
    if (ckpt.config_hash != cfg.config_hash())
        throw StateError("checkpoint was produced under config hash " + ckpt.config_hash +
                         " but the given config hashes to " + cfg.config_hash());
    std::vector<StageDataset> stream =
        make_stream(cfg.stages, cfg.stage_template(), cfg.master_seed);
    fs::path dir(cfg.out_dir);
    prepare_run_dir(dir);
    HeatmapSummary summary =
        report_heatmaps(*ckpt.model, stream, cfg.train.forward_toggles(),
                        samples > 0 ? samples : cfg.heatmap_samples, dir.string());
    std::cout << "samples: " << summary.samples << "\n"
              << "common prompt in-silhouette energy fraction:   "
              << summary.common_in_fraction << "\n"
              << "specific prompt in-silhouette energy fraction: "
              << summary.specific_in_fraction << "\n"
              << "prompted image in-silhouette energy fraction:  "
              << summary.prompted_in_fraction << "\n";
    return 0;
}

int cmd_eval_only(const CommonArgs& args, const std::string& checkpoint_path) {
    ExperimentConfig cfg = load_config(args);
    LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
    if (ckpt.config_hash != cfg.config_hash())
        throw StateError("checkpoint/config mismatch: hashes " + ckpt.config_hash + " vs " +
                         cfg.config_hash());
    std::vector<StageDataset> stream =
        make_stream(cfg.stages, cfg.stage_template(), cfg.master_seed);
    const int trained = ckpt.model->stage_index;
    if (trained < 1) throw StateError("checkpoint has no trained stages");

    json rows = json::array();
    double sum_map = 0.0, sum_r1 = 0.0;
    for (int i = 1; i <= trained; ++i) {
        MetricRecord r = evaluate_stage(*ckpt.model, stream[static_cast<size_t>(i - 1)],
                                        cfg.train.forward_toggles());
        rows.push_back({{"stage", i}, {"mAP", r.map}, {"R1", r.r1}});
        sum_map += r.map;
        sum_r1 += r.r1;
        std::cout << "stage " << i << ": mAP " << r.map << " R1 " << r.r1 << "\n";
    }
    std::cout << "average: mAP " << sum_map / trained << " R1 " << sum_r1 / trained << "\n";
    json out = {{"version", kVersionString},
                {"config_hash", cfg.config_hash()},
                {"checkpoint", checkpoint_path},
                {"rows", rows},
                {"average", {{"mAP", sum_map / trained}, {"R1", sum_r1 / trained}}}};
    fs::path dir(cfg.out_dir);
    fs::create_directories(dir);
    std::ofstream f(dir / "eval_only.json");
    f << out.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CKDA lifelong visible-infrared re-identification experiments"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string checkpoint_path;
    int heatmap_samples = 0;

    auto add_common = [&](CLI::App* cmd, bool config_required = true) {
        cmd->add_option("-c,--config", args.config_path, "experiment config (JSON)")
            ->required(config_required);
        cmd->add_option("-o,--out", args.out_override, "output directory override");
        cmd->add_option("--set", args.overrides,
                        "override any scalar config field, e.g. --set train.epochs=5");
    };

    CLI::App* run = app.add_subcommand("run", "generate a stream, train all stages, report");
    add_common(run);
    CLI::App* ablate = app.add_subcommand("ablate", "module on/off grid over shared seeds");
    add_common(ablate);
    CLI::App* heat =
        app.add_subcommand("report-heatmaps", "prompt magnitude heatmaps for a checkpoint");
    add_common(heat);
    heat->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    heat->add_option("--samples", heatmap_samples, "samples per stage");
    CLI::App* eval_only = app.add_subcommand("eval-only", "re-evaluate a checkpoint");
    add_common(eval_only);
    eval_only->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(args);
        if (ablate->parsed()) return cmd_ablate(args);
        if (heat->parsed()) return cmd_report_heatmaps(args, checkpoint_path, heatmap_samples);
        if (eval_only->parsed()) return cmd_eval_only(args, checkpoint_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}
