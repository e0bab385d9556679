#pragma once

#include "json.hpp"

#include "ckda/config.hpp"
#include "ckda/trainer.hpp"

namespace ckda {

// Self-describing metrics report: full matrix, per-row averages, final
// averages and AF, plus config hash / seed / version.
nlohmann::json metrics_report(const MetricsMatrix& m, const ExperimentConfig& cfg,
                              uint64_t seed);
std::string metrics_table(const MetricsMatrix& m);

nlohmann::json step_log_json(const StepLog& log);

// Prompt heatmap diagnostics: per held-out sample, spatial magnitude images
// of the common prompt, the specific prompt and the prompted image, plus
// in/out-silhouette energy statistics.
struct HeatmapSummary {
    double common_in_fraction = 0.0;
    double specific_in_fraction = 0.0;
    double prompted_in_fraction = 0.0;
    int samples = 0;
};

HeatmapSummary report_heatmaps(Model& model, const std::vector<StageDataset>& stream,
                               const ForwardToggles& toggles, int samples_per_stage,
                               const std::string& out_dir);

}  // namespace ckda
