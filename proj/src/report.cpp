#include "ckda/report.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ckda/image_io.hpp"

namespace ckda {

using nlohmann::json;

json metrics_report(const MetricsMatrix& m, const ExperimentConfig& cfg, uint64_t seed) {
    json matrix = json::array();
    for (int t = 1; t <= m.stages; ++t) {
        json row = json::array();
        for (int i = 1; i <= t; ++i) {
            const MetricRecord& r = m.at(t, i);
            row.push_back({{"stage", i}, {"mAP", r.map}, {"R1", r.r1}});
        }
        matrix.push_back(std::move(row));
    }
    json j;
    j["version"] = kVersionString;
    j["config_hash"] = cfg.config_hash();
    j["seed"] = seed;
    j["stages"] = m.stages;
    j["matrix"] = std::move(matrix);
    j["final_average"] = {{"mAP", m.final_average(true)}, {"R1", m.final_average(false)}};
    if (m.stages >= 2) {
        j["average_forgetting"] = {
            {"mAP", average_forgetting(m, MetricSelector::map, cfg.train.af_from_max)},
            {"R1", average_forgetting(m, MetricSelector::r1, cfg.train.af_from_max)}};
    } else {
        j["average_forgetting"] = nullptr;
    }
    return j;
}

std::string metrics_table(const MetricsMatrix& m) {
    std::ostringstream os;
    os << "stage |";
    for (int i = 1; i <= m.stages; ++i) os << "  D" << i << " mAP   R1 |";
    os << "\n";
    for (int t = 1; t <= m.stages; ++t) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%5d |", t);
        os << buf;
        for (int i = 1; i <= t; ++i) {
            const MetricRecord& r = m.at(t, i);
            std::snprintf(buf, sizeof(buf), " %7.4f %5.3f |", r.map, r.r1);
            os << buf;
        }
        os << "\n";
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "final average mAP=%.4f R1=%.4f\n", m.final_average(true),
                  m.final_average(false));
    os << buf;
    if (m.stages >= 2) {
        std::snprintf(buf, sizeof(buf), "average forgetting mAP=%.4f R1=%.4f\n",
                      average_forgetting(m, MetricSelector::map),
                      average_forgetting(m, MetricSelector::r1));
        os << buf;
    }
    return os.str();
}

json step_log_json(const StepLog& l) {
    return json{{"stage", l.stage}, {"epoch", l.epoch},  {"step", l.step},
                {"lr", l.lr},       {"loss_ce", l.ce},   {"loss_trip", l.trip},
                {"loss_p", l.lp},   {"loss_inter", l.inter}, {"loss_intra", l.intra},
                {"loss_total", l.total}};
}

namespace {

Tensor magnitude_map(const Tensor& t) {
    const int h = t.dim(0), w = t.dim(1), c = t.dim(2);
    Tensor mag({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int ch = 0; ch < c; ++ch) s += std::fabs(t.at3(y, x, ch));
            mag.at2(y, x) = s / c;
        }
    return mag;
}

struct Energy {
    double mean_inside = 0.0, mean_outside = 0.0, in_fraction = 0.0;
};

Energy energy_stats(const Tensor& mag, const Tensor& mask) {
    Energy e;
    double sum_in = 0.0, sum_out = 0.0;
    int64_t n_in = 0, n_out = 0;
    for (int64_t i = 0; i < mag.numel(); ++i) {
        if (mask[i] > 0.5) {
            sum_in += mag[i];
            ++n_in;
        } else {
            sum_out += mag[i];
            ++n_out;
        }
    }
    if (n_in) e.mean_inside = sum_in / static_cast<double>(n_in);
    if (n_out) e.mean_outside = sum_out / static_cast<double>(n_out);
    double total = sum_in + sum_out;
    e.in_fraction = total > 0.0 ? sum_in / total : 0.0;
    return e;
}

void write_heatmap(const std::string& path, const Tensor& mag) {
    Tensor scaled = mag;
    double mx = max_abs(scaled);
    if (mx > 0.0)
        for (int64_t i = 0; i < scaled.numel(); ++i) scaled[i] /= mx;
    write_pgm(path, scaled);
}

}  // namespace

HeatmapSummary report_heatmaps(Model& model, const std::vector<StageDataset>& stream,
                               const ForwardToggles& toggles, int samples_per_stage,
                               const std::string& out_dir) {
    if (!toggles.mcp && !toggles.msp)
        throw StateError("report_heatmaps: checkpoint has no prompt modules enabled");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::ofstream records(fs::path(out_dir) / "records.jsonl");
    if (!records) throw StateError("cannot open heatmap records file in " + out_dir);

    NoGradGuard ng;
    Rng dummy(0);
    HeatmapSummary summary;
    double common_sum = 0.0, specific_sum = 0.0, prompted_sum = 0.0;

    for (const StageDataset& ds : stream) {
        if (ds.stage_index > model.stage_index) break;  // untrained stages carry no prompts yet
        std::vector<const Sample*> chosen;
        for (size_t i = 0; i < ds.query.size() && static_cast<int>(chosen.size()) <
                                                      (samples_per_stage + 1) / 2;
             ++i)
            chosen.push_back(&ds.query[i]);
        for (size_t i = 0; i < ds.gallery.size() &&
                           static_cast<int>(chosen.size()) < samples_per_stage;
             ++i)
            chosen.push_back(&ds.gallery[i]);

        for (size_t si = 0; si < chosen.size(); ++si) {
            const Sample& s = *chosen[si];
            const IdentitySpec* spec = nullptr;
            for (const IdentitySpec& cand : ds.identity_roster)
                if (cand.identity_id == s.identity) spec = &cand;
            if (!spec) throw StateError("report_heatmaps: sample identity missing from roster");
            Tensor mask = silhouette_mask(*spec, s.image.dim(0), s.image.dim(1));

            Tensor batch = s.image.reshaped({1, s.image.dim(0), s.image.dim(1), s.image.dim(2)});
            BatchForward fwd = model.forward_batch(
                batch, s.modality == Modality::visible ? 1 : 0, toggles, false, dummy);

            auto emit = [&](const char* kind, const Tensor& img, double& agg) {
                Tensor mag = magnitude_map(img);
                Energy e = energy_stats(mag, mask);
                std::string file = "s" + std::to_string(ds.stage_index) + "_sample" +
                                   std::to_string(si) + "_" + kind + ".pgm";
                write_heatmap((fs::path(out_dir) / file).string(), mag);
                records << json{{"stage", ds.stage_index},
                                {"sample_index", si},
                                {"identity", s.identity},
                                {"modality", modality_name(s.modality)},
                                {"kind", kind},
                                {"mean_abs_inside", e.mean_inside},
                                {"mean_abs_outside", e.mean_outside},
                                {"in_fraction", e.in_fraction},
                                {"file", file}}
                                .dump()
                        << "\n";
                agg += e.in_fraction;
            };

            const int h = s.image.dim(0), w = s.image.dim(1), c = s.image.dim(2);
            if (fwd.k_com) emit("kcom", fwd.k_com->value.reshaped({h, w, c}), common_sum);
            Var k_spe = fwd.k_spe_vis ? fwd.k_spe_vis : fwd.k_spe_ir;
            if (k_spe) emit("kspe", k_spe->value.reshaped({h, w, c}), specific_sum);
            emit("km", fwd.prompted->value.reshaped({h, w, c}), prompted_sum);
            ++summary.samples;
        }
    }
    if (summary.samples > 0) {
        summary.common_in_fraction = common_sum / summary.samples;
        summary.specific_in_fraction = specific_sum / summary.samples;
        summary.prompted_in_fraction = prompted_sum / summary.samples;
    }
    std::ofstream sum(fs::path(out_dir) / "summary.json");
    sum << json{{"samples", summary.samples},
                {"common_in_fraction", summary.common_in_fraction},
                {"specific_in_fraction", summary.specific_in_fraction},
                {"prompted_in_fraction", summary.prompted_in_fraction}}
               .dump(2)
        << "\n";
    return summary;
}

}  // namespace ckda
