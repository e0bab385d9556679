#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#ifndef CKDA_CLI_PATH
#define CKDA_CLI_PATH "ckda"
#endif

namespace {

namespace fs = std::filesystem;

int run_cli(const std::string& args) {
    std::string cmd = std::string(CKDA_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

void write_tiny_config(const fs::path& path, int stages, int epochs) {
    nlohmann::json j = {
        {"stream",
         {{"stages", stages}, {"identities_per_stage", 3},
          {"samples_per_identity_per_modality", 4}}},
        {"model",
         {{"height", 8}, {"width", 8}, {"patch", 4}, {"embed_dim", 16}, {"blocks", 1},
          {"heads", 2}}},
        {"train",
         {{"epochs", epochs}, {"batch_identities", 2}, {"visible_per_identity", 2},
          {"infrared_per_identity", 2}, {"seed", 3}}},
        {"output", {{"dir", "unused"}, {"heatmap_samples", 2}}},
        {"ablation", {{"seeds", {1}}}}};
    std::ofstream f(path);
    f << j.dump(2);
}

}  // namespace

TEST_CASE("run succeeds on a minimal single-stage config with zero epochs") {
    fs::path cfg = fs::temp_directory_path() / "ckda_cli_min.json";
    write_tiny_config(cfg, 1, 0);
    fs::path out = fresh_dir("ckda_cli_run_min");
    int rc = run_cli("run --config " + cfg.string() + " --out " + out.string());
    CHECK(rc == 0);
    CHECK(fs::exists(out / "metrics.json"));
    CHECK(fs::exists(out / "config_resolved.json"));
    CHECK(fs::exists(out / "train_log.jsonl"));
    nlohmann::json metrics = nlohmann::json::parse(slurp(out / "metrics.json"));
    CHECK(metrics.at("stages") == 1);
    CHECK(metrics.at("matrix").size() == 1);
    CHECK(metrics.at("matrix")[0].size() == 1);
    CHECK(metrics.at("average_forgetting").is_null());
    fs::remove_all(out);
    fs::remove(cfg);
}

TEST_CASE("malformed configs exit nonzero without creating outputs") {
    fs::path cfg = fs::temp_directory_path() / "ckda_cli_bad.json";
    {
        std::ofstream f(cfg);
        f << "{ this is not json";
    }
    fs::path out = fresh_dir("ckda_cli_bad_out");
    int rc = run_cli("run --config " + cfg.string() + " --out " + out.string());
    CHECK(rc != 0);
    CHECK(!fs::exists(out));
    fs::remove(cfg);

    fs::path cfg2 = fs::temp_directory_path() / "ckda_cli_bad2.json";
    {
        std::ofstream f(cfg2);
        f << R"({"stream": {"identities_per_stage": 1}})";
    }
    rc = run_cli("run --config " + cfg2.string() + " --out " + out.string());
    CHECK(rc != 0);
    CHECK(!fs::exists(out));
    fs::remove(cfg2);
}

TEST_CASE("identical config and seed reproduce the metrics report byte for byte") {
    fs::path cfg = fs::temp_directory_path() / "ckda_cli_det.json";
    write_tiny_config(cfg, 2, 1);
    fs::path out1 = fresh_dir("ckda_cli_det1");
    fs::path out2 = fresh_dir("ckda_cli_det2");
    REQUIRE(run_cli("run --config " + cfg.string() + " --out " + out1.string()) == 0);
    REQUIRE(run_cli("run --config " + cfg.string() + " --out " + out2.string()) == 0);
    CHECK(slurp(out1 / "metrics.json") == slurp(out2 / "metrics.json"));
    CHECK(slurp(out1 / "train_log.jsonl") == slurp(out2 / "train_log.jsonl"));

    SUBCASE("reruns into the same directory are refused") {
        int rc = run_cli("run --config " + cfg.string() + " --out " + out1.string());
        CHECK(rc != 0);
    }

    SUBCASE("eval-only reproduces the final row from a checkpoint") {
        int rc = run_cli("eval-only --config " + cfg.string() + " --checkpoint " +
                         (out1 / "checkpoints" / "stage_2.json").string() + " --out " +
                         (out1 / "eval").string());
        CHECK(rc == 0);
        nlohmann::json metrics = nlohmann::json::parse(slurp(out1 / "metrics.json"));
        nlohmann::json eval = nlohmann::json::parse(slurp(out1 / "eval" / "eval_only.json"));
        CHECK(eval.at("rows")[0].at("mAP").get<double>() ==
              metrics.at("matrix")[1][0].at("mAP").get<double>());
    }

    SUBCASE("report-heatmaps writes images and a summary") {
        fs::path heat = fresh_dir("ckda_cli_heat");
        int rc = run_cli("report-heatmaps --config " + cfg.string() + " --checkpoint " +
                         (out1 / "checkpoints" / "stage_2.json").string() + " --out " +
                         heat.string() + " --samples 2");
        CHECK(rc == 0);
        CHECK(fs::exists(heat / "summary.json"));
        CHECK(fs::exists(heat / "records.jsonl"));
        bool any_pgm = false;
        for (const auto& e : fs::directory_iterator(heat))
            if (e.path().extension() == ".pgm") any_pgm = true;
        CHECK(any_pgm);
        fs::remove_all(heat);
    }

    fs::remove_all(out1);
    fs::remove_all(out2);
    fs::remove(cfg);
}
