#include "doctest.h"

#include "test_util.hpp"

#include "ckda/trainer.hpp"

using namespace ckda;
using testutil::param_fingerprint;
using testutil::tiny_model_config;
using testutil::tiny_stage_config;

namespace {

TrainConfig tiny_train_config() {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_identities = 2;
    cfg.visible_per_identity = 2;
    cfg.infrared_per_identity = 2;
    cfg.seed = 5;
    return cfg;
}

std::vector<StageDataset> tiny_stream(int stages, uint64_t seed = 21) {
    return make_stream(stages, tiny_stage_config(), seed);
}

}  // namespace

TEST_CASE("zero epochs leave parameters untouched and the log empty") {
    Model model(tiny_model_config(), 1);
    Rng rng(2);
    model.add_head(4, rng);
    auto stream = tiny_stream(1);
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 0;
    uint64_t before = param_fingerprint(model);
    auto log = train_stage(model, nullptr, stream[0], cfg);
    CHECK(log.empty());
    CHECK(param_fingerprint(model) == before);
}

TEST_CASE("stage one records only the base losses") {
    Model model(tiny_model_config(), 1);
    Rng rng(2);
    model.add_head(4, rng);
    auto stream = tiny_stream(1);
    auto log = train_stage(model, nullptr, stream[0], tiny_train_config());
    REQUIRE(!log.empty());
    for (const StepLog& l : log) {
        CHECK(l.lp == 0.0);
        CHECK(l.inter == 0.0);
        CHECK(l.intra == 0.0);
        CHECK(l.total == doctest::Approx(l.ce + l.trip).epsilon(1e-12));
    }
}

TEST_CASE("snapshot presence must match the stage index") {
    Model model(tiny_model_config(), 1);
    Rng rng(2);
    model.add_head(4, rng);
    auto stream = tiny_stream(2);
    StageSnapshot snap;
    snap.frozen = model.clone();
    CHECK_THROWS_AS(train_stage(model, &snap, stream[0], tiny_train_config()), StateError);
    CHECK_THROWS_AS(train_stage(model, nullptr, stream[1], tiny_train_config()), StateError);
}

TEST_CASE("unsatisfiable batch specs are configuration errors") {
    Model model(tiny_model_config(), 1);
    Rng rng(2);
    model.add_head(4, rng);
    auto stream = tiny_stream(1);
    TrainConfig cfg = tiny_train_config();
    cfg.batch_identities = 99;
    CHECK_THROWS_AS(train_stage(model, nullptr, stream[0], cfg), ConfigError);
    cfg = tiny_train_config();
    cfg.visible_per_identity = 50;
    CHECK_THROWS_AS(train_stage(model, nullptr, stream[0], cfg), ConfigError);
}

TEST_CASE("frozen snapshot parameters survive a stage byte for byte") {
    auto stream = tiny_stream(2);
    Model model(tiny_model_config(), 3);
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 1;
    Rng head_rng(4);
    model.add_head(4, head_rng);
    train_stage(model, nullptr, stream[0], cfg);
    model.stage_index = 1;

    StageSnapshot snap;
    snap.frozen = model.clone();
    snap.bank = extract_prototypes(model, stream[0], cfg.forward_toggles());
    uint64_t frozen_before = param_fingerprint(*snap.frozen);

    model.add_head(4, head_rng);
    train_stage(model, &snap, stream[1], cfg);
    CHECK(param_fingerprint(*snap.frozen) == frozen_before);
}

TEST_CASE("a full stream is deterministic given the seed") {
    auto run = [&] {
        auto stream = tiny_stream(2);
        Model model(tiny_model_config(), 9);
        TrainConfig cfg = tiny_train_config();
        cfg.epochs = 1;
        return run_stream(model, stream, cfg);
    };
    RunResult a = run();
    RunResult b = run();
    REQUIRE(a.metrics.stages == b.metrics.stages);
    for (int t = 1; t <= a.metrics.stages; ++t)
        for (int i = 1; i <= t; ++i) {
            CHECK(a.metrics.at(t, i).map == b.metrics.at(t, i).map);
            CHECK(a.metrics.at(t, i).r1 == b.metrics.at(t, i).r1);
        }
    REQUIRE(a.log.size() == b.log.size());
    for (size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].total == b.log[i].total);
}

TEST_CASE("single-stage stream gives a one-by-one matrix and no forgetting value") {
    auto stream = tiny_stream(1);
    Model model(tiny_model_config(), 9);
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 1;
    RunResult r = run_stream(model, stream, cfg);
    CHECK(r.metrics.stages == 1);
    CHECK(r.metrics.a.size() == 1);
    CHECK(r.metrics.a[0].size() == 1);
    CHECK(r.metrics.at(1, 1).map >= 0.0);
    CHECK(r.metrics.at(1, 1).map <= 1.0);
    CHECK_THROWS_AS(average_forgetting(r.metrics, MetricSelector::map), StateError);
    CHECK(r.banks.size() == 1);
}

TEST_CASE("metrics are defined exactly on the lower triangle") {
    auto stream = tiny_stream(3);
    Model model(tiny_model_config(), 10);
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 1;
    RunResult r = run_stream(model, stream, cfg);
    CHECK(r.metrics.stages == 3);
    for (int t = 1; t <= 3; ++t) {
        CHECK(static_cast<int>(r.metrics.a[static_cast<size_t>(t - 1)].size()) == t);
        for (int i = 1; i <= t; ++i) {
            const MetricRecord& rec = r.metrics.at(t, i);
            CHECK(rec.map >= 0.0);
            CHECK(rec.map <= 1.0);
            CHECK(rec.r1 >= 0.0);
            CHECK(rec.r1 <= 1.0);
        }
    }
}

TEST_CASE("training a stage never reads earlier stages' training samples") {
    auto stream = tiny_stream(3);
    Model model(tiny_model_config(), 11);
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 1;

    std::vector<uint64_t> at_start;
    bool ok = true;
    StreamHooks hooks;
    hooks.on_stage_start = [&](int) {
        at_start.clear();
        for (const StageDataset& ds : stream) at_start.push_back(ds.train_read_count());
    };
    hooks.on_stage_end = [&](int stage, Model&, const PrototypeBank&) {
        for (size_t j = 0; j < stream.size(); ++j) {
            bool touched = stream[j].train_read_count() != at_start[j];
            if (static_cast<int>(j + 1) < stage && touched) ok = false;
            if (static_cast<int>(j + 1) > stage && touched) ok = false;
        }
    };
    run_stream(model, stream, cfg, &hooks);
    CHECK(ok);
}

TEST_CASE("disabled lifelong machinery reduces to sequential fine-tuning step for step") {
    TrainConfig sft_cfg = tiny_train_config();
    sft_cfg.epochs = 1;
    sft_cfg.toggles = {false, false, false, false};

    // all toggles off with lambda zero but the merge path still active
    TrainConfig zero_lambda = sft_cfg;
    zero_lambda.toggles.ema = true;
    zero_lambda.ema_lambda = 0.0;

    std::vector<uint64_t> traj_a, traj_b;
    auto run = [&](const TrainConfig& cfg, std::vector<uint64_t>& traj) {
        auto stream = tiny_stream(3);
        Model model(tiny_model_config(), 13);
        StreamHooks hooks;
        hooks.on_stage_end = [&](int, Model& m, const PrototypeBank&) {
            traj.push_back(param_fingerprint(m));
        };
        return run_stream(model, stream, cfg, &hooks);
    };
    RunResult a = run(sft_cfg, traj_a);
    RunResult b = run(zero_lambda, traj_b);
    CHECK(traj_a == traj_b);  // identical per-stage parameter trajectories
    REQUIRE(a.log.size() == b.log.size());
    for (size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].total == b.log[i].total);
        CHECK(b.log[i].lp == 0.0);
        CHECK(b.log[i].inter == 0.0);
    }
}

TEST_CASE("anti-forgetting losses appear only from stage two onward") {
    auto stream = tiny_stream(2);
    Model model(tiny_model_config(), 14);
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 1;
    RunResult r = run_stream(model, stream, cfg);
    bool saw_stage2_terms = false;
    for (const StepLog& l : r.log) {
        if (l.stage == 1) {
            CHECK(l.lp == 0.0);
            CHECK(l.inter == 0.0);
        } else {
            if (l.lp != 0.0 || l.inter != 0.0) saw_stage2_terms = true;
            CHECK(l.total == doctest::Approx(l.ce + l.trip + cfg.weights.alpha * l.lp +
                                             cfg.weights.beta * (cfg.weights.mu * l.inter +
                                                                 (1 - cfg.weights.mu) * l.intra))
                                 .epsilon(1e-9));
        }
    }
    CHECK(saw_stage2_terms);
}

TEST_CASE("per-stage lambda sweep keeps merged parameters inside the endpoint interval") {
    for (double lambda : {0.0, 0.5, 1.0}) {
        auto stream = tiny_stream(2);
        Model model(tiny_model_config(), 17);
        TrainConfig cfg = tiny_train_config();
        cfg.epochs = 1;
        cfg.ema_lambda = lambda;
        RunResult r = run_stream(model, stream, cfg);
        CHECK(model.ema_lambda == lambda);
        CHECK(r.metrics.stages == 2);
    }
}
