#include "doctest.h"

#include "test_util.hpp"

#include "ckda/model.hpp"

using namespace ckda;
using testutil::random_tensor;
using testutil::tiny_model_config;

TEST_CASE("patchify shapes and losslessness") {
    SUBCASE("32x32x3 with patch 8 gives 16 tokens of 192") {
        Rng rng(1);
        Tensor img = random_tensor({32, 32, 3}, rng);
        Tensor tokens = patchify_image(img, 8);
        CHECK(tokens.shape() == Shape{16, 192});
        Tensor back = depatchify_tokens(tokens, 32, 32, 3, 8);
        CHECK(tensors_equal(back, img));
    }
    SUBCASE("constant image gives constant tokens") {
        Tensor img({8, 8, 3}, 0.77);
        Tensor tokens = patchify_image(img, 4);
        for (int64_t i = 0; i < tokens.numel(); ++i) CHECK(tokens[i] == 0.77);
    }
    SUBCASE("indivisible geometry is a configuration error") {
        Tensor img({9, 8, 3});
        CHECK_THROWS_AS(patchify_image(img, 4), ConfigError);
    }
}

TEST_CASE("encode is deterministic in eval mode with the configured width") {
    Model model(tiny_model_config(), 42);
    Rng rng(2);
    Tensor img = random_tensor({8, 8, 3}, rng, 0.3);
    ForwardToggles toggles{true, true};
    FeaturePair a = model.encode(img, Modality::visible, toggles);
    FeaturePair b = model.encode(img, Modality::visible, toggles);
    CHECK(tensors_equal(a.z_pre, b.z_pre));
    CHECK(tensors_equal(a.z, b.z));
    CHECK(a.z_pre.shape() == Shape{16});
    CHECK(a.z.shape() == Shape{16});
}

TEST_CASE("encoder outputs stay finite under input fuzzing") {
    Model model(tiny_model_config(), 7);
    Rng rng(3);
    ForwardToggles toggles{true, true};
    NoGradGuard ng;
    Rng drop(4);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor batch = random_tensor({100, 8, 8, 3}, rng, 2.0);
        BatchForward fwd = model.forward_batch(batch, 50, toggles, false, drop);
        for (int64_t i = 0; i < fwd.z->value.numel(); ++i) {
            CHECK(std::isfinite(fwd.z->value[i]));
            CHECK(std::isfinite(fwd.z_pre->value[i]));
        }
    }
}

TEST_CASE("classifier heads") {
    Model model(tiny_model_config(), 11);
    Rng rng(5);
    model.add_head(6, rng);

    SUBCASE("zero weights and bias give all-zero logits") {
        Model zero_model(tiny_model_config(), 12);
        Rng r2(6);
        zero_model.add_head(4, r2);
        ParamMap map = zero_model.collect();
        for (ParamRef& p : map.params)
            if (p.name.rfind("heads.0", 0) == 0) p.var->value.fill(0.0);
        Var z = make_const(random_tensor({3, 16}, rng));
        Var logits = zero_model.classify(z, 1);
        CHECK(logits->value.shape() == Shape{3, 4});
        CHECK(max_abs(logits->value) == 0.0);
    }

    SUBCASE("logits match an independent matrix product oracle") {
        Var z = make_const(random_tensor({5, 16}, rng));
        Var logits = model.classify(z, 1);
        CHECK(logits->value.shape() == Shape{5, 6});
        ParamMap map = model.collect();
        const Tensor *w = nullptr, *b = nullptr;
        for (const ParamRef& p : map.params) {
            if (p.name == "heads.0.w") w = &p.var->value;
            if (p.name == "heads.0.b") b = &p.var->value;
        }
        REQUIRE(w);
        for (int i = 0; i < 5; ++i)
            for (int o = 0; o < 6; ++o) {
                double s = (*b)[o];
                for (int k = 0; k < 16; ++k) s += z->value.at2(i, k) * w->at2(k, o);
                CHECK(std::fabs(logits->value.at2(i, o) - s) < 1e-10);
            }
    }

    SUBCASE("missing head is a state error") {
        Var z = make_const(random_tensor({2, 16}, rng));
        CHECK_THROWS_AS(model.classify(z, 2), StateError);
    }
}

TEST_CASE("ema merge endpoints, interpolation and head handling") {
    ModelConfig cfg = tiny_model_config();
    Model old_state(cfg, 100);
    Model new_state(cfg, 200);
    Rng rng(7);
    old_state.add_head(3, rng);
    new_state.add_head(3, rng);
    new_state.add_head(5, rng);

    auto get = [](Model& m, const std::string& name) -> Tensor {
        ParamMap map = m.collect();
        for (const ParamRef& p : map.params)
            if (p.name == name) return p.var->value;
        throw std::runtime_error("missing " + name);
    };

    SUBCASE("lambda 1 returns the old parameters exactly") {
        auto merged = ema_merge(old_state, new_state, 1.0);
        CHECK(tensors_equal(get(*merged, "vit.patch_embed.w"),
                            get(old_state, "vit.patch_embed.w")));
    }
    SUBCASE("lambda 0 returns the new parameters exactly") {
        auto merged = ema_merge(old_state, new_state, 0.0);
        CHECK(tensors_equal(get(*merged, "vit.patch_embed.w"),
                            get(new_state, "vit.patch_embed.w")));
    }
    SUBCASE("midpoint interpolates elementwise") {
        ParamMap om = old_state.collect();
        ParamMap nm = new_state.collect();
        om.params[0].var->value.fill(2.0);
        for (ParamRef& p : nm.params)
            if (p.name == om.params[0].name) p.var->value.fill(4.0);
        auto merged = ema_merge(old_state, new_state, 0.5);
        Tensor got = get(*merged, om.params[0].name);
        for (int64_t i = 0; i < got.numel(); ++i) CHECK(got[i] == doctest::Approx(3.0));
    }
    SUBCASE("every merged value lies between its endpoints across lambdas") {
        for (double lambda : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            auto merged = ema_merge(old_state, new_state, lambda);
            ParamMap om = old_state.collect();
            ParamMap nm = new_state.collect();
            ParamMap mm = merged->collect();
            for (size_t i = 0; i < mm.params.size(); ++i) {
                if (mm.params[i].name.rfind("heads.", 0) == 0) continue;
                const Tensor& o = om.params[i].var->value;
                // old model lacks the second head, so align by name
                if (om.params[i].name != mm.params[i].name) continue;
                const Tensor& n = nm.params[i].var->value;
                const Tensor& m = mm.params[i].var->value;
                for (int64_t j = 0; j < m.numel(); ++j) {
                    double lo = std::min(o[j], n[j]), hi = std::max(o[j], n[j]);
                    CHECK(m[j] >= lo - 1e-15);
                    CHECK(m[j] <= hi + 1e-15);
                }
            }
        }
    }
    SUBCASE("heads come from the new state, not the blend") {
        auto merged = ema_merge(old_state, new_state, 1.0);
        CHECK(tensors_equal(get(*merged, "heads.0.w"), get(new_state, "heads.0.w")));
        CHECK(merged->head_count() == 2);
    }
    SUBCASE("invalid lambda is a configuration error") {
        CHECK_THROWS_AS(ema_merge(old_state, new_state, 1.5), ConfigError);
    }
    SUBCASE("prompt parameters can be excluded from the merge") {
        auto merged = ema_merge(old_state, new_state, 1.0, /*merge_prompts=*/false);
        CHECK(tensors_equal(get(*merged, "mcp.embed.w"), get(new_state, "mcp.embed.w")));
        CHECK(tensors_equal(get(*merged, "vit.patch_embed.w"),
                            get(old_state, "vit.patch_embed.w")));
    }
}

TEST_CASE("clone detaches parameter storage") {
    Model model(tiny_model_config(), 31);
    Rng rng(8);
    model.add_head(4, rng);
    auto copy = model.clone();
    CHECK(testutil::param_fingerprint(model) == testutil::param_fingerprint(*copy));
    ParamMap map = model.collect();
    map.params[0].var->value.fill(123.0);
    CHECK(testutil::param_fingerprint(model) != testutil::param_fingerprint(*copy));
}
