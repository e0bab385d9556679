#include "doctest.h"

#include "test_util.hpp"

#include "ckda/cka.hpp"

using namespace ckda;
using testutil::random_tensor;

TEST_CASE("affinity is a row-stochastic softmax over cosine similarities") {
    SUBCASE("single prototype forces a column of ones") {
        Rng rng(1);
        Var f = make_leaf(random_tensor({4, 6}, rng));
        Var a = affinity(f, random_tensor({1, 6}, rng), 0.1);
        for (int64_t i = 0; i < a->value.numel(); ++i)
            CHECK(a->value[i] == doctest::Approx(1.0));
    }

    SUBCASE("aligned and orthogonal prototypes at tau 0.1") {
        Tensor f = Tensor::from({1, 2}, {1.0, 0.0});
        Tensor p = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
        Var a = affinity(make_const(f), p, 0.1);
        const double e10 = std::exp(10.0), e0 = 1.0;
        CHECK(a->value.at2(0, 0) == doctest::Approx(e10 / (e10 + e0)).epsilon(1e-9));
        CHECK(a->value.at2(0, 1) == doctest::Approx(1.0 / (e10 + e0)).epsilon(1e-6));
        CHECK(a->value.at2(0, 0) == doctest::Approx(0.9999546).epsilon(1e-6));
        CHECK(a->value.at2(0, 1) == doctest::Approx(4.54e-5).epsilon(1e-2));
    }

    SUBCASE("rows sum to one on random inputs") {
        Rng rng(2);
        Var f = make_leaf(random_tensor({8, 5}, rng));
        Var a = affinity(f, random_tensor({7, 5}, rng), 0.1);
        for (int i = 0; i < 8; ++i) {
            double s = 0.0;
            for (int j = 0; j < 7; ++j) {
                s += a->value.at2(i, j);
                CHECK(a->value.at2(i, j) > 0.0);
                CHECK(a->value.at2(i, j) < 1.0);
            }
            CHECK(std::fabs(s - 1.0) < 1e-6);
        }
    }

    SUBCASE("positive rescaling of a feature row leaves its affinity row unchanged") {
        Rng rng(3);
        Tensor f = random_tensor({3, 5}, rng);
        Tensor protos = random_tensor({4, 5}, rng);
        Var a1 = affinity(make_const(f), protos, 0.1);
        Tensor f2 = f;
        for (int j = 0; j < 5; ++j) f2.at2(1, j) *= 37.5;
        Var a2 = affinity(make_const(f2), protos, 0.1);
        CHECK(max_abs_diff(a1->value, a2->value) < 1e-12);
    }

    SUBCASE("zero-norm rows are reported with their index") {
        Tensor f({2, 3});
        f.at2(0, 0) = 1.0;  // row 1 stays zero
        Rng rng(4);
        CHECK_THROWS_WITH_AS(affinity(make_const(f), random_tensor({2, 3}, rng), 0.1),
                             doctest::Contains("row 1"), NumericError);
    }
}

TEST_CASE("relational matrices") {
    SUBCASE("a single row collapses to [[1]]") {
        Tensor a = Tensor::from({1, 3}, {0.2, 0.3, 0.5});
        Var y = relational(make_const(a), 0.1);
        CHECK(y->value.shape() == Shape{1, 1});
        CHECK(y->value[0] == doctest::Approx(1.0));
    }
    SUBCASE("identical affinity rows give identical relational rows") {
        Tensor a = Tensor::from({2, 3}, {0.2, 0.3, 0.5, 0.2, 0.3, 0.5});
        Var y = relational(make_const(a), 0.1);
        for (int j = 0; j < 2; ++j)
            CHECK(y->value.at2(0, j) == doctest::Approx(y->value.at2(1, j)).epsilon(1e-12));
    }
    SUBCASE("matches a double-loop gram plus softmax oracle") {
        Rng rng(5);
        Var f = make_leaf(random_tensor({6, 4}, rng));
        Tensor protos = random_tensor({9, 4}, rng);
        Var a = affinity(f, protos, 0.1);
        Var y = relational(a, 0.1);

        const int b = 6, n = 9;
        Tensor gram({b, b});
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < b; ++j) {
                double s = 0.0;
                for (int k = 0; k < n; ++k) s += a->value.at2(i, k) * a->value.at2(j, k);
                gram.at2(i, j) = s / 0.1;
            }
        Tensor expect({b, b});
        for (int i = 0; i < b; ++i) {
            double mx = gram.at2(i, 0);
            for (int j = 1; j < b; ++j) mx = std::max(mx, gram.at2(i, j));
            double sum = 0.0;
            for (int j = 0; j < b; ++j) sum += std::exp(gram.at2(i, j) - mx);
            for (int j = 0; j < b; ++j)
                expect.at2(i, j) = std::exp(gram.at2(i, j) - mx) / sum;
        }
        CHECK(max_abs_diff(y->value, expect) < 1e-10);
        for (int i = 0; i < b; ++i) {
            double s = 0.0;
            for (int j = 0; j < b; ++j) s += y->value.at2(i, j);
            CHECK(std::fabs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("alignment losses") {
    SUBCASE("identical relational matrices give zero loss in both spaces") {
        Rng rng(6);
        Var f = make_leaf(random_tensor({4, 3}, rng));
        Var y = relational(affinity(f, random_tensor({5, 3}, rng), 0.1), 0.1);
        Var zero = inter_loss(y, y, y, y);
        CHECK(zero->value[0] == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(intra_loss(y, y, y, y)->value[0] == doctest::Approx(0.0).epsilon(1e-12));
    }

    SUBCASE("hand-computed two-class row divergence") {
        Tensor yo = Tensor::from({1, 2}, {0.8, 0.2});
        Tensor yz = Tensor::from({1, 2}, {0.5, 0.5});
        Tensor id = Tensor::from({1, 2}, {0.6, 0.4});
        Var l = inter_loss(make_const(yo), make_const(yz), make_const(id), make_const(id));
        const double expect = 0.8 * std::log(1.6) + 0.2 * std::log(0.4);
        CHECK(l->value[0] == doctest::Approx(expect).epsilon(1e-12));
        CHECK(l->value[0] == doctest::Approx(0.19274).epsilon(1e-4));
    }

    SUBCASE("nonnegative on random row-stochastic inputs, matching a row oracle") {
        Rng rng(7);
        auto rows = [&](int b, int n) {
            Tensor t = random_tensor({b, n}, rng);
            for (int i = 0; i < b; ++i) {
                double s = 0.0;
                for (int j = 0; j < n; ++j) {
                    t.at2(i, j) = std::exp(t.at2(i, j));
                    s += t.at2(i, j);
                }
                for (int j = 0; j < n; ++j) t.at2(i, j) /= s;
            }
            return t;
        };
        Tensor a = rows(5, 5), b = rows(5, 5), c = rows(5, 5), d = rows(5, 5);
        Var l = intra_loss(make_const(a), make_const(b), make_const(c), make_const(d));
        CHECK(l->value[0] >= 0.0);
        double expect = 0.0;
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 5; ++j)
                expect += a.at2(i, j) * std::log(a.at2(i, j) / b.at2(i, j)) / 5.0 +
                          c.at2(i, j) * std::log(c.at2(i, j) / d.at2(i, j)) / 5.0;
        CHECK(std::fabs(l->value[0] - expect) < 1e-10);
    }
}

TEST_CASE("alignment gradient flows into current features only") {
    Rng rng(8);
    Var z = make_leaf(random_tensor({6, 4}, rng));
    Var o = make_leaf(random_tensor({6, 4}, rng));  // frozen branch
    Tensor protos_v = random_tensor({5, 4}, rng);
    Tensor protos_t = random_tensor({5, 4}, rng);

    auto forward = [&] {
        Var y_z_v = relational(affinity(z, protos_t, 0.1), 0.1);
        Var y_z_t = relational(affinity(z, protos_v, 0.1), 0.1);
        Var y_o_v, y_o_t;
        {
            NoGradGuard ng;
            y_o_v = relational(affinity(o, protos_t, 0.1), 0.1);
            y_o_t = relational(affinity(o, protos_v, 0.1), 0.1);
        }
        Var inter = inter_loss(y_o_v, y_z_v, y_o_t, y_z_t);
        Var intra = intra_loss(y_o_v, y_z_v, y_o_t, y_z_t);
        const double beta = 1.0, mu = 0.5;
        return ag::add(ag::affine(inter, beta * mu, 0.0),
                       ag::affine(intra, beta * (1.0 - mu), 0.0));
    };
    auto r = testutil::fd_check(forward, {z});
    CHECK(r.max_rel_err < 1e-4);

    Var loss = forward();
    backward(loss);
    CHECK(o->grad.empty());  // frozen target receives nothing
}

TEST_CASE("prototype bank construction") {
    using namespace testutil;
    Model model(tiny_model_config(), 3);
    StageConfig sc = tiny_stage_config();
    auto stream = make_stream(1, sc, 12);
    ForwardToggles toggles{true, true};
    PrototypeBank bank = extract_prototypes(model, stream[0], toggles);

    CHECK(bank.identity_ids.size() == 4);
    CHECK(bank.visible.shape() == Shape{4, 16});
    CHECK(bank.infrared.shape() == Shape{4, 16});
    CHECK(bank.stage == 1);

    SUBCASE("prototype of identical samples equals the sample feature") {
        StageDataset ds;
        ds.stage_index = 1;
        ds.config = sc;
        Rng rng(9);
        ds.identity_roster.push_back(draw_identity(0, rng));
        Rng rr(10);
        StageConfig quiet = sc;
        quiet.noise_amp = 0.0;
        Tensor vis = render_visible(ds.identity_roster[0], quiet.style_shift, quiet, rr);
        Tensor ir = render_infrared(ds.identity_roster[0], quiet.style_shift, quiet, rr);
        for (int k = 0; k < 2; ++k) {
            ds.train.push_back({vis, 0, Modality::visible, 1});
            ds.train.push_back({ir, 0, Modality::infrared, 1});
        }
        PrototypeBank b2 = extract_prototypes(model, ds, toggles);
        FeaturePair f = model.encode(vis, Modality::visible, toggles);
        for (int j = 0; j < 16; ++j)
            CHECK(b2.visible.at2(0, j) == doctest::Approx(f.z[j]).epsilon(1e-12));
    }

    SUBCASE("mean of two features is their midpoint") {
        StageDataset ds;
        ds.stage_index = 1;
        ds.config = sc;
        Rng rng(11);
        ds.identity_roster.push_back(draw_identity(0, rng));
        Rng rr(12);
        Tensor v1 = render_visible(ds.identity_roster[0], sc.style_shift, sc, rr);
        Tensor v2 = render_visible(ds.identity_roster[0], sc.style_shift, sc, rr);
        Tensor ir = render_infrared(ds.identity_roster[0], sc.style_shift, sc, rr);
        ds.train.push_back({v1, 0, Modality::visible, 1});
        ds.train.push_back({v2, 0, Modality::visible, 1});
        ds.train.push_back({ir, 0, Modality::infrared, 1});
        PrototypeBank b2 = extract_prototypes(model, ds, toggles);
        FeaturePair f1 = model.encode(v1, Modality::visible, toggles);
        FeaturePair f2 = model.encode(v2, Modality::visible, toggles);
        for (int j = 0; j < 16; ++j)
            CHECK(b2.visible.at2(0, j) ==
                  doctest::Approx(0.5 * (f1.z[j] + f2.z[j])).epsilon(1e-12));
    }

    SUBCASE("an identity without one modality is an error") {
        StageDataset ds;
        ds.stage_index = 1;
        ds.config = sc;
        Rng rng(13);
        ds.identity_roster.push_back(draw_identity(0, rng));
        Rng rr(14);
        Tensor vis = render_visible(ds.identity_roster[0], sc.style_shift, sc, rr);
        ds.train.push_back({vis, 0, Modality::visible, 1});
        CHECK_THROWS_AS(extract_prototypes(model, ds, toggles), StateError);
    }
}
