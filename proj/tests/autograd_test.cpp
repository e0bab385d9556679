#include "doctest.h"

#include "test_util.hpp"

using namespace ckda;
using testutil::fd_check;
using testutil::random_tensor;

namespace {
constexpr double kGradTol = 1e-4;
}

TEST_CASE("elementwise ops match finite differences") {
    Rng rng(11);
    Var a = make_leaf(random_tensor({3, 4}, rng));
    Var b = make_leaf(random_tensor({3, 4}, rng));
    auto run = [&](const std::function<Var()>& f) {
        auto r = fd_check(f, {a, b});
        CHECK(r.max_rel_err < kGradTol);
    };
    run([&] { return testutil::contract(ag::add(a, b), 1); });
    run([&] { return testutil::contract(ag::sub(a, b), 2); });
    run([&] { return testutil::contract(ag::mul(a, b), 3); });
    run([&] { return testutil::contract(ag::affine(a, 1.7, -0.3), 4); });
    run([&] { return testutil::contract(ag::sigmoid(a), 5); });
    run([&] { return testutil::contract(ag::gelu(a), 6); });
}

TEST_CASE("relu gradient away from the kink") {
    Rng rng(12);
    Tensor t = random_tensor({5, 5}, rng);
    for (int64_t i = 0; i < t.numel(); ++i)
        if (std::fabs(t[i]) < 0.05) t[i] = 0.1;  // keep clear of the kink
    Var a = make_leaf(t);
    auto r = fd_check([&] { return testutil::contract(ag::relu(a), 7); }, {a});
    CHECK(r.max_rel_err < kGradTol);
}

TEST_CASE("linear and matmul variants match finite differences and each other") {
    Rng rng(13);
    Var x = make_leaf(random_tensor({2, 3, 5}, rng));
    Var w = make_leaf(random_tensor({5, 4}, rng, 0.5));
    Var b = make_leaf(random_tensor({4}, rng, 0.1));
    auto r = fd_check([&] { return testutil::contract(ag::linear(x, w, b), 8); }, {x, w, b});
    CHECK(r.max_rel_err < kGradTol);

    Var a2 = make_leaf(random_tensor({4, 3}, rng));
    Var b2 = make_leaf(random_tensor({3, 6}, rng));
    r = fd_check([&] { return testutil::contract(ag::matmul(a2, b2), 9); }, {a2, b2});
    CHECK(r.max_rel_err < kGradTol);

    Var c2 = make_leaf(random_tensor({6, 3}, rng));
    r = fd_check([&] { return testutil::contract(ag::matmul(a2, c2, false, true), 10); },
                 {a2, c2});
    CHECK(r.max_rel_err < kGradTol);

    Var d2 = make_leaf(random_tensor({4, 6}, rng));
    r = fd_check([&] { return testutil::contract(ag::matmul(a2, d2, true, false), 11); },
                 {a2, d2});
    CHECK(r.max_rel_err < kGradTol);

    // Gram product with the same operand twice
    r = fd_check([&] { return testutil::contract(ag::matmul(a2, a2, false, true), 12); }, {a2});
    CHECK(r.max_rel_err < kGradTol);
}

TEST_CASE("bmm matches finite differences") {
    Rng rng(14);
    Var a = make_leaf(random_tensor({3, 2, 4}, rng));
    Var b = make_leaf(random_tensor({3, 4, 5}, rng));
    auto r = fd_check([&] { return testutil::contract(ag::bmm(a, b), 13); }, {a, b});
    CHECK(r.max_rel_err < kGradTol);
}

TEST_CASE("structural ops route gradients exactly") {
    Rng rng(15);
    Var x = make_leaf(random_tensor({2, 3, 4}, rng));
    auto r = fd_check(
        [&] { return testutil::contract(ag::permute_axes(x, {1, 2, 0}), 14); }, {x});
    CHECK(r.max_rel_err < kGradTol);
    r = fd_check([&] { return testutil::contract(ag::slice_last(x, 1, 2), 15); }, {x});
    CHECK(r.max_rel_err < kGradTol);
    r = fd_check([&] { return testutil::contract(ag::reshape(x, {6, 4}), 16); }, {x});
    CHECK(r.max_rel_err < kGradTol);

    Var y = make_leaf(random_tensor({2, 3, 4}, rng));
    r = fd_check([&] { return testutil::contract(ag::concat0(x, y), 17); }, {x, y});
    CHECK(r.max_rel_err < kGradTol);

    Var flat = make_leaf(random_tensor({5, 3}, rng));
    r = fd_check(
        [&] { return testutil::contract(ag::gather_rows(flat, {0, 2, 2, 4}), 18); }, {flat});
    CHECK(r.max_rel_err < kGradTol);

    Var row = make_leaf(random_tensor({4}, rng));
    r = fd_check([&] { return testutil::contract(ag::prepend_row(x, row), 19); }, {x, row});
    CHECK(r.max_rel_err < kGradTol);

    Var pos = make_leaf(random_tensor({3, 4}, rng));
    r = fd_check([&] { return testutil::contract(ag::add_rows(x, pos), 20); }, {x, pos});
    CHECK(r.max_rel_err < kGradTol);

    r = fd_check([&] { return testutil::contract(ag::select_row(x, 1), 21); }, {x});
    CHECK(r.max_rel_err < kGradTol);
}

TEST_CASE("tokenization is a lossless shuffle with exact gradients") {
    Rng rng(16);
    Tensor img = random_tensor({2, 8, 8, 3}, rng);
    Var x = make_leaf(img);
    Var tokens = ag::patchify(x, 4);
    CHECK(tokens->value.shape() == Shape{2, 4, 48});
    Var back = ag::depatchify(tokens, 8, 8, 3, 4);
    CHECK(tensors_equal(back->value, img));

    auto r = fd_check([&] { return testutil::contract(ag::patchify(x, 4), 22); }, {x});
    CHECK(r.max_rel_err < kGradTol);
}

TEST_CASE("softmax rows and normalization layers match finite differences") {
    Rng rng(17);
    Var x = make_leaf(random_tensor({4, 6}, rng));
    auto r = fd_check([&] { return testutil::contract(ag::softmax_last(x), 23); }, {x});
    CHECK(r.max_rel_err < kGradTol);

    Var g = make_leaf(random_tensor({6}, rng, 0.5));
    Var be = make_leaf(random_tensor({6}, rng, 0.5));
    r = fd_check([&] { return testutil::contract(ag::layer_norm(x, g, be, 1e-6), 24); },
                 {x, g, be});
    CHECK(r.max_rel_err < kGradTol);

    Var grid = make_leaf(random_tensor({2, 5, 3}, rng));
    r = fd_check([&] { return testutil::contract(ag::instance_norm(grid, 1e-5), 25); }, {grid});
    CHECK(r.max_rel_err < kGradTol);
}

TEST_CASE("batch norm gradients, training and eval") {
    Rng rng(18);
    Var x = make_leaf(random_tensor({6, 3}, rng));
    Var g = make_leaf(random_tensor({3}, rng, 0.3));
    Var be = make_leaf(random_tensor({3}, rng, 0.3));
    Tensor rm({3}), rv({3}, 1.0);
    auto r = fd_check(
        [&] {
            return testutil::contract(ag::batch_norm(x, g, be, rm, rv, true, 0.1, 1e-5), 26);
        },
        {x, g, be});
    CHECK(r.max_rel_err < kGradTol);

    Tensor rm2({3}, 0.2), rv2({3}, 0.8);
    r = fd_check(
        [&] {
            return testutil::contract(ag::batch_norm(x, g, be, rm2, rv2, false, 0.1, 1e-5), 27);
        },
        {x, g, be});
    CHECK(r.max_rel_err < kGradTol);
}

TEST_CASE("batch norm updates running statistics only in training mode") {
    Rng rng(19);
    Var x = make_leaf(random_tensor({8, 2}, rng));
    Var g = make_leaf(Tensor({2}, 1.0));
    Var be = make_leaf(Tensor({2}));
    Tensor rm({2}), rv({2}, 1.0);
    Tensor rm_before = rm, rv_before = rv;
    ag::batch_norm(x, g, be, rm, rv, false, 0.1, 1e-5);
    CHECK(tensors_equal(rm, rm_before));
    CHECK(tensors_equal(rv, rv_before));
    ag::batch_norm(x, g, be, rm, rv, true, 0.1, 1e-5);
    CHECK(!tensors_equal(rm, rm_before));
}

TEST_CASE("loss ops match finite differences") {
    Rng rng(20);
    Var a = make_leaf(random_tensor({3, 7}, rng));
    Var b = make_leaf(random_tensor({3, 7}, rng));
    auto r = fd_check([&] { return ag::l1_mean(a, b); }, {a, b});
    CHECK(r.max_rel_err < kGradTol);

    Var logits = make_leaf(random_tensor({4, 5}, rng));
    std::vector<int> labels = {0, 2, 4, 1};
    r = fd_check([&] { return ag::cross_entropy(logits, labels); }, {logits});
    CHECK(r.max_rel_err < kGradTol);

    Var p_log = make_leaf(random_tensor({3, 4}, rng));
    Var q_log = make_leaf(random_tensor({3, 4}, rng));
    r = fd_check(
        [&] {
            return ag::kl_rows_mean(ag::softmax_last(p_log), ag::softmax_last(q_log));
        },
        {p_log, q_log});
    CHECK(r.max_rel_err < kGradTol);

    Var f = make_leaf(random_tensor({4, 3}, rng));
    r = fd_check([&] { return testutil::contract(ag::l2_normalize_rows(f), 28); }, {f});
    CHECK(r.max_rel_err < kGradTol);

    Var u = make_leaf(random_tensor({4, 3}, rng));
    Var v = make_leaf(random_tensor({4, 3}, rng));
    r = fd_check([&] { return testutil::contract(ag::rows_l2_dist(u, v), 29); }, {u, v});
    CHECK(r.max_rel_err < kGradTol);
}

TEST_CASE("dropout is identity in eval mode and rescales in training") {
    Rng rng(21);
    Var x = make_leaf(random_tensor({100, 10}, rng));
    Rng drop_rng(5);
    Var eval_out = ag::dropout(x, 0.5, false, drop_rng);
    CHECK(tensors_equal(eval_out->value, x->value));

    Var train_out = ag::dropout(x, 0.5, true, drop_rng);
    int64_t zeros = 0;
    for (int64_t i = 0; i < train_out->value.numel(); ++i) {
        double v = train_out->value[i];
        if (v == 0.0)
            ++zeros;
        else
            CHECK(v == doctest::Approx(2.0 * x->value[i]));
    }
    CHECK(zeros > 300);
    CHECK(zeros < 700);
}

TEST_CASE("no gradient tape is recorded under NoGradGuard") {
    Rng rng(22);
    Var a = make_leaf(random_tensor({2, 2}, rng));
    NoGradGuard ng;
    Var out = ag::mul(a, a);
    CHECK(!out->requires_grad);
    CHECK(out->parents.empty());
}

TEST_CASE("backward requires a scalar root and accumulates into leaves") {
    Var a = make_leaf(Tensor::from({2}, {1.0, 2.0}));
    Var s = ag::mean_all(ag::mul(a, a));
    backward(s);
    CHECK(a->grad[0] == doctest::Approx(1.0));  // d/dx mean(x^2) = 2x/n
    CHECK(a->grad[1] == doctest::Approx(2.0));
    CHECK_THROWS_AS(backward(ag::mul(a, a)), StateError);
}
