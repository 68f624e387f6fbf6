#include <catch2/catch_amalgamated.hpp>

#include "test_util.hpp"

using namespace bcat;
using testutil::close;
using testutil::gradcheck;
using testutil::random_tensor;

TEST_CASE("matmul basics", "[tensor]") {
    const Tensor identity({2, 2}, {1, 0, 0, 1});
    const Tensor b({2, 2}, {3, 4, 5, 6});
    CHECK(testutil::bitwise_equal(matmul(identity, b), b));

    const Tensor a({1, 2}, {1, 2});
    const Tensor zero({2, 1}, {0, 0});
    CHECK(matmul(a, zero).data == std::vector<double>{0});

    const Tensor x({2, 2}, {1, 2, 3, 4});
    const Tensor y({2, 2}, {5, 6, 7, 8});
    const Tensor expect = testutil::matmul_oracle(x, y);
    CHECK(expect.data == std::vector<double>{19, 22, 43, 50});
    CHECK(testutil::bitwise_equal(matmul(x, y), expect));
}

TEST_CASE("matmul batched matches per-slice oracle", "[tensor]") {
    const Tensor a = random_tensor({3, 4, 5}, 11);
    const Tensor b = random_tensor({3, 5, 2}, 12);
    const Tensor c = matmul(a, b);
    for (int s = 0; s < 3; ++s) {
        Tensor as({4, 5}), bs({5, 2});
        std::copy_n(a.data.begin() + s * 20, 20, as.data.begin());
        std::copy_n(b.data.begin() + s * 10, 10, bs.data.begin());
        const Tensor cs = testutil::matmul_oracle(as, bs);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 2; ++j) CHECK(c.at({s, i, j}) == Catch::Approx(cs.at({i, j})).margin(1e-12));
    }

    // rank-2 weights broadcast over a batched left operand
    const Tensor w = random_tensor({5, 3}, 13);
    const Tensor cw = matmul(a, w);
    for (int s = 0; s < 3; ++s) {
        Tensor as({4, 5});
        std::copy_n(a.data.begin() + s * 20, 20, as.data.begin());
        const Tensor cs = testutil::matmul_oracle(as, w);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 3; ++j) CHECK(cw.at({s, i, j}) == Catch::Approx(cs.at({i, j})).margin(1e-12));
    }
}

TEST_CASE("matmul shape errors name both shapes", "[tensor]") {
    const Tensor a({2, 3});
    const Tensor b({4, 2});
    CHECK_THROWS_WITH(matmul(a, b), Catch::Matchers::ContainsSubstring("[2, 3]") &&
                                        Catch::Matchers::ContainsSubstring("[4, 2]"));
}

TEST_CASE("softmax rows", "[tensor]") {
    const Tensor u({3}, {0, 0, 0});
    const Tensor su = softmax_rows(u);
    for (double v : su.data) CHECK(v == Catch::Approx(1.0 / 3).margin(1e-15));

    CHECK(softmax_rows(Tensor({1}, {42.0})).data == std::vector<double>{1.0});

    const Tensor t({2}, {0.0, std::log(3.0)});
    const Tensor st = softmax_rows(t);
    CHECK(st.data[0] == Catch::Approx(0.25).margin(1e-12));
    CHECK(st.data[1] == Catch::Approx(0.75).margin(1e-12));
}

TEST_CASE("softmax invariants: stochastic rows, (0,1] entries, monotone", "[tensor]") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        const Tensor x = random_tensor({7, 9}, seed, 30.0);
        const Tensor y = softmax_rows(x);
        for (int r = 0; r < 7; ++r) {
            double sum = 0.0;
            for (int c = 0; c < 9; ++c) {
                const double v = y.at({r, c});
                CHECK(v > 0.0);
                CHECK(v <= 1.0);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
        // raising one logit raises its probability
        Tensor x2 = x;
        x2.at({0, 3}) += 0.5;
        CHECK(softmax_rows(x2).at({0, 3}) > y.at({0, 3}));
    }
}

TEST_CASE("softmax rejects non-finite input", "[tensor]") {
    Tensor bad({2}, {1.0, 0.0});
    bad.data[1] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_WITH(softmax_rows(bad), Catch::Matchers::ContainsSubstring("non-finite"));
}

TEST_CASE("layer_norm examples", "[tensor]") {
    const Tensor g1 = Tensor::full({3}, 1.0);
    const Tensor b0({3});
    const Tensor constant_row({1, 3}, {5, 5, 5});
    const Tensor out = layer_norm(constant_row, g1, b0, 1e-5);
    for (double v : out.data) CHECK(v == Catch::Approx(0.0).margin(1e-12));

    const Tensor pre({1, 2}, {-1, 1});
    const Tensor out2 = layer_norm(pre, Tensor::full({2}, 1.0), Tensor({2}), 1e-12);
    CHECK(out2.data[0] == Catch::Approx(-1.0).margin(1e-9));
    CHECK(out2.data[1] == Catch::Approx(1.0).margin(1e-9));

    const Tensor row({1, 2}, {0, 2});
    const Tensor out3 = layer_norm(row, Tensor::full({2}, 2.0), Tensor::full({2}, 1.0), 0.0);
    CHECK(out3.data[0] == Catch::Approx(-1.0).margin(1e-12));
    CHECK(out3.data[1] == Catch::Approx(3.0).margin(1e-12));
}

TEST_CASE("layer_norm pre-affine rows have mean 0 and variance 1", "[tensor]") {
    const int d = 16;
    for (uint64_t seed = 21; seed <= 25; ++seed) {
        const Tensor x = random_tensor({8, d}, seed, 2.0);
        const Tensor y = layer_norm(x, Tensor::full({d}, 1.0), Tensor({d}), 1e-12);
        for (int r = 0; r < 8; ++r) {
            double rv = 0.0, rm = 0.0;
            for (int c = 0; c < d; ++c) rm += x.at({r, c});
            rm /= d;
            for (int c = 0; c < d; ++c) rv += (x.at({r, c}) - rm) * (x.at({r, c}) - rm);
            rv /= d;
            if (rv < 1e-4) continue;
            double mean = 0.0, var = 0.0;
            for (int c = 0; c < d; ++c) mean += y.at({r, c});
            mean /= d;
            for (int c = 0; c < d; ++c) var += (y.at({r, c}) - mean) * (y.at({r, c}) - mean);
            var /= d;
            CHECK(std::abs(mean) <= 1e-8);
            CHECK(std::abs(var - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("gelu exact erf form", "[tensor]") {
    CHECK(gelu(Tensor::scalar(0.0)).data[0] == 0.0);
    CHECK(gelu(Tensor::scalar(20.0)).data[0] == Catch::Approx(20.0).margin(1e-9));
    const double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
    CHECK(gelu(Tensor::scalar(1.0)).data[0] == Catch::Approx(1.0 * phi1).margin(1e-15));
    CHECK(gelu(Tensor::scalar(1.0)).data[0] == Catch::Approx(0.8413447460685429).margin(1e-12));
}

TEST_CASE("backward on simple scalars", "[autodiff]") {
    {
        Graph g;
        Tensor x({3}, {1, 2, 3});
        x.requires_grad = true;
        Var xv = g.leaf(x);
        auto grads = g.backward(sum_all(xv));
        CHECK(grads.at(xv.id).data == std::vector<double>{1, 1, 1});
    }
    {
        Graph g;
        Tensor x({2}, {1, -2});
        x.requires_grad = true;
        Var xv = g.leaf(x);
        auto grads = g.backward(sum_all(mul(xv, xv)));
        CHECK(grads.at(xv.id).data == std::vector<double>{2, -4});
    }
}

TEST_CASE("backward errors", "[autodiff]") {
    Graph g;
    Tensor x({2, 2}, {1, 2, 3, 4});
    x.requires_grad = true;
    Var xv = g.leaf(x);
    CHECK_THROWS_WITH(g.backward(xv), Catch::Matchers::ContainsSubstring("scalar"));
    Graph other;
    Var loss = sum_all(xv);
    CHECK_THROWS_WITH(other.backward(loss), Catch::Matchers::ContainsSubstring("graph"));
}

TEST_CASE("finite_diff_grad basics", "[autodiff]") {
    auto sum_f = [](const Tensor& t) {
        double s = 0.0;
        for (double v : t.data) s += v;
        return s;
    };
    const Tensor x = random_tensor({4}, 3);
    const Tensor g = finite_diff_grad(sum_f, x, 1e-5);
    for (double v : g.data) CHECK(v == Catch::Approx(1.0).margin(1e-9));

    auto square = [](const Tensor& t) { return t.data[0] * t.data[0]; };
    CHECK(finite_diff_grad(square, Tensor::scalar(3.0), 1e-5).data[0] == Catch::Approx(6.0).margin(1e-8));

    auto softmax0 = [](const Tensor& t) { return softmax_rows(t).data[0]; };
    const Tensor j = finite_diff_grad(softmax0, Tensor({2}, {0, 0}), 1e-5);
    CHECK(j.data[0] == Catch::Approx(0.25).margin(1e-6));
    CHECK(j.data[1] == Catch::Approx(-0.25).margin(1e-6));

    CHECK_THROWS(finite_diff_grad(square, Tensor::scalar(1.0), 0.0));
}

// Every primitive with a gradient rule, against central differences, over
// several seeds and shapes. Losses contract through a fixed random cotangent
// so every output coordinate matters.
TEST_CASE("primitive gradients match finite differences", "[autodiff][grad]") {
    const std::vector<std::vector<int>> shapes = {{2, 3}, {4, 5}, {2, 2, 3}};
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        for (const auto& shape : shapes) {
            const Tensor x = random_tensor(shape, seed * 100 + shape.size());
            const Tensor r = random_tensor(shape, seed * 100 + 50 + shape.size());

            auto contracted = [&](std::function<Var(Graph&, Var)> op) {
                return [op, r](Graph& g, Var v) { return sum_all(mul(op(g, v), g.constant(r))); };
            };

            CHECK(gradcheck(contracted([](Graph&, Var v) { return softmax_rows(v); }), x));
            CHECK(gradcheck(contracted([](Graph&, Var v) { return log_softmax_rows(v); }), x));
            CHECK(gradcheck(contracted([](Graph&, Var v) { return gelu(v); }), x));
            CHECK(gradcheck(contracted([](Graph&, Var v) { return exp_t(v); }), x));
            CHECK(gradcheck(contracted([](Graph&, Var v) { return scale(v, -1.7); }), x));
            CHECK(gradcheck(contracted([&](Graph& g, Var v) { return add(v, g.constant(r)); }), x));
            CHECK(gradcheck(contracted([&](Graph& g, Var v) { return sub(g.constant(r), v); }), x));
            CHECK(gradcheck(contracted([&](Graph& g, Var v) { return mul(v, g.constant(r)); }), x));
            CHECK(gradcheck([&](Graph& g, Var v) { return sum_all(mul(mean_axis(v, 0), g.constant(mean_axis(r, 0)))); }, x));
            CHECK(gradcheck([&](Graph& g, Var v) { return sum_all(mul(sum_axis(v, 1), g.constant(sum_axis(r, 1)))); }, x));
            CHECK(gradcheck([](Graph&, Var v) { return sum_all(v); }, x));
        }

        // strictly positive inputs for the clamped log
        Tensor pos = random_tensor({3, 4}, seed + 7);
        for (auto& v : pos.data) v = 0.5 + std::abs(v);
        const Tensor rp = random_tensor({3, 4}, seed + 8);
        CHECK(gradcheck([&](Graph& g, Var v) { return sum_all(mul(log_clamped(v, 1e-12), g.constant(rp))); }, pos));

        // matmul, both sides, including broadcast batch dims
        {
            const Tensor a = random_tensor({2, 3, 4}, seed + 11);
            const Tensor b = random_tensor({4, 5}, seed + 12);
            const Tensor rr = random_tensor({2, 3, 5}, seed + 13);
            CHECK(gradcheck([&](Graph& g, Var v) { return sum_all(mul(matmul(v, g.constant(b)), g.constant(rr))); }, a));
            CHECK(gradcheck([&](Graph& g, Var v) { return sum_all(mul(matmul(g.constant(a), v), g.constant(rr))); }, b));
        }

        // layer_norm: input, gamma and beta
        {
            const Tensor x2 = random_tensor({3, 6}, seed + 21);
            const Tensor gm = random_tensor({6}, seed + 22);
            const Tensor bt = random_tensor({6}, seed + 23);
            const Tensor rr = random_tensor({3, 6}, seed + 24);
            auto loss_of = [&](Graph& g, Var xv, Var gv, Var bv) {
                return sum_all(mul(layer_norm(xv, gv, bv, 1e-5), g.constant(rr)));
            };
            CHECK(gradcheck([&](Graph& g, Var v) { return loss_of(g, v, g.constant(gm), g.constant(bt)); }, x2));
            CHECK(gradcheck([&](Graph& g, Var v) { return loss_of(g, g.constant(x2), v, g.constant(bt)); }, gm));
            CHECK(gradcheck([&](Graph& g, Var v) { return loss_of(g, g.constant(x2), g.constant(gm), v); }, bt));
        }

        // shape movement + concat + gather
        {
            const Tensor a = random_tensor({2, 3, 4}, seed + 31);
            const Tensor rr = random_tensor({4, 6}, seed + 32);
            CHECK(gradcheck(
                [&](Graph& g, Var v) {
                    return sum_all(mul(reshape(permute(v, {2, 0, 1}), {4, 6}), g.constant(rr)));
                },
                a));
            const Tensor b = random_tensor({3, 2}, seed + 33);
            const Tensor c = random_tensor({3, 3}, seed + 34);
            const Tensor rc = random_tensor({3, 5}, seed + 35);
            CHECK(gradcheck([&](Graph& g, Var v) { return sum_all(mul(concat_last(v, g.constant(c)), g.constant(rc))); }, b));
            const std::vector<int> idx = {1, 0, 2};
            CHECK(gradcheck([&](Graph& g, Var v) { return sum_all(mul(gather_last(v, idx), g.constant(random_tensor({3}, seed + 36)))); },
                            c));
        }

        // a composite of several primitives
        {
            const Tensor x3 = random_tensor({3, 4}, seed + 41);
            const Tensor w = random_tensor({4, 4}, seed + 42);
            CHECK(gradcheck(
                [&](Graph& g, Var v) {
                    Var h = gelu(matmul(v, g.constant(w)));
                    Var s = softmax_rows(h);
                    return sum_all(mul(s, g.constant(random_tensor({3, 4}, seed + 43))));
                },
                x3));
        }
    }
}

TEST_CASE("deterministic accumulation and replay", "[autodiff]") {
    auto build = [](Graph& g, const Tensor& x0, const Tensor& w0) {
        Tensor x = x0, w = w0;
        x.requires_grad = true;
        w.requires_grad = true;
        Var xv = g.leaf(x);
        Var wv = g.leaf(w);
        Var h = gelu(matmul(xv, wv));
        Var y = add(h, mul(h, h));  // h reused: gradient accumulates
        return std::tuple{xv, wv, sum_all(y)};
    };
    const Tensor x0 = random_tensor({3, 4}, 71);
    const Tensor w0 = random_tensor({4, 4}, 72);

    Graph g1, g2;
    auto [x1, w1, l1] = build(g1, x0, w0);
    auto [x2, w2, l2] = build(g2, x0, w0);
    CHECK(testutil::bitwise_equal(g1.val(l1), g2.val(l2)));
    auto grads1 = g1.backward(l1);
    auto grads2 = g2.backward(l2);
    CHECK(testutil::bitwise_equal(grads1.at(x1.id), grads2.at(x2.id)));
    CHECK(testutil::bitwise_equal(grads1.at(w1.id), grads2.at(w2.id)));

    // replay reproduces every recorded value bit-exactly
    const Tensor before = g1.val(l1);
    std::vector<Tensor> vals;
    for (size_t i = 0; i < g1.num_values(); ++i) vals.push_back(g1.val(static_cast<int>(i)));
    g1.replay();
    for (size_t i = 0; i < g1.num_values(); ++i) CHECK(testutil::bitwise_equal(vals[i], g1.val(static_cast<int>(i))));
    CHECK(testutil::bitwise_equal(before, g1.val(l1)));
}

TEST_CASE("unreached grad-requiring leaves get zero gradients", "[autodiff]") {
    Graph g;
    Tensor x({2}, {1, 2});
    x.requires_grad = true;
    Tensor unused({3}, {1, 1, 1});
    unused.requires_grad = true;
    Var xv = g.leaf(x);
    Var uv = g.leaf(unused);
    auto grads = g.backward(sum_all(xv));
    CHECK(grads.at(uv.id).data == std::vector<double>{0, 0, 0});
}

TEST_CASE("tensor invariants", "[tensor]") {
    CHECK_THROWS(Tensor({2, 0}));
    CHECK_THROWS(Tensor({2}, {1, 2, 3}));
    Graph g;
    Tensor bad({1});
    bad.data[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH(g.leaf(bad), Catch::Matchers::ContainsSubstring("non-finite"));
}
