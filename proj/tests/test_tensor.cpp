#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dreamdiff/optim.hpp"
#include "dreamdiff/tensor.hpp"

using namespace dreamdiff;

namespace {

std::vector<scalar> random_vec(size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<scalar> v(n);
    for (auto& x : v) x = static_cast<scalar>(rng.uniform(lo, hi));
    return v;
}

// Checks analytic gradients of `loss_of(x)` w.r.t. a single tracked leaf
// against central finite differences.
void check_grad(const Shape& shape, const std::function<Tensor(const Tensor&)>& loss_of, Rng& rng,
                double tol = 1e-4, double lo = -1.0, double hi = 1.0) {
    std::vector<scalar> x0 = random_vec(numel(shape), rng, lo, hi);
    Tensor leaf = Tensor::leaf(shape, x0, true, "x");
    Tensor loss = loss_of(leaf);
    backward(loss);
    auto fd = central_difference(
        [&](const std::vector<scalar>& xs) {
            Tensor t = Tensor::leaf(shape, xs);
            return loss_of(t).item();
        },
        x0, scalar(1e-4));
    for (size_t i = 0; i < x0.size(); ++i) {
        double a = leaf.grad()[i];
        double b = fd[i];
        double denom = std::max({std::abs(a), std::abs(b), 1e-6});
        INFO("index " << i << " analytic " << a << " fd " << b);
        CHECK(std::abs(a - b) / denom < tol);
    }
}

}  // namespace

TEST_CASE("matmul identity returns operand") {
    Rng rng(7);
    Tensor eye = Tensor::leaf({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    for (int cols : {1, 4, 9}) {
        Tensor a = Tensor::leaf({3, cols}, random_vec(static_cast<size_t>(3 * cols), rng));
        Tensor out = matmul(eye, a);
        REQUIRE(out.shape() == Shape{3, cols});
        for (size_t i = 0; i < out.size(); ++i) CHECK(out.at(i) == Catch::Approx(a.at(i)).margin(0));
    }
}

TEST_CASE("max over rows is componentwise max") {
    Tensor x = Tensor::leaf({2, 2}, {1, 2, 5, 0});
    Tensor m = max_over_rows(x);
    CHECK(m.at(0) == 5);
    CHECK(m.at(1) == 2);
}

TEST_CASE("conv1d with impulse kernel is identity") {
    Rng rng(11);
    Tensor x = Tensor::leaf({1, 9}, random_vec(9, rng));
    Tensor w = Tensor::leaf({1, 1, 3}, {0, 1, 0});
    Tensor b = Tensor::leaf({1}, {0});
    Tensor y = conv1d(x, w, b, 1, 1);
    REQUIRE(y.shape() == x.shape());
    for (size_t i = 0; i < x.size(); ++i) CHECK(y.at(i) == Catch::Approx(x.at(i)).margin(0));
}

TEST_CASE("shape mismatch names the primitive and both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3, 3});
    try {
        add(a, b);
        FAIL("expected failure");
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        CHECK(msg.find("add") != std::string::npos);
        CHECK(msg.find("(2,3)") != std::string::npos);
        CHECK(msg.find("(3,3)") != std::string::npos);
    }
    CHECK_THROWS_AS(matmul(a, Tensor::zeros({2, 2})), std::invalid_argument);
    CHECK_THROWS_AS(conv1d(a, Tensor::zeros({1, 1, 3}), Tensor::zeros({1})), std::invalid_argument);
}

TEST_CASE("backward of sum of squares") {
    Tensor w = Tensor::leaf({2}, {1, 2}, true, "w");
    Tensor loss = sum_all(mul(w, w));
    backward(loss);
    CHECK(w.grad()[0] == Catch::Approx(2.0));
    CHECK(w.grad()[1] == Catch::Approx(4.0));
}

TEST_CASE("loss independent of parameter leaves zero gradient") {
    ParameterStore ps("net");
    Rng rng(3);
    Tensor w = ps.create("w", {4}, 4, rng);
    Tensor x = Tensor::leaf({4}, random_vec(4, rng));
    Tensor loss = sum_all(mul(x, x));
    std::vector<ParameterStore*> stores{&ps};
    backward(loss, stores);
    for (scalar g : w.grad()) CHECK(g == 0);
    CHECK(w.grad_valid());
}

TEST_CASE("non-scalar loss rejected") {
    Tensor w = Tensor::leaf({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(mul(w, w)), std::invalid_argument);
}

TEST_CASE("gradient checks against central differences", "[grad]") {
    Rng rng(1234);

    SECTION("add/sub/mul/scale chain") {
        Tensor c = Tensor::leaf({6}, random_vec(6, rng));
        check_grad({6}, [&](const Tensor& x) { return sum_all(mul(add(x, c), sub(scale(x, scalar(0.7)), c))); }, rng);
    }
    SECTION("silu") {
        check_grad({8}, [&](const Tensor& x) { return sum_all(silu(x)); }, rng, 1e-4, -2.0, 2.0);
    }
    SECTION("mean_all and mse") {
        Tensor tgt = Tensor::leaf({7}, random_vec(7, rng));
        check_grad({7}, [&](const Tensor& x) { return mse(x, tgt); }, rng);
        check_grad({7}, [&](const Tensor& x) { return mean_all(mul(x, x)); }, rng);
    }
    SECTION("matmul both operands") {
        Tensor b = Tensor::leaf({4, 3}, random_vec(12, rng));
        check_grad({2, 4}, [&](const Tensor& x) { return sum_all(mul(matmul(x, b), matmul(x, b))); }, rng);
        Tensor a = Tensor::leaf({2, 4}, random_vec(8, rng));
        check_grad({4, 3}, [&](const Tensor& x) { return sum_all(mul(matmul(a, x), matmul(a, x))); }, rng);
    }
    SECTION("linear_rows all operands") {
        Tensor w = Tensor::leaf({3, 5}, random_vec(15, rng));
        Tensor b = Tensor::leaf({3}, random_vec(3, rng));
        check_grad({4, 5}, [&](const Tensor& x) { return sum_all(mul(linear_rows(x, w, b), linear_rows(x, w, b))); },
                   rng);
        Tensor xin = Tensor::leaf({4, 5}, random_vec(20, rng));
        check_grad({3, 5}, [&](const Tensor& w2) { return mse(linear_rows(xin, w2, b), Tensor::zeros({4, 3})); },
                   rng);
        check_grad({3}, [&](const Tensor& b2) { return mse(linear_rows(xin, w, b2), Tensor::zeros({4, 3})); }, rng);
    }
    SECTION("conv1d stride 1 and 2, all operands") {
        for (int stride : {1, 2}) {
            Tensor w = Tensor::leaf({3, 2, 3}, random_vec(18, rng));
            Tensor b = Tensor::leaf({3}, random_vec(3, rng));
            check_grad({2, 8}, [&](const Tensor& x) {
                Tensor y = conv1d(x, w, b, stride, 1);
                return sum_all(mul(y, y));
            }, rng);
            Tensor xin = Tensor::leaf({2, 8}, random_vec(16, rng));
            check_grad({3, 2, 3}, [&](const Tensor& w2) {
                Tensor y = conv1d(xin, w2, b, stride, 1);
                return sum_all(mul(y, y));
            }, rng);
            check_grad({3}, [&](const Tensor& b2) {
                Tensor y = conv1d(xin, w, b2, stride, 1);
                return sum_all(mul(y, y));
            }, rng);
        }
    }
    SECTION("upsample2") {
        check_grad({3, 4}, [&](const Tensor& x) { return sum_all(mul(upsample2(x), upsample2(x))); }, rng);
    }
    SECTION("transpose reshape slice concat stack repeat") {
        check_grad({3, 4}, [&](const Tensor& x) { return sum_all(mul(transpose(x), transpose(x))); }, rng);
        check_grad({12}, [&](const Tensor& x) { return mse(reshape(x, {3, 4}), Tensor::zeros({3, 4})); }, rng);
        check_grad({9}, [&](const Tensor& x) { return sum_all(mul(slice_vec(x, 2, 4), slice_vec(x, 2, 4))); }, rng);
        Tensor other = Tensor::leaf({3}, random_vec(3, rng));
        check_grad({5}, [&](const Tensor& x) {
            Tensor c = concat_vec({x, other, x});
            return sum_all(mul(c, c));
        }, rng);
        Tensor row4 = Tensor::leaf({4}, random_vec(4, rng));
        check_grad({4}, [&](const Tensor& x) {
            Tensor s = stack_rows({x, row4, x});
            return sum_all(mul(s, s));
        }, rng);
        check_grad({3}, [&](const Tensor& x) { return sum_all(mul(repeat_cols(x, 5), repeat_cols(x, 5))); }, rng);
        Tensor blk = Tensor::leaf({2, 4}, random_vec(8, rng));
        check_grad({3, 4}, [&](const Tensor& x) {
            Tensor c = concat_channels(x, blk);
            return sum_all(mul(c, c));
        }, rng);
    }
    SECTION("film_mod all operands") {
        Tensor s = Tensor::leaf({3}, random_vec(3, rng));
        Tensor h = Tensor::leaf({3}, random_vec(3, rng));
        Tensor xin = Tensor::leaf({3, 5}, random_vec(15, rng));
        check_grad({3, 5}, [&](const Tensor& x) { return sum_all(mul(film_mod(x, s, h), film_mod(x, s, h))); }, rng);
        check_grad({3}, [&](const Tensor& s2) { return mse(film_mod(xin, s2, h), Tensor::zeros({3, 5})); }, rng);
        check_grad({3}, [&](const Tensor& h2) { return mse(film_mod(xin, s, h2), Tensor::zeros({3, 5})); }, rng);
    }
    SECTION("group_norm all operands") {
        Tensor g = Tensor::leaf({4}, random_vec(4, rng, 0.5, 1.5));
        Tensor b = Tensor::leaf({4}, random_vec(4, rng));
        Tensor xin = Tensor::leaf({4, 3}, random_vec(12, rng));
        check_grad({4, 3}, [&](const Tensor& x) { return mse(group_norm(x, 2, g, b), Tensor::zeros({4, 3})); }, rng,
                   2e-4);
        check_grad({4}, [&](const Tensor& g2) { return mse(group_norm(xin, 2, g2, b), Tensor::zeros({4, 3})); }, rng);
        check_grad({4}, [&](const Tensor& b2) { return mse(group_norm(xin, 2, g, b2), Tensor::zeros({4, 3})); }, rng);
    }
    SECTION("layer_norm and layer_norm_rows") {
        Tensor g = Tensor::leaf({5}, random_vec(5, rng, 0.5, 1.5));
        Tensor b = Tensor::leaf({5}, random_vec(5, rng));
        check_grad({5}, [&](const Tensor& x) { return mse(layer_norm(x, g, b), Tensor::zeros({5})); }, rng, 2e-4);
        check_grad({3, 5}, [&](const Tensor& x) { return mse(layer_norm_rows(x, g, b), Tensor::zeros({3, 5})); }, rng,
                   2e-4);
        Tensor xin = Tensor::leaf({3, 5}, random_vec(15, rng));
        check_grad({5}, [&](const Tensor& g2) { return mse(layer_norm_rows(xin, g2, b), Tensor::zeros({3, 5})); },
                   rng);
        check_grad({5}, [&](const Tensor& b2) { return mse(layer_norm_rows(xin, g, b2), Tensor::zeros({3, 5})); },
                   rng);
    }
    SECTION("max_over_rows") {
        check_grad({4, 3}, [&](const Tensor& x) { return sum_all(mul(max_over_rows(x), max_over_rows(x))); }, rng);
    }
}

TEST_CASE("max-reduce gradient routes to lowest index on ties") {
    Tensor x = Tensor::leaf({3, 2}, {5, 1, 5, 2, 3, 2}, true);
    Tensor loss = sum_all(max_over_rows(x));
    backward(loss);
    // column 0: rows 0 and 1 tie at 5 -> row 0 wins; column 1: rows 1 and 2 tie at 2 -> row 1 wins
    CHECK(x.grad()[0] == 1);
    CHECK(x.grad()[2] == 0);
    CHECK(x.grad()[1] == 0);
    CHECK(x.grad()[3] == 1);
    CHECK(x.grad()[5] == 0);
}

TEST_CASE("backward is deterministic bit for bit") {
    auto run = [] {
        Rng rng(99);
        Tensor x = Tensor::leaf({6}, random_vec(6, rng), true);
        Tensor c = Tensor::leaf({6}, random_vec(6, rng));
        Tensor h = silu(add(mul(x, c), scale(x, scalar(0.3))));
        Tensor loss = mse(h, c);
        backward(loss);
        return x.grad();
    };
    auto g1 = run();
    auto g2 = run();
    REQUIRE(g1.size() == g2.size());
    for (size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("two-layer net end-to-end gradient matches finite differences") {
    Rng rng(42);
    ParameterStore ps("net");
    Tensor w1 = ps.create("w1", {5, 4}, 4, rng);
    Tensor b1 = ps.create("b1", {5}, 4, rng);
    Tensor w2 = ps.create("w2", {3, 5}, 5, rng);
    Tensor b2 = ps.create("b2", {3}, 5, rng);
    Tensor x = Tensor::leaf({4}, random_vec(4, rng));
    Tensor target = Tensor::leaf({3}, random_vec(3, rng));

    auto forward = [&](const Tensor& w1t, const Tensor& b1t, const Tensor& w2t, const Tensor& b2t) {
        Tensor h = silu(linear_vec(x, w1t, b1t));
        return mse(linear_vec(h, w2t, b2t), target);
    };

    Tensor loss = forward(w1, b1, w2, b2);
    std::vector<ParameterStore*> stores{&ps};
    backward(loss, stores);

    // finite differences over every parameter of every tensor
    for (Tensor p : {w1, b1, w2, b2}) {
        auto base = p.data();
        auto fd = central_difference(
            [&](const std::vector<scalar>& xs) {
                Tensor t = Tensor::leaf(p.shape(), xs);
                if (p.node() == w1.node()) return forward(t, b1.detach(), w2.detach(), b2.detach()).item();
                if (p.node() == b1.node()) return forward(w1.detach(), t, w2.detach(), b2.detach()).item();
                if (p.node() == w2.node()) return forward(w1.detach(), b1.detach(), t, b2.detach()).item();
                return forward(w1.detach(), b1.detach(), w2.detach(), t).item();
            },
            base, scalar(1e-4));
        for (size_t i = 0; i < base.size(); ++i) {
            double denom = std::max({std::abs(fd[i]), std::abs((double)p.grad()[i]), 1e-6});
            CHECK(std::abs(p.grad()[i] - fd[i]) / denom < 1e-4);
        }
    }
}

TEST_CASE("NoGrad suppresses graph construction") {
    Tensor w = Tensor::leaf({3}, {1, 2, 3}, true);
    Tensor out;
    {
        NoGrad ng;
        out = sum_all(mul(w, w));
    }
    CHECK_FALSE(out.tracked());
}
