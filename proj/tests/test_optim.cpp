#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dreamdiff/optim.hpp"

using namespace dreamdiff;

TEST_CASE("adam single step from zero moments moves by -lr") {
    ParameterStore ps;
    Tensor w = ps.add_param("w", Tensor::leaf({1}, {0.5}, true, "w"));
    Adam opt({&ps}, {.lr = scalar(0.01)});
    w.grad()[0] = 1;
    w.node()->grad_valid = true;
    opt.step();
    // mhat = vhat = 1 after bias correction -> delta = -lr / (1 + eps)
    CHECK(w.data()[0] == Catch::Approx(0.5 - 0.01).epsilon(1e-6));
    CHECK(opt.step_count() == 1);
    CHECK(w.grad()[0] == 0);
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
    ParameterStore ps;
    Tensor w = ps.add_param("w", Tensor::leaf({3}, {1, -2, 3}, true, "w"));
    Adam opt({&ps});
    ps.zero_grads();
    opt.step();
    CHECK(w.data()[0] == 1);
    CHECK(w.data()[1] == -2);
    CHECK(w.data()[2] == 3);
}

TEST_CASE("adam descends against a constant gradient") {
    ParameterStore ps;
    Tensor w = ps.add_param("w", Tensor::leaf({1}, {0.0}, true, "w"));
    Adam opt({&ps}, {.lr = scalar(0.05)});
    for (int i = 0; i < 50; ++i) {
        w.grad().assign(1, scalar(2.0));
        w.node()->grad_valid = true;
        opt.step();
    }
    CHECK(w.data()[0] < -0.5);  // moved opposite the gradient sign

    ParameterStore ps2;
    Tensor u = ps2.add_param("u", Tensor::leaf({1}, {0.0}, true, "u"));
    Adam opt2({&ps2}, {.lr = scalar(0.05)});
    for (int i = 0; i < 50; ++i) {
        u.grad().assign(1, scalar(-2.0));
        u.node()->grad_valid = true;
        opt2.step();
    }
    CHECK(u.data()[0] > 0.5);
}

TEST_CASE("adam fails on missing gradient") {
    ParameterStore ps;
    ps.add_param("w", Tensor::leaf({2}, {0, 0}, true, "w"));
    Adam opt({&ps});
    CHECK_THROWS_WITH(opt.step(), Catch::Matchers::ContainsSubstring("w"));
}

TEST_CASE("backward flags non-finite parameter gradients by name") {
    ParameterStore ps("net");
    Rng rng(5);
    Tensor w = ps.create("w", {2}, 2, rng);
    // force a NaN into the forward value so the gradient is NaN
    Tensor bad = Tensor::leaf({2}, {std::numeric_limits<scalar>::quiet_NaN(), 1.0});
    Tensor loss = mean_all(mul(w, bad));
    std::vector<ParameterStore*> stores{&ps};
    CHECK_THROWS_WITH(backward(loss, stores), Catch::Matchers::ContainsSubstring("net.w"));
}

TEST_CASE("ema update blends toward live parameters") {
    ParameterStore ps;
    Tensor w = ps.add_param("w", Tensor::leaf({1}, {0.0}, true, "w"));

    SECTION("decay 0 copies live") {
        EmaShadow ema({&ps}, 0);
        w.data()[0] = 2;
        ema.update();
        CHECK(ema.values()[0][0] == 2);
    }
    SECTION("decay 1 never moves") {
        EmaShadow ema({&ps}, 1);
        w.data()[0] = 2;
        ema.update();
        CHECK(ema.values()[0][0] == 0);
    }
    SECTION("decay 0.5 halves the distance") {
        EmaShadow ema({&ps}, scalar(0.5));
        w.data()[0] = 2;
        ema.update();
        CHECK(ema.values()[0][0] == Catch::Approx(1.0));
    }
    SECTION("contraction toward live for d<1") {
        EmaShadow ema({&ps}, scalar(0.9));
        w.data()[0] = 1;
        double dist = 1.0;
        for (int i = 0; i < 5; ++i) {
            ema.update();
            double nd = std::abs(ema.values()[0][0] - 1.0);
            CHECK(nd == Catch::Approx(0.9 * dist).epsilon(1e-12));
            dist = nd;
        }
    }
}

TEST_CASE("parameter store rejects duplicates and keeps order") {
    ParameterStore ps("enc");
    Rng rng(1);
    ps.create("a", {2}, 2, rng);
    ps.create("b", {3}, 3, rng);
    CHECK_THROWS_AS(ps.create("a", {2}, 2, rng), std::invalid_argument);
    REQUIRE(ps.size() == 2);
    CHECK(ps.param_name(0) == "a");
    CHECK(ps.param_name(1) == "b");
    CHECK(ps.get("b").shape() == Shape{3});
    CHECK(ps.param(0).label() == "enc.a");
}
