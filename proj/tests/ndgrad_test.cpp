#include <cmath>

#include "doctest.h"
#include "fever/errors.hpp"
#include "fever/ndgrad/gradcheck.hpp"
#include "fever/ndgrad/ops.hpp"
#include "gradient_cases.hpp"
#include "test_util.hpp"

using namespace fever;
using namespace fever::ndgrad;
using fever::testing::random_array;

TEST_CASE("relu and l2_normalize on literal inputs") {
    Tape<double> tape(Mode::eval);
    auto r = relu(tape.constant(Array<double>::from({3}, {-1, 0, 2})));
    CHECK(r.value() == Array<double>::from({3}, {0, 0, 2}));

    auto n = l2_normalize(tape.constant(Array<double>::from({2}, {3, 4})));
    CHECK(n.value()[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(n.value()[1] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("conv2d with a centred identity kernel leaves the input unchanged") {
    Tape<double> tape(Mode::eval);
    auto x = random_array({1, 1, 3, 3}, 5);
    auto y = conv2d(tape.constant(x), tape.constant(Array<double>::ones({1, 1, 1, 1})), 1, Padding::same);
    CHECK(y.value() == x);

    Array<double> k3({1, 1, 3, 3});
    k3[4] = 1.0;
    auto y3 = conv2d(tape.constant(x), tape.constant(k3), 1, Padding::same);
    CHECK(y3.value() == x);
}

TEST_CASE("conv2d output geometry") {
    Tape<float> tape(Mode::eval);
    auto x = tape.constant(Array<float>::zeros({2, 3, 32, 32}));
    auto w = tape.constant(Array<float>::zeros({16, 3, 3, 3}));
    CHECK(conv2d(x, w, 2, Padding::same).shape() == Shape{2, 16, 16, 16});
    CHECK(conv2d(x, w, 1, Padding::valid).shape() == Shape{2, 16, 30, 30});
    CHECK(conv2d(x, w, 2, Padding::valid).shape() == Shape{2, 16, 15, 15});
}

TEST_CASE("backward of simple losses") {
    SUBCASE("sum gives ones") {
        Tape<double> tape;
        auto x = tape.leaf(random_array({2, 3, 4}, 1));
        tape.backward(sum(x));
        CHECK(tape.grad(x) == Array<double>::ones({2, 3, 4}));
    }
    SUBCASE("half squared norm gives x") {
        Tape<double> tape;
        auto xa = random_array({7}, 2);
        auto x = tape.leaf(xa);
        tape.backward(scale(sum(mul(x, x)), 0.5));
        auto g = tape.grad(x);
        for (std::size_t i = 0; i < xa.size(); ++i) CHECK(g[i] == doctest::Approx(xa[i]).epsilon(1e-15));
    }
    SUBCASE("untouched leaves get zero grads") {
        Tape<double> tape;
        auto x = tape.leaf(random_array({3}, 3));
        auto unused = tape.leaf(random_array({2, 2}, 4));
        tape.backward(sum(x));
        CHECK(tape.grad(unused) == Array<double>::zeros({2, 2}));
    }
}

TEST_CASE("backward error paths") {
    SUBCASE("eval-mode tape") {
        Tape<double> tape(Mode::eval);
        auto x = tape.leaf(random_array({3}, 1));
        CHECK_THROWS_AS(tape.backward(sum(x)), InvariantError);
    }
    SUBCASE("non-scalar loss") {
        Tape<double> tape;
        auto x = tape.leaf(random_array({3}, 1));
        CHECK_THROWS_AS(tape.backward(relu(x)), ShapeError);
    }
    SUBCASE("second backward") {
        Tape<double> tape;
        auto x = tape.leaf(random_array({3}, 1));
        auto l = sum(x);
        tape.backward(l);
        CHECK_THROWS_AS(tape.backward(l), InvariantError);
    }
}

TEST_CASE("shape mismatch errors name the op and both shapes") {
    Tape<double> tape;
    auto a = tape.leaf(Array<double>::zeros({2, 3}));
    auto b = tape.leaf(Array<double>::zeros({3, 2}));
    try {
        add(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("add") != std::string::npos);
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[3x2]") != std::string::npos);
    }
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
    CHECK_THROWS_AS(conv2d(a, b, 1, Padding::same), ShapeError);
}

TEST_CASE("non-finite outputs raise a numeric error") {
    Tape<double> tape;
    auto x = tape.leaf(Array<double>::from({2}, {1e300, 1e300}));
    CHECK_THROWS_AS(mul(x, x), NumericError);
}

TEST_CASE("l2_normalize yields unit rows and guards degenerate rows") {
    Tape<double> tape(Mode::eval);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto y = l2_normalize(tape.constant(random_array({6, 5}, seed)));
        for (std::size_t r = 0; r < 6; ++r) {
            double s = 0;
            for (std::size_t j = 0; j < 5; ++j) s += y.value()[r * 5 + j] * y.value()[r * 5 + j];
            CHECK(std::sqrt(s) == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    auto z = l2_normalize(tape.constant(Array<double>::from({2, 2}, {0, 0, 1e-13, 0})));
    CHECK(z.value() == Array<double>::zeros({2, 2}));

    Tape<double> train;
    auto x = train.leaf(Array<double>::zeros({1, 3}));
    train.backward(sum(l2_normalize(x)));
    CHECK(train.grad(x) == Array<double>::zeros({1, 3}));
}

TEST_CASE("batchnorm2d eval mode is a bitwise-deterministic function of input and running stats") {
    Array<double> rm = random_array({3}, 7), rv = random_array({3}, 8, 0.5, 2.0);
    auto x = random_array({4, 3, 2, 2}, 9);
    auto run = [&] {
        Tape<double> tape(Mode::eval);
        return batchnorm2d(tape.constant(x), tape.constant(Array<double>::ones({3})),
                           tape.constant(Array<double>::zeros({3})), rm, rv)
            .value();
    };
    const auto rm0 = rm, rv0 = rv;
    CHECK(bitwise_equal(run(), run()));
    CHECK(rm == rm0);
    CHECK(rv == rv0);
}

TEST_CASE("batchnorm2d train mode normalises per channel and updates running stats") {
    Tape<double> tape;
    Array<double> rm = Array<double>::zeros({2}), rv = Array<double>::ones({2});
    auto x = random_array({5, 2, 3, 3}, 11, 2.0, 4.0);
    auto y = batchnorm2d(tape.leaf(x), tape.leaf(Array<double>::ones({2})), tape.leaf(Array<double>::zeros({2})), rm, rv);
    for (std::size_t c = 0; c < 2; ++c) {
        double s = 0, s2 = 0;
        for (std::size_t n = 0; n < 5; ++n)
            for (std::size_t i = 0; i < 9; ++i) {
                const double v = y.value()[(n * 2 + c) * 9 + i];
                s += v;
                s2 += v * v;
            }
        CHECK(s / 45 == doctest::Approx(0.0).epsilon(1e-10));
        CHECK(s2 / 45 == doctest::Approx(1.0).epsilon(1e-4));
        CHECK(rm[c] > 0.2);
        CHECK(rm[c] < 0.4);
    }
}

TEST_CASE("dropout eval is the identity and train rate matches") {
    Rng rng(3);
    auto x = random_array({200, 50}, 4, 1.0, 2.0);
    {
        Tape<double> tape(Mode::eval);
        CHECK(dropout(tape.constant(x), 0.3, rng).value() == x);
    }
    for (double rate : {0.1, 0.2, 0.5}) {
        Tape<double> tape;
        auto y = dropout(tape.leaf(x), rate, rng).value();
        std::size_t zeros = 0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            if (y[i] == 0.0) {
                ++zeros;
            } else {
                CHECK(y[i] == doctest::Approx(x[i] / (1.0 - rate)).epsilon(1e-12));
            }
        }
        const double n = static_cast<double>(y.size());
        const double sigma = std::sqrt(rate * (1 - rate) / n);
        CHECK(std::abs(zeros / n - rate) <= 3 * sigma);
    }
}

TEST_CASE("finite_diff_check on an exact quadratic") {
    const double err = finite_diff_check([](const Var<double>& x) { return sum(mul(x, x)); },
                                         Array<double>::from({2}, {1, 2}));
    CHECK(err <= 1e-8);
}

TEST_CASE("finite_diff_check rejects non-deterministic functions") {
    Rng shared(1);
    ScalarFn f = [&shared](const Var<double>& x) { return sum(dropout(x, 0.5, shared)); };
    CHECK_THROWS_AS(finite_diff_check(f, random_array({10}, 1)), InvariantError);
    CHECK_THROWS_AS(finite_diff_check(f, random_array({10}, 1), 0.0), std::invalid_argument);
}

TEST_CASE("every primitive matches central finite differences over 10 seeds") {
    for (const auto& c : fever::testing::op_gradient_cases()) {
        for (std::uint64_t seed = 1; seed <= 10; ++seed) {
            CAPTURE(c.name);
            CAPTURE(seed);
            CHECK(c.run(seed) <= 1e-4);
        }
    }
}

TEST_CASE("gradients accumulate when a value feeds several consumers") {
    Tape<double> tape;
    auto x = tape.leaf(Array<double>::from({2}, {1, 3}));
    tape.backward(sum(add(mul(x, x), scale(x, 2.0))));
    CHECK(tape.grad(x) == Array<double>::from({2}, {4, 8}));
}
