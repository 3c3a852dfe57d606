#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "ulab/gradcheck.hpp"
#include "ulab/rng.hpp"
#include "ulab/tensor.hpp"

using namespace ulab;
using ag::Tensor;
using T64 = ag::Tensor<double>;
using Tape64 = ag::GradTape<double>;

namespace {

T64 random_tensor(ag::Shape shape, Rng& rng, bool requires_grad = false, double scale = 1.0) {
    std::vector<double> v(static_cast<size_t>(ag::numel(shape)));
    for (auto& x : v) x = rng.normal(0.0, scale);
    return T64::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("matmul identity") {
    auto a = T64::from({2, 2}, {1, 2, 3, 4});
    auto eye = T64::from({2, 2}, {1, 0, 0, 1});
    auto c = ag::matmul(a, eye);
    CHECK(c.values() == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("softmax symmetry") {
    auto x = T64::from({3}, {0, 0, 0});
    auto y = ag::softmax(x);
    for (double v : y.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("gelu at zero") {
    auto x = T64::from({1}, {0.0});
    CHECK(ag::gelu(x).item() == 0.0);
}

TEST_CASE("shape mismatch names the op and shapes") {
    auto a = T64::zeros({2, 3});
    auto b = T64::zeros({2, 3});
    try {
        ag::matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("(2,3)") != std::string::npos);
    }
}

TEST_CASE("strict mode rejects non-finite input") {
    auto a = T64::from({2}, {1.0, std::numeric_limits<double>::infinity()});
    auto b = T64::from({2}, {1.0, 1.0});
    CHECK_NOTHROW(ag::add(a, b));  // lenient by default
    ag::StrictNumerics guard;
    CHECK_THROWS_AS(ag::add(a, b), NumericError);
}

TEST_CASE("backward of sum of squares") {
    auto w = T64::from({1}, {3.0}, /*requires_grad=*/true);
    Tape64 tape;
    auto y = ag::sum_all(ag::mul(w, w));
    tape.backward(y);
    CHECK(w.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("backward requires lineage") {
    auto c = T64::scalar(5.0);
    Tape64 tape;
    CHECK_THROWS_AS(tape.backward(c), AutogradError);
    try {
        tape.backward(c);
    } catch (const AutogradError& e) {
        CHECK(std::string(e.what()).find("no lineage") != std::string::npos);
    }
}

TEST_CASE("backward requires scalar root") {
    auto w = T64::from({2}, {1.0, 2.0}, true);
    Tape64 tape;
    auto y = ag::mul(w, w);
    CHECK_THROWS_AS(tape.backward(y), AutogradError);
}

TEST_CASE("strict double backward errors, accumulate mode adds") {
    auto w = T64::from({1}, {3.0}, true);
    {
        Tape64 tape;
        auto y = ag::sum_all(ag::mul(w, w));
        tape.backward(y);
        CHECK_THROWS_AS(tape.backward(y), AutogradError);
    }
    w.clear_grad();
    {
        Tape64 tape;
        auto y = ag::sum_all(ag::mul(w, w));
        tape.backward(y);
        tape.backward(y, Tape64::Accumulate::allow);
        CHECK(w.grad()[0] == doctest::Approx(12.0));
    }
}

TEST_CASE("one reverse visit per op") {
    auto w = T64::from({4}, {0.1, 0.2, 0.3, 0.4}, true);
    Tape64 tape;
    auto a = ag::mul(w, w);       // 1
    auto b = ag::gelu(a);         // 2
    auto c = ag::softmax(b);      // 3
    auto d = ag::sum_all(c);      // 4 (reshape) + 5 (sum)
    tape.backward(d);
    CHECK(tape.size() == 5);
    CHECK(tape.last_backward_visits() == 5);
}

TEST_CASE("lineage recording does not change forward values") {
    Rng rng(7);
    auto x = random_tensor({3, 4}, rng, true);
    auto g = random_tensor({4}, rng, true);
    auto b = random_tensor({4}, rng, true);

    std::vector<double> with_tape;
    {
        Tape64 tape;
        with_tape = ag::layer_norm(x, g, b).values();
    }
    const std::vector<double> without = ag::layer_norm(x, g, b).values();
    CHECK(with_tape == without);
}

TEST_CASE("finite_diff_check basics") {
    auto x = T64::from({3}, {0.5, -1.0, 2.0});
    auto f = [](const T64& t) { return ag::sum_all(t); };
    CHECK(ag::finite_diff_check<double>(f, x) < 1e-10);
    CHECK_THROWS_AS(ag::finite_diff_check<double>(f, x, 0.0), ConfigError);
}

TEST_CASE("finite_diff_check rejects non-finite f") {
    auto x = T64::from({1}, {-1.0});
    auto f = [](const T64& t) {
        auto v = ag::scale(t, 1.0);
        auto bad = T64::from({1}, {std::log(t.values()[0])});  // nan for negative input
        return ag::add(v, bad);
    };
    CHECK_THROWS_AS(ag::finite_diff_check<double>(f, x), NumericError);
}

TEST_CASE("gradcheck: every op against central differences") {
    Rng rng(42);
    const double tol = 1e-4;

    for (int trial = 0; trial < 3; ++trial) {
        const int m = 2 + static_cast<int>(rng.randint(0, 2));
        const int k = 2 + static_cast<int>(rng.randint(0, 2));
        const int n = 2 + static_cast<int>(rng.randint(0, 2));

        SUBCASE("") {}  // keep doctest quiet about loop structure

        // matmul, both operands, both layouts
        {
            auto b = random_tensor({k, n}, rng);
            auto f = [&](const T64& t) { return ag::sum_all(ag::matmul(t, b)); };
            CHECK(ag::finite_diff_check<double>(f, random_tensor({m, k}, rng)) < tol);
            auto a = random_tensor({m, k}, rng);
            auto fb = [&](const T64& t) { return ag::sum_all(ag::matmul(a, t)); };
            CHECK(ag::finite_diff_check<double>(fb, random_tensor({k, n}, rng)) < tol);
            auto ft = [&](const T64& t) { return ag::sum_all(ag::matmul(a, t, true)); };
            CHECK(ag::finite_diff_check<double>(ft, random_tensor({n, k}, rng)) < tol);
        }
        // add (equal + bias broadcast), sub, mul (equal + scalar), scale
        {
            auto other = random_tensor({m, n}, rng);
            auto fa = [&](const T64& t) { return ag::sum_all(ag::gelu(ag::add(t, other))); };
            CHECK(ag::finite_diff_check<double>(fa, random_tensor({m, n}, rng)) < tol);
            auto bias = random_tensor({n}, rng);
            auto fbias = [&](const T64& t) { return ag::sum_all(ag::gelu(ag::add(other, t))); };
            CHECK(ag::finite_diff_check<double>(fbias, bias) < tol);
            auto fs = [&](const T64& t) { return ag::sum_all(ag::gelu(ag::sub(t, other))); };
            CHECK(ag::finite_diff_check<double>(fs, random_tensor({m, n}, rng)) < tol);
            auto fm = [&](const T64& t) { return ag::sum_all(ag::mul(t, other)); };
            CHECK(ag::finite_diff_check<double>(fm, random_tensor({m, n}, rng)) < tol);
            auto fscalar = [&](const T64& t) { return ag::sum_all(ag::mul(other, t)); };
            CHECK(ag::finite_diff_check<double>(fscalar, random_tensor({1}, rng)) < tol);
            auto fsc = [&](const T64& t) { return ag::sum_all(ag::scale(t, -2.5)); };
            CHECK(ag::finite_diff_check<double>(fsc, random_tensor({m, n}, rng)) < tol);
        }
        // embedding_lookup (gradient w.r.t. the table)
        {
            std::vector<int> ids{0, 2, 1, 2};
            auto fe = [&](const T64& t) { return ag::sum_all(ag::gelu(ag::embedding_lookup(t, ids))); };
            CHECK(ag::finite_diff_check<double>(fe, random_tensor({3, k}, rng)) < tol);
        }
        // layer_norm w.r.t. x, gamma, beta
        {
            auto x = random_tensor({m, 4}, rng);
            auto g = random_tensor({4}, rng, false, 0.5);
            auto b = random_tensor({4}, rng, false, 0.5);
            auto fx = [&](const T64& t) { return ag::sum_all(ag::gelu(ag::layer_norm(t, g, b))); };
            CHECK(ag::finite_diff_check<double>(fx, random_tensor({m, 4}, rng)) < tol);
            auto fg = [&](const T64& t) { return ag::sum_all(ag::gelu(ag::layer_norm(x, t, b))); };
            CHECK(ag::finite_diff_check<double>(fg, g) < tol);
            auto fbeta = [&](const T64& t) { return ag::sum_all(ag::gelu(ag::layer_norm(x, g, t))); };
            CHECK(ag::finite_diff_check<double>(fbeta, b) < tol);
        }
        // activations and reductions; weight the summands so gradients differ per coordinate
        {
            auto w = random_tensor({m, n}, rng);
            auto weighted = [&](T64 y) { return ag::sum_all(ag::mul(y, w)); };
            auto fgelu = [&](const T64& t) { return weighted(ag::gelu(t)); };
            CHECK(ag::finite_diff_check<double>(fgelu, random_tensor({m, n}, rng)) < tol);
            auto fsm = [&](const T64& t) { return weighted(ag::softmax(t)); };
            CHECK(ag::finite_diff_check<double>(fsm, random_tensor({m, n}, rng)) < tol);
            auto fls = [&](const T64& t) { return weighted(ag::log_softmax(t)); };
            CHECK(ag::finite_diff_check<double>(fls, random_tensor({m, n}, rng)) < tol);
            auto fsp = [&](const T64& t) { return weighted(ag::softplus(t)); };
            CHECK(ag::finite_diff_check<double>(fsp, random_tensor({m, n}, rng)) < tol);
            auto frs = [&](const T64& t) { return weighted(ag::reshape(t, {m, n})); };
            CHECK(ag::finite_diff_check<double>(frs, random_tensor({n, m}, rng)) < tol);

            auto wsum = random_tensor({n}, rng);
            auto fsum = [&](const T64& t) {
                return ag::sum_all(ag::mul(ag::sum_over_axis(t, 0), wsum));
            };
            CHECK(ag::finite_diff_check<double>(fsum, random_tensor({m, n}, rng)) < tol);
            auto fmax = [&](const T64& t) {
                return ag::sum_all(ag::mul(ag::max_over_axis(t, 0), wsum));
            };
            CHECK(ag::finite_diff_check<double>(fmax, random_tensor({m, n}, rng)) < tol);
            auto fslice = [&](const T64& t) {
                return ag::sum_all(ag::gelu(ag::slice(t, 1, 1, n - 1)));
            };
            CHECK(ag::finite_diff_check<double>(fslice, random_tensor({m, n}, rng)) < tol);
        }
    }
}

TEST_CASE("gradcheck: random 3-layer mlp") {
    Rng rng(99);
    const int d0 = 5, d1 = 7, d2 = 6, d3 = 4;
    auto w1 = random_tensor({d0, d1}, rng, false, 0.5);
    auto b1 = random_tensor({d1}, rng, false, 0.1);
    auto w2 = random_tensor({d1, d2}, rng, false, 0.5);
    auto b2 = random_tensor({d2}, rng, false, 0.1);
    auto w3 = random_tensor({d2, d3}, rng, false, 0.5);
    auto x = random_tensor({3, d0}, rng);
    auto target = random_tensor({3, d3}, rng);

    auto net = [&](const T64& w1t, const T64& xt) {
        auto h1 = ag::gelu(ag::add(ag::matmul(xt, w1t), b1));
        auto h2 = ag::gelu(ag::add(ag::matmul(h1, w2), b2));
        auto out = ag::log_softmax(ag::matmul(h2, w3));
        return ag::sum_all(ag::mul(out, target));
    };

    auto f_w1 = [&](const T64& t) { return net(t, x); };
    CHECK(ag::finite_diff_check<double>(f_w1, w1) < 1e-4);
    auto f_x = [&](const T64& t) { return net(w1, t); };
    CHECK(ag::finite_diff_check<double>(f_x, x) < 1e-4);
}

TEST_CASE("no gradients flow to constants") {
    auto w = T64::from({2}, {1.0, 2.0}, true);
    auto c = T64::from({2}, {3.0, 4.0});
    Tape64 tape;
    auto y = ag::sum_all(ag::mul(w, c));
    tape.backward(y);
    CHECK(w.has_grad());
    CHECK_FALSE(c.has_grad());
}

TEST_CASE("constant_view shares values but takes no grad") {
    auto w = T64::from({2}, {1.0, 2.0}, true);
    auto v = w.constant_view();
    CHECK(v.values().data() == w.values().data());
    Tape64 tape;
    auto y = ag::sum_all(ag::mul(v, v));
    CHECK_FALSE(y.requires_grad());
    CHECK_THROWS_AS(tape.backward(y), AutogradError);
}

TEST_CASE("max_over_axis ties route to the lowest index") {
    auto x = T64::from({3}, {1.0, 1.0, 1.0}, true);
    Tape64 tape;
    auto y = ag::max_over_axis(x, 0);
    tape.backward(y);
    CHECK(x.grad() == std::vector<double>{1.0, 0.0, 0.0});
}
