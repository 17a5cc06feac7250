#include <doctest.h>

#include <cmath>
#include <functional>
#include <numeric>

#include "otok/rng.hpp"
#include "otok/tensor.hpp"

using namespace otok;
using namespace otok::ops;

namespace {

// Weighted sum with fixed random weights so every output coordinate matters.
Tensor probe_sum(const Tensor& y, std::uint64_t seed = 99) {
    Rng rng(seed);
    return reduce_sum(mul(y, rng.normal_tensor(y.shape())));
}

void check_unary(const char* name, const std::function<Tensor(const Tensor&)>& op, const Tensor& x,
                 Real tol = 1e-3) {
    CAPTURE(name);
    const Real err = check_gradient([&](const Tensor& v) { return probe_sum(op(v)); }, x, 1e-4);
    CHECK(err <= tol);
}

}  // namespace

TEST_CASE("forward examples") {
    auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
    auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    auto c = matmul(a, eye);
    CHECK(std::vector<Real>(c.data().begin(), c.data().end()) == std::vector<Real>{1, 2, 3, 4});

    auto s = softmax(Tensor::from({2}, {0, 0}), 0);
    CHECK(s.data()[0] == doctest::Approx(0.5));
    CHECK(s.data()[1] == doctest::Approx(0.5));

    // norm of (3, 4) is 5.
    auto n = l2_normalize(Tensor::from({2}, {3, 4}), 0);
    CHECK(n.data()[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(n.data()[1] == doctest::Approx(0.8).epsilon(1e-12));
    // Unit vectors are fixed points; zero vectors stay zero.
    CHECK(l2_normalize(Tensor::from({2}, {0, 5}), 0).data()[1] == 1.0);
    CHECK(l2_normalize(Tensor::zeros({2}), 0).data()[0] == 0.0);
}

TEST_CASE("shape errors name the op and both shapes") {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({2, 3});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("(2, 3)") != std::string::npos);
    }
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
    CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);
    CHECK_THROWS_AS(slice(a, 1, 2, 5), ShapeError);
    CHECK_THROWS_AS(concat({a, Tensor::zeros({3, 3})}, 1), ShapeError);
    std::vector<std::int64_t> rows{0, 5};
    CHECK_THROWS_AS(gather_rows(a, rows), ShapeError);
}

TEST_CASE("non-finite outputs raise numeric faults") {
    CHECK_THROWS_AS(exp(Tensor::from({1}, {1000.0})), NumericFault);
    CHECK_THROWS_AS(log(Tensor::from({1}, {0.0})), NumericFault);
    CHECK_THROWS_AS(Tensor::from({1}, {std::nan("")}), NumericFault);
}

TEST_CASE("backward examples") {
    auto x = Tensor::from({2, 2}, {1, 2, 3, 4});
    x.set_requires_grad(true);
    auto g = backward(reduce_sum(x))[x];
    for (Real v : g.data()) {
        CHECK(v == 1.0);
    }

    auto y = Tensor::from({2}, {1, 2});
    y.set_requires_grad(true);
    auto gy = backward(reduce_sum(mul(y, y)))[y];
    CHECK(gy.data()[0] == doctest::Approx(2.0));
    CHECK(gy.data()[1] == doctest::Approx(4.0));

    auto z = Tensor::from({3}, {0.3, -1.2, 2.0});
    z.set_requires_grad(true);
    auto gz = backward(reduce_sum(softmax(z, 0)))[z];
    for (Real v : gz.data()) {
        CHECK(std::abs(v) < 1e-15);
    }

    CHECK_THROWS_AS(backward(mul(z, z)), ShapeError);
}

TEST_CASE("check_gradient examples") {
    Rng rng(1);
    auto x = rng.uniform_tensor({4}, -1, 1);
    CHECK(check_gradient([](const Tensor& v) { return reduce_sum(mul(v, v)); }, x, 1e-3) <= 1e-4);

    auto w = rng.normal_tensor({4, 3});
    auto xm = rng.normal_tensor({2, 4});
    CHECK(check_gradient([&](const Tensor& v) { return reduce_sum(matmul(v, w)); }, xm, 1e-3) <= 1e-4);

    CHECK(check_gradient([](const Tensor&) { return Tensor::scalar(3.0); }, x, 1e-3) == 0.0);
}

TEST_CASE("every primitive passes a gradient check") {
    Rng rng(7);
    const auto x = rng.normal_tensor({3, 4});
    const auto pos = rng.uniform_tensor({3, 4}, 0.5, 2.0);
    const auto other = rng.normal_tensor({3, 4});
    const auto row = rng.normal_tensor({4});
    const auto col = rng.normal_tensor({3, 1});
    const auto w = rng.normal_tensor({4, 5});

    check_unary("matmul.lhs", [&](const Tensor& v) { return matmul(v, w); }, x);
    check_unary("matmul.rhs", [&](const Tensor& v) { return matmul(x, v); }, w);
    {
        const auto batched = rng.normal_tensor({2, 3, 4});
        const auto rhs = rng.normal_tensor({2, 4, 2});
        check_unary("matmul.batched.lhs", [&](const Tensor& v) { return matmul(v, rhs); }, batched);
        check_unary("matmul.batched.rhs", [&](const Tensor& v) { return matmul(batched, v); }, rhs);
    }
    check_unary("add", [&](const Tensor& v) { return add(v, other); }, x);
    check_unary("add.suffix", [&](const Tensor& v) { return add(x, v); }, row);
    check_unary("add.general", [&](const Tensor& v) { return add(x, v); }, col);
    check_unary("sub.rhs", [&](const Tensor& v) { return sub(x, v); }, col);
    check_unary("mul.lhs", [&](const Tensor& v) { return mul(v, other); }, x);
    check_unary("mul.suffix", [&](const Tensor& v) { return mul(x, v); }, row);
    check_unary("scale", [](const Tensor& v) { return scale(v, -2.5); }, x);
    check_unary("add_scalar", [](const Tensor& v) { return add_scalar(v, 1.5); }, x);
    check_unary("softmax.0", [](const Tensor& v) { return softmax(v, 0); }, x);
    check_unary("softmax.1", [](const Tensor& v) { return softmax(v, 1); }, x);
    check_unary("log_softmax", [](const Tensor& v) { return log_softmax(v, 1); }, x);
    check_unary("layer_norm.1", [](const Tensor& v) { return layer_norm(v, 1); }, x);
    check_unary("layer_norm.0", [](const Tensor& v) { return layer_norm(v, 0); }, x);
    check_unary("gelu", [](const Tensor& v) { return gelu(v); }, x);
    check_unary("reshape", [](const Tensor& v) { return reshape(v, {2, 6}); }, x);
    check_unary("permute", [](const Tensor& v) { return permute(reshape(v, {3, 2, 2}), {2, 0, 1}); }, x);
    check_unary("concat", [&](const Tensor& v) { return concat({v, other, v}, 1); }, x);
    check_unary("slice", [](const Tensor& v) { return slice(v, 1, 1, 3); }, x);
    {
        std::vector<std::int64_t> rows{2, 0, 2, 1};
        check_unary("gather_rows", [&](const Tensor& v) { return gather_rows(v, rows); }, x);
    }
    {
        std::vector<bool> mask{true, false, false, true};
        check_unary("masked_fill", [&](const Tensor& v) { return masked_fill(v, mask, {4}, -3.0); }, x);
    }
    check_unary("reduce_sum", [](const Tensor& v) { return reduce_sum(v); }, x);
    check_unary("reduce_sum.axis", [](const Tensor& v) { return reduce_sum(v, 0); }, x);
    check_unary("reduce_mean", [](const Tensor& v) { return reduce_mean(v); }, x);
    check_unary("reduce_mean.axis", [](const Tensor& v) { return reduce_mean(v, 1, true); }, x);
    check_unary("l2_normalize", [](const Tensor& v) { return l2_normalize(v, 1); }, x);
    check_unary("exp", [](const Tensor& v) { return exp(v); }, x);
    check_unary("log", [](const Tensor& v) { return log(v); }, pos);
    check_unary("square", [](const Tensor& v) { return square(v); }, x);
    check_unary("clamp", [](const Tensor& v) { return clamp(v, -0.5, 0.5); }, x);
}

TEST_CASE("random-shape gradient sweep up to 64 elements") {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const std::int64_t rows = 1 + rng.uniform_int(8);
        const std::int64_t cols = 1 + rng.uniform_int(8);
        const auto x = rng.normal_tensor({rows, cols});
        check_unary("softmax", [](const Tensor& v) { return softmax(v, -1); }, x);
        check_unary("l2", [](const Tensor& v) { return l2_normalize(v, -1); }, x);
        check_unary("gelu", [](const Tensor& v) { return gelu(v); }, x);
        if (cols > 1) {
            check_unary("layer_norm", [](const Tensor& v) { return layer_norm(v, -1); }, x);
        }
    }
}

TEST_CASE("straight_through forwards the value and routes gradient to the surrogate") {
    auto value = Tensor::from({2}, {5.0, -1.0});
    auto s = Tensor::from({2}, {0.1, 0.2});
    s.set_requires_grad(true);
    auto y = straight_through(value, s);
    CHECK(y.data()[0] == 5.0);
    auto g = backward(reduce_sum(mul(y, Tensor::from({2}, {3.0, 4.0}))))[s];
    CHECK(g.data()[0] == 3.0);
    CHECK(g.data()[1] == 4.0);
}

TEST_CASE("softmax and layer_norm invariants") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto x = rng.normal_tensor({4, 9}, 3.0);
        const auto s = softmax(x, 1);
        for (int r = 0; r < 4; ++r) {
            Real sum = 0;
            for (int c = 0; c < 9; ++c) {
                const Real v = s.at({r, c});
                CHECK(v >= 0.0);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) <= 1e-6);
        }
        const auto ln = layer_norm(x, 1);
        for (int r = 0; r < 4; ++r) {
            Real mean = 0;
            Real var = 0;
            for (int c = 0; c < 9; ++c) {
                mean += ln.at({r, c});
            }
            mean /= 9;
            for (int c = 0; c < 9; ++c) {
                var += (ln.at({r, c}) - mean) * (ln.at({r, c}) - mean);
            }
            var /= 9;
            CHECK(std::abs(mean) <= 1e-5);
            CHECK(std::abs(var - 1.0) <= 1e-4);
        }
    }
}

TEST_CASE("reshape and permute roundtrips are bit-exact") {
    Rng rng(5);
    const auto x = rng.normal_tensor({2, 3, 4, 5});
    const auto back = permute(permute(x, {3, 1, 0, 2}), {2, 1, 3, 0});
    CHECK(back.shape() == x.shape());
    CHECK(std::equal(x.data().begin(), x.data().end(), back.data().begin()));
    const auto r = reshape(reshape(x, {6, -1}), x.shape());
    CHECK(std::equal(x.data().begin(), x.data().end(), r.data().begin()));
}

TEST_CASE("graph is topologically ordered and excludes constants") {
    auto a = Tensor::from({2}, {1, 2});
    a.set_requires_grad(true);
    auto c = Tensor::from({2}, {3, 4});
    auto out = reduce_sum(mul(add(a, c), a));
    Graph g(out);
    CHECK(g.size() == 4);  // a, add, mul, sum
    CHECK(g.nodes().front() == a.id());
    CHECK(g.nodes().back() == out.id());
}

TEST_CASE("no-grad mode records nothing") {
    auto a = Tensor::from({2}, {1, 2});
    a.set_requires_grad(true);
    NoGradGuard guard;
    auto y = mul(a, a);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("rng streams are reproducible and independent") {
    Rng a(42);
    Rng b(42);
    for (int i = 0; i < 10; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
    Rng c = Rng(42).split(1);
    Rng d = Rng(42).split(2);
    CHECK(c.next_u64() != d.next_u64());
    Rng e(9);
    double mean = 0;
    for (int i = 0; i < 20000; ++i) {
        mean += e.normal();
    }
    CHECK(std::abs(mean / 20000) < 0.03);
}
