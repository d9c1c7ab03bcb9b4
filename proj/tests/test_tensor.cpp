#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pgnn/serialize.hpp"
#include "pgnn/tensor.hpp"

#include <cmath>
#include <random>
#include <sstream>

using namespace pgnn;

namespace {

// Compares analytic gradients of f at x against central finite differences.
void check_grad(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                double eps = 1e-5, double rel_tol = 1e-4,
                double abs_tol = 1e-6) {
    x.zero_grad(); // the same leaf may be probed by several checks
    Tensor loss = f(x);
    backward(loss);
    const std::vector<double> analytic = x.grad();
    Tensor fd = finite_diff_grad(
        [&](const Tensor& p) { return f(p).item(); }, x, eps);
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double want = fd.at(i);
        const double got = analytic[i];
        if (std::abs(want) < 1e-3) {
            CHECK(std::abs(got - want) <= abs_tol);
        } else {
            CHECK(std::abs(got - want) / std::abs(want) <= rel_tol);
        }
    }
}

} // namespace

TEST_CASE("matmul forward matches hand results") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2, 1}, {1, 1});
    Tensor c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 1});
    CHECK(c.at(0, 0) == doctest::Approx(3.0));
    CHECK(c.at(1, 0) == doctest::Approx(7.0));

    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor d = matmul(a, eye);
    for (std::size_t i = 0; i < 4; ++i) CHECK(d.at(i) == a.at(i));
}

TEST_CASE("matmul rejects mismatched shapes and names them") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 1});
    try {
        matmul(a, b);
        FAIL("expected shape error");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2 x 3]") != std::string::npos);
        CHECK(msg.find("[2 x 1]") != std::string::npos);
    }
}

TEST_CASE("matmul gradients match finite differences") {
    std::mt19937_64 rng(11);
    Tensor a = Tensor::normal({3, 4}, 0, 1, rng, true);
    Tensor b = Tensor::normal({4, 2}, 0, 1, rng);
    check_grad([&](const Tensor& x) { return sum(matmul(x, b)); }, a);

    Tensor a2 = Tensor::normal({3, 4}, 0, 1, rng);
    Tensor b2 = Tensor::normal({4, 2}, 0, 1, rng, true);
    check_grad([&](const Tensor& x) { return sum(matmul(a2, x)); }, b2);
}

TEST_CASE("softmax frozen values and invariants") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3});
    Tensor y = softmax(x, 0);
    CHECK(y.at(0) == doctest::Approx(0.09003057317038046).epsilon(1e-9));
    CHECK(y.at(1) == doctest::Approx(0.24472847105479767).epsilon(1e-9));
    CHECK(y.at(2) == doctest::Approx(0.6652409557748219).epsilon(1e-9));

    // shift invariance through the max-subtraction stabilization
    Tensor shifted = softmax(add_scalar(x, 100.0), 0);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(shifted.at(i) == doctest::Approx(y.at(i)).epsilon(1e-12));

    Tensor big = softmax(Tensor::from_data({2}, {1000, 1000}), 0);
    CHECK(big.at(0) == doctest::Approx(0.5));
    CHECK(big.at(1) == doctest::Approx(0.5));

    std::mt19937_64 rng(5);
    Tensor r = Tensor::normal({4, 6}, 0, 3, rng);
    Tensor sm = softmax(r, 1);
    for (std::size_t i = 0; i < 4; ++i) {
        double row = 0;
        for (std::size_t j = 0; j < 6; ++j) {
            CHECK(sm.at(i, j) > 0.0);
            row += sm.at(i, j);
        }
        CHECK(std::abs(row - 1.0) <= 1e-9);
    }
}

TEST_CASE("softmax gradient") {
    std::mt19937_64 rng(21);
    Tensor x = Tensor::normal({3, 5}, 0, 1, rng, true);
    Tensor w = Tensor::normal({3, 5}, 0, 1, rng);
    check_grad([&](const Tensor& p) { return sum(mul(softmax(p, 1), w)); }, x);
}

TEST_CASE("layernorm two-element slice gives [-1, 1]") {
    Tensor x = Tensor::from_data({2}, {1, 3});
    Tensor y = layernorm(x, 0, 1e-12);
    CHECK(y.at(0) == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(y.at(1) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("layernorm normalizes slices and handles constants") {
    std::mt19937_64 rng(3);
    Tensor x = Tensor::normal({4, 16}, 2.0, 5.0, rng);
    Tensor y = layernorm(x, 1);
    for (std::size_t i = 0; i < 4; ++i) {
        double m = 0, v = 0;
        for (std::size_t j = 0; j < 16; ++j) m += y.at(i, j);
        m /= 16;
        for (std::size_t j = 0; j < 16; ++j) {
            const double d = y.at(i, j) - m;
            v += d * d;
        }
        v /= 16;
        CHECK(std::abs(m) <= 1e-6);
        CHECK(std::abs(v - 1.0) <= 1e-3); // eps=1e-5 relaxes variance slightly
    }

    Tensor c = layernorm(Tensor::full({3}, 7.0), 0);
    for (std::size_t i = 0; i < 3; ++i) CHECK(c.at(i) == 0.0);

    CHECK_THROWS_AS(layernorm(Tensor::zeros({1, 4}), 0), std::invalid_argument);
}

TEST_CASE("layernorm gradient") {
    std::mt19937_64 rng(31);
    Tensor x = Tensor::normal({2, 8}, 0, 1, rng, true);
    Tensor w = Tensor::normal({2, 8}, 0, 1, rng);
    check_grad([&](const Tensor& p) { return sum(mul(layernorm(p, 1), w)); },
               x);
}

TEST_CASE("backward on sum of squares") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor loss = sum(mul(x, x));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward validates its root") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(y), std::invalid_argument); // not scalar

    Tensor detached = Tensor::scalar(1.0);
    CHECK_THROWS_AS(backward(detached), std::runtime_error);

    Tensor loss = sum(y);
    backward(loss);
    CHECK_THROWS_AS(backward(loss), std::runtime_error); // second call
}

TEST_CASE("shared subexpressions accumulate exactly once per path") {
    // z = (x + x)^2 summed -> dz/dx = 8x
    Tensor x = Tensor::from_data({3}, {1, -2, 0.5}, true);
    Tensor y = add(x, x);
    Tensor z = sum(mul(y, y));
    backward(z);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(x.grad()[i] == doctest::Approx(8.0 * x.at(i)));
}

TEST_CASE("finite differences recover simple gradients") {
    Tensor x = Tensor::from_data({4}, {0.5, -1, 2, 3});
    Tensor g = finite_diff_grad(
        [](const Tensor& p) { return sum(p).item(); }, x);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(g.at(i) == doctest::Approx(1.0).epsilon(1e-9));

    Tensor x1 = Tensor::from_data({1}, {3});
    Tensor g1 = finite_diff_grad(
        [](const Tensor& p) { return mul(p, p).item(); }, x1);
    CHECK(std::abs(g1.at(0) - 6.0) <= 1e-6);
}

TEST_CASE("elementwise ops and scalar broadcasting") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor s = Tensor::scalar(10.0);
    Tensor r = add(a, s);
    CHECK(r.at(1, 1) == 14.0);
    r = mul(s, a);
    CHECK(r.at(0, 1) == 20.0);
    r = sub(a, s);
    CHECK(r.at(0, 0) == -9.0);
    r = div(a, Tensor::scalar(2.0));
    CHECK(r.at(1, 0) == 1.5);
    CHECK_THROWS_AS(add(a, Tensor::zeros({3})), std::invalid_argument);

    std::mt19937_64 rng(41);
    Tensor x = Tensor::normal({5}, 0, 1, rng, true);
    check_grad(
        [&](const Tensor& p) {
            return sum(mul(sigmoid(p), relu(add_scalar(p, 0.3))));
        },
        x);
    Tensor pos = Tensor::uniform({6}, 0.1, 3.0, rng, true);
    check_grad([&](const Tensor& p) { return sum(log(p)); }, pos);
    check_grad([&](const Tensor& p) { return sum(sqrt(p)); }, pos);
}

TEST_CASE("scalar-broadcast gradients") {
    std::mt19937_64 rng(42);
    Tensor a = Tensor::normal({3, 3}, 0, 1, rng);
    Tensor s = Tensor::scalar(0.7, true);
    check_grad([&](const Tensor& p) { return sum(mul(a, p)); }, s);
    check_grad([&](const Tensor& p) { return sum(div(a, p)); }, s);
    check_grad([&](const Tensor& p) { return sum(sub(p, a)); }, s);
}

TEST_CASE("maximum takes the larger element and routes gradient") {
    Tensor a = Tensor::from_data({3}, {1, 5, 2}, true);
    Tensor b = Tensor::from_data({3}, {4, 5, 0}, true);
    Tensor m = maximum(a, b);
    CHECK(m.at(0) == 4.0);
    CHECK(m.at(1) == 5.0);
    CHECK(m.at(2) == 2.0);
    backward(sum(m));
    CHECK(a.grad() == std::vector<double>{0, 1, 1}); // a wins ties
    CHECK(b.grad() == std::vector<double>{1, 0, 0});
}

TEST_CASE("conv2d identity kernel reproduces the input") {
    std::mt19937_64 rng(7);
    Tensor img = Tensor::normal({1, 5, 5}, 0, 1, rng);
    std::vector<double> k(9, 0.0);
    k[4] = 1.0; // center tap
    Tensor kernel = Tensor::from_data({1, 1, 3, 3}, k);
    Tensor out = conv2d(img, kernel);
    CHECK(out.shape() == img.shape());
    for (std::size_t i = 0; i < img.size(); ++i)
        CHECK(out.at(i) == doctest::Approx(img.at(i)));
}

TEST_CASE("conv2d shape validation") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({3, 1, 3, 3})),
                    std::invalid_argument);
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 1, 2, 2})),
                    std::invalid_argument);
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 4, 4}), Tensor::zeros({2, 1, 3, 3}),
                           Tensor::zeros({3})),
                    std::invalid_argument);
}

TEST_CASE("conv2d gradients (input, kernel, bias)") {
    std::mt19937_64 rng(13);
    Tensor img = Tensor::normal({2, 4, 4}, 0, 1, rng, true);
    Tensor kernel = Tensor::normal({3, 2, 3, 3}, 0, 0.5, rng, true);
    Tensor bias = Tensor::normal({3}, 0, 0.5, rng, true);
    Tensor w = Tensor::normal({3, 4, 4}, 0, 1, rng);

    check_grad(
        [&](const Tensor& p) { return sum(mul(conv2d(p, kernel, bias), w)); },
        img);
    check_grad(
        [&](const Tensor& p) { return sum(mul(conv2d(img, p, bias), w)); },
        kernel);
    check_grad(
        [&](const Tensor& p) { return sum(mul(conv2d(img, kernel, p), w)); },
        bias);
}

TEST_CASE("avgpool2d windows and gradient") {
    Tensor x = Tensor::from_data({1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor y = avgpool2d(x, 2);
    CHECK(y.shape() == Shape{1, 1, 2});
    CHECK(y.at(0) == doctest::Approx((1 + 2 + 5 + 6) / 4.0));
    CHECK(y.at(1) == doctest::Approx((3 + 4 + 7 + 8) / 4.0));

    // odd trailing column is dropped
    Tensor odd = avgpool2d(Tensor::zeros({1, 5, 5}), 2);
    CHECK(odd.shape() == Shape{1, 2, 2});

    std::mt19937_64 rng(17);
    Tensor g = Tensor::normal({2, 4, 4}, 0, 1, rng, true);
    check_grad([&](const Tensor& p) { return sum(mul(avgpool2d(p, 2),
                                                     avgpool2d(p, 2))); },
               g);
}

TEST_CASE("reshape, slice and concat round trips with gradients") {
    std::mt19937_64 rng(19);
    Tensor x = Tensor::normal({2, 6}, 0, 1, rng, true);
    Tensor r = reshape(x, {3, 4});
    CHECK(r.shape() == Shape{3, 4});
    CHECK_THROWS_AS(reshape(x, {5, 5}), std::invalid_argument);

    Tensor s = slice(x, 1, 2, 3);
    CHECK(s.shape() == Shape{2, 3});
    CHECK(s.at(0, 0) == x.at(0, 2));
    CHECK_THROWS_AS(slice(x, 1, 5, 3), std::invalid_argument);

    Tensor left = slice(x, 1, 0, 2);
    Tensor right = slice(x, 1, 2, 4);
    Tensor glued = concat({left, right}, 1);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(glued.at(i) == x.at(i));

    check_grad(
        [&](const Tensor& p) {
            Tensor a = slice(p, 1, 0, 3);
            Tensor b = slice(p, 1, 3, 3);
            return sum(mul(concat({a, b}, 0), concat({b, a}, 0)));
        },
        x);
}

TEST_CASE("reductions") {
    Tensor x = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    CHECK(sum(x).item() == 10.0);
    CHECK(mean(x).item() == 2.5);
    CHECK(reduce_max(x).item() == 4.0);
    CHECK(reduce_min(x).item() == 1.0);

    Tensor tie = Tensor::from_data({3}, {5, 5, 1}, true);
    backward(reduce_max(tie));
    CHECK(tie.grad() == std::vector<double>{1, 0, 0}); // first max wins

    Tensor maps = Tensor::from_data({2, 2, 2}, {1, 1, 1, 1, 2, 4, 6, 8});
    Tensor sm = spatial_mean(maps);
    CHECK(sm.shape() == Shape{2});
    CHECK(sm.at(0) == 1.0);
    CHECK(sm.at(1) == 5.0);

    std::mt19937_64 rng(23);
    Tensor g = Tensor::normal({3, 2, 2}, 0, 1, rng, true);
    Tensor w = Tensor::normal({3}, 0, 1, rng);
    check_grad([&](const Tensor& p) { return sum(mul(spatial_mean(p), w)); },
               g);
    check_grad([&](const Tensor& p) { return mean(p); }, g);
}

TEST_CASE("channel and plane broadcasts") {
    Tensor x = Tensor::from_data({2, 1, 2}, {1, 2, 3, 4});
    Tensor bias = Tensor::from_data({2}, {10, 20});
    Tensor y = channel_add(x, bias);
    CHECK(y.at(0) == 11.0);
    CHECK(y.at(3) == 24.0);
    Tensor z = channel_mul(x, bias);
    CHECK(z.at(1) == 20.0);
    CHECK(z.at(2) == 60.0);

    Tensor plane = Tensor::from_data({1, 2}, {0.5, 2});
    Tensor p = plane_mul(x, plane);
    CHECK(p.at(0) == 0.5);
    CHECK(p.at(3) == 8.0);

    std::mt19937_64 rng(29);
    Tensor f = Tensor::normal({3, 2, 2}, 0, 1, rng, true);
    Tensor m = Tensor::uniform({2, 2}, 0, 1, rng, true);
    Tensor b2 = Tensor::normal({3}, 0, 1, rng, true);
    check_grad([&](const Tensor& q) { return sum(mul(plane_mul(f, q), f)); }, m);
    check_grad(
        [&](const Tensor& q) { return sum(mul(plane_mul_complement(f, q), f)); },
        m);
    check_grad([&](const Tensor& q) { return sum(mul(channel_add(f, q), f)); },
               b2);
    check_grad([&](const Tensor& q) { return sum(mul(channel_mul(f, q), f)); },
               b2);
}

TEST_CASE("masked split is bit-exact") {
    std::mt19937_64 rng(37);
    Tensor f = Tensor::normal({4, 6, 6}, 0, 2, rng);
    Tensor m = Tensor::uniform({6, 6}, 0, 1, rng);
    Tensor kept = plane_mul(f, m);
    Tensor erased = plane_mul_complement(f, m);
    Tensor back = add(kept, erased);
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(back.at(i) == f.at(i));
}

TEST_CASE("bilinear resize") {
    Tensor x = Tensor::from_data({2, 2}, {0, 1, 2, 3});
    Tensor same = bilinear_resize(x, 2, 2);
    CHECK(same.node().get() == x.node().get()); // identity is a no-op

    Tensor up = bilinear_resize(x, 4, 4);
    CHECK(up.shape() == Shape{4, 4});
    CHECK(up.at(0) == 0.0);               // corners clamp
    CHECK(up.at(3, 3) == 3.0);
    CHECK(up.at(1, 1) == doctest::Approx(0.75));

    std::mt19937_64 rng(43);
    Tensor f = Tensor::normal({2, 3, 3}, 0, 1, rng, true);
    check_grad(
        [&](const Tensor& p) {
            Tensor r = bilinear_resize(p, 5, 4);
            return sum(mul(r, r));
        },
        f);
}

TEST_CASE("forward passes are deterministic") {
    std::mt19937_64 rng(47);
    Tensor a = Tensor::normal({6, 6}, 0, 1, rng);
    Tensor b = Tensor::normal({6, 6}, 0, 1, rng);
    Tensor r1 = softmax(matmul(a, b), 1);
    Tensor r2 = softmax(matmul(a, b), 1);
    for (std::size_t i = 0; i < r1.size(); ++i) CHECK(r1.at(i) == r2.at(i));
}

TEST_CASE("tensor serialization round trip is bitwise") {
    std::mt19937_64 rng(53);
    Tensor t = Tensor::normal({3, 4, 5}, 0, 1e6, rng);
    std::stringstream buf;
    write_tensor(buf, t);
    Tensor back = read_tensor(buf);
    CHECK(back.shape() == t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(back.at(i) == t.at(i));
}

TEST_CASE("checkpoint save and load with manifest") {
    std::mt19937_64 rng(59);
    Checkpoint ck;
    ck.add("enc.w", Tensor::normal({2, 3}, 0, 1, rng));
    ck.add("enc.b", Tensor::normal({3}, 0, 1, rng));
    CHECK_THROWS_AS(ck.add("enc.w", Tensor::zeros({1})), std::invalid_argument);

    const std::string path = "test_ckpt.bin";
    ck.save(path);
    Checkpoint back = Checkpoint::load(path);
    CHECK(back.entries().size() == 2);
    Tensor w = back.get("enc.w");
    for (std::size_t i = 0; i < w.size(); ++i)
        CHECK(w.at(i) == ck.get("enc.w").at(i));
    CHECK_THROWS_AS(back.get("missing"), std::runtime_error);

    // corrupting the magic must be rejected
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.put('X');
    }
    CHECK_THROWS_AS(Checkpoint::load(path), std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("gradient_step applies plain SGD and clears gradients") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    backward(sum(mul(x, x)));
    x.gradient_step(0.1);
    CHECK(x.at(0) == doctest::Approx(1.0 - 0.1 * 2.0));
    CHECK(x.at(1) == doctest::Approx(2.0 - 0.1 * 4.0));
    CHECK_FALSE(x.has_grad());
}
