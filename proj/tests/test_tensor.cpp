#include "bitseg/adam.hpp"
#include "bitseg/ops.hpp"
#include "bitseg/parallel.hpp"

#include "gradcheck.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace bitseg;
using bitseg::testing::random_tensor;

namespace {

Var<double> vec(std::vector<double> v)
{
    const std::size_t n = v.size();
    return Var<double>(Tensor<double>(Shape{n}, std::move(v)));
}

// Materializes `t` at `target` shape by explicit index arithmetic.
Tensor<double> tile_to(const Tensor<double>& t, const Shape& target)
{
    Tensor<double> out(target);
    const std::size_t r = target.size();
    const std::size_t off = r - t.rank();
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t flat = 0; flat < out.numel(); ++flat) {
        std::size_t rem = flat;
        for (std::size_t d = r; d-- > 0;) {
            idx[d] = rem % target[d];
            rem /= target[d];
        }
        std::size_t src = 0;
        for (std::size_t d = 0; d < t.rank(); ++d) {
            const std::size_t i = t.dim(d) == 1 ? 0 : idx[off + d];
            src = src * t.dim(d) + i;
        }
        out[flat] = t[src];
    }
    return out;
}

} // namespace

TEST_CASE("tensor construction validates length")
{
    CHECK_THROWS_AS(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), std::invalid_argument);
    Tensor<float> t(Shape{2, 3}, 1.5f);
    CHECK(t.numel() == 6);
    CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
    CHECK_THROWS(t.reshaped({4}));
}

TEST_CASE("add, softmax and identity conv examples")
{
    auto s = ops::add(vec({1, 2}), vec({3, 4}));
    CHECK(s.value()[0] == 4);
    CHECK(s.value()[1] == 6);

    auto p = ops::softmax(vec({0, 0}));
    CHECK(p.value()[0] == doctest::Approx(0.5));
    CHECK(p.value()[1] == doctest::Approx(0.5));

    std::mt19937_64 rng(1);
    Tensor<double> x = random_tensor({2, 1, 5, 6}, rng);
    Tensor<double> w(Shape{1, 1, 3, 3});
    w[4] = 1.0;
    auto y = ops::conv2d(Var<double>(x), Var<double>(w));
    CHECK(y.value() == x);
}

TEST_CASE("shape mismatch errors name the op and both shapes")
{
    auto a = Var<double>(Tensor<double>(Shape{2, 3}));
    auto b = Var<double>(Tensor<double>(Shape{4}));
    try {
        ops::add(a, b);
        FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("add") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4]") != std::string::npos);
    }
    CHECK_THROWS_AS(ops::matmul(a, a), std::invalid_argument);
    CHECK_THROWS_AS(ops::conv2d(a, a), std::invalid_argument);
}

TEST_CASE("broadcast add/mul agree with explicit tiling")
{
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> dim(1, 4);
    std::bernoulli_distribution coin(0.4);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t r = 1 + static_cast<std::size_t>(trial % 4);
        Shape full(r);
        for (auto& d : full)
            d = static_cast<std::size_t>(dim(rng));
        Shape a = full, b;
        // b drops some leading dims and collapses others to 1
        const std::size_t drop = static_cast<std::size_t>(std::uniform_int_distribution<int>(0, static_cast<int>(r))(rng));
        for (std::size_t d = drop; d < r; ++d)
            b.push_back(coin(rng) ? 1 : full[d]);
        for (auto& d : a)
            if (coin(rng)) d = 1;
        Shape out;
        try {
            out = ops::broadcast_shape("test", a, b);
        } catch (const std::invalid_argument&) {
            continue;
        }
        Tensor<double> ta = random_tensor(a, rng), tb = random_tensor(b, rng);
        Tensor<double> ea = tile_to(ta, out), eb = tile_to(tb, out);
        auto sum = ops::add(Var<double>(ta), Var<double>(tb)).value();
        auto prod = ops::mul(Var<double>(ta), Var<double>(tb)).value();
        REQUIRE(sum.shape() == out);
        for (std::size_t i = 0; i < sum.numel(); ++i) {
            CHECK(sum[i] == ea[i] + eb[i]);
            CHECK(prod[i] == ea[i] * eb[i]);
        }
    }
}

TEST_CASE("forward results are bit-identical across runs and worker counts")
{
    std::mt19937_64 rng(3);
    Tensor<float> x = random_tensor({4, 3, 8, 8}, rng).cast<float>();
    Tensor<float> w = random_tensor({5, 3, 3, 3}, rng).cast<float>();
    Tensor<float> b = random_tensor({5}, rng).cast<float>();
    auto run = [&] {
        Var<float> vx(x, true), vw(w, true), vb(b, true);
        auto y = ops::conv2d(vx, vw, vb);
        auto loss = ops::sum(ops::mul(y, y));
        backward(loss);
        return std::make_tuple(y.value(), vw.grad(), vb.grad(), vx.grad());
    };
    const auto before = num_threads();
    set_num_threads(1);
    auto r1 = run();
    auto r2 = run();
    set_num_threads(4);
    auto r3 = run();
    set_num_threads(before);
    CHECK(r1 == r2);
    CHECK(r1 == r3);
}

TEST_CASE("pool, upsample, concat, slice, pick shapes")
{
    std::mt19937_64 rng(5);
    Var<double> x(random_tensor({2, 3, 4, 6}, rng));
    CHECK(ops::avg_pool2x2(x).shape() == Shape{2, 3, 2, 3});
    CHECK(ops::upsample2x(x).shape() == Shape{2, 3, 8, 12});
    CHECK(ops::concat<double>({x, x}, 1).shape() == Shape{2, 6, 4, 6});
    CHECK(ops::slice(x, 1, 1, 3).shape() == Shape{2, 2, 4, 6});
    std::vector<std::int32_t> idx(2 * 4 * 6, 2);
    auto picked = ops::pick(x, std::span<const std::int32_t>(idx), 1);
    CHECK(picked.shape() == Shape{2, 4, 6});
    CHECK(picked.value()[0] == x.value()[2 * 24]);
    idx[3] = 3;
    CHECK_THROWS_AS(ops::pick(x, std::span<const std::int32_t>(idx), 1), std::invalid_argument);
    CHECK_THROWS_AS(ops::avg_pool2x2(Var<double>(Tensor<double>(Shape{1, 1, 3, 4}))), std::invalid_argument);
}

TEST_CASE("layer_norm normalizes over channels")
{
    std::mt19937_64 rng(9);
    Var<double> x(random_tensor({2, 5, 3, 3}, rng, -3, 3));
    Var<double> g(Tensor<double>(Shape{5}, 1.0)), b(Tensor<double>(Shape{5}, 0.0));
    auto y = ops::layer_norm(x, g, b).value();
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t s = 0; s < 9; ++s) {
            double m = 0, v = 0;
            for (std::size_t c = 0; c < 5; ++c)
                m += y[(n * 5 + c) * 9 + s];
            m /= 5;
            for (std::size_t c = 0; c < 5; ++c)
                v += std::pow(y[(n * 5 + c) * 9 + s] - m, 2);
            CHECK(std::abs(m) < 1e-12);
            CHECK(v / 5 == doctest::Approx(1.0).epsilon(1e-4));
        }
}

TEST_CASE("adam: single step from zero moments moves by lr")
{
    Adam<double> adam(AdamConfig{0.1, 0.9, 0.999, 1e-8});
    std::vector<Tensor<double>> p{Tensor<double>(Shape{1}, 0.0)};
    std::vector<Tensor<double>> g{Tensor<double>(Shape{1}, 1.0)};
    adam.update(p, g);
    // m_hat = v_hat = 1 after bias correction.
    CHECK(p[0][0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-12));
    CHECK(adam.step() == 1);
}

TEST_CASE("adam: zero gradient leaves params and decays moments")
{
    Adam<double> adam(AdamConfig{0.1});
    std::vector<Tensor<double>> p{Tensor<double>(Shape{2}, 0.0)};
    adam.update(p, std::vector<Tensor<double>>{Tensor<double>(Shape{2}, 1.0)});
    const double after_first = p[0][0];
    const double m1 = adam.first_moments()[0][0];
    adam.update(p, std::vector<Tensor<double>>{Tensor<double>(Shape{2}, 0.0)});
    CHECK(adam.first_moments()[0][0] == doctest::Approx(0.9 * m1));
    // The decayed moment still carries momentum, so check the pure zero case separately.
    Adam<double> fresh(AdamConfig{0.1});
    std::vector<Tensor<double>> q{Tensor<double>(Shape{2}, 0.5)};
    fresh.update(q, std::vector<Tensor<double>>{Tensor<double>(Shape{2}, 0.0)});
    CHECK(q[0][0] == 0.5);
    CHECK(fresh.second_moments()[0][0] == 0.0);
    CHECK(after_first < 0);
}

TEST_CASE("adam: constant gradient moves opposite its sign")
{
    Adam<float> adam(AdamConfig{0.01});
    std::vector<Tensor<float>> p{Tensor<float>(Shape{2}, std::vector<float>{0.f, 0.f})};
    std::vector<Tensor<float>> g{Tensor<float>(Shape{2}, std::vector<float>{2.f, -3.f})};
    for (int i = 0; i < 100; ++i)
        adam.update(p, g);
    CHECK(p[0][0] < -0.5f);
    CHECK(p[0][1] > 0.5f);
}

TEST_CASE("adam: non-finite gradients flag divergence")
{
    Adam<float> adam(AdamConfig{0.01});
    std::vector<Tensor<float>> p{Tensor<float>(Shape{1})};
    std::vector<Tensor<float>> g{Tensor<float>(Shape{1}, std::nanf(""))};
    CHECK_THROWS_AS(adam.update(p, g), DivergenceError);
    CHECK_THROWS_AS(Adam<float>(AdamConfig{-1.0}), std::invalid_argument);
}
