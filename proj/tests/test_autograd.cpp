#include "bitseg/ops.hpp"

#include "gradcheck.hpp"

#include <doctest.h>

#include <random>

using namespace bitseg;
using bitseg::testing::gradcheck;
using bitseg::testing::random_tensor;

namespace {

constexpr double kTol = 1e-5;

// Values kept away from zero so relu kinks stay outside the FD stencil.
Tensor<double> away_from_zero(Shape shape, std::mt19937_64& rng)
{
    Tensor<double> t = random_tensor(std::move(shape), rng);
    for (auto& v : t.data())
        v = v < 0 ? v - 0.05 : v + 0.05;
    return t;
}

// Random weighting keeps the scalar loss sensitive to every output element.
Var<double> weighted_sum(const Var<double>& y, std::mt19937_64& rng)
{
    return ops::sum(ops::mul(y, Var<double>(random_tensor(y.shape(), rng))));
}

} // namespace

TEST_CASE("backward: sum of squares")
{
    Var<double> x(Tensor<double>(Shape{2}, std::vector<double>{1, 2}), true);
    backward(ops::sum(ops::mul(x, x)));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 4.0);
    CHECK(Tape<double>::current().size() == 0);
}

TEST_CASE("backward: relu subgradient")
{
    Var<double> x(Tensor<double>(Shape{2}, std::vector<double>{-1, 3}), true);
    backward(ops::sum(ops::relu(x)));
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);
}

TEST_CASE("backward rejects non-scalar loss")
{
    Var<double> x(Tensor<double>(Shape{2}, 1.0), true);
    auto y = ops::scale(x, 2.0);
    CHECK_THROWS_AS(backward(y), std::invalid_argument);
    Tape<double>::current().clear();
}

TEST_CASE("no-grad guard suppresses recording")
{
    Var<double> x(Tensor<double>(Shape{2}, 1.0), true);
    {
        NoGradGuard g;
        auto y = ops::scale(x, 2.0);
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(Tape<double>::current().size() == 0);
}

TEST_CASE("gradient check: every differentiable op on random shapes")
{
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> small(1, 4);
    for (int trial = 0; trial < 3; ++trial) {
        const std::size_t N = static_cast<std::size_t>(small(rng));
        const std::size_t C = static_cast<std::size_t>(small(rng));
        const std::size_t H = 2 * static_cast<std::size_t>(small(rng));
        const std::size_t W = 2 * static_cast<std::size_t>(small(rng));
        const Shape img{N, C, H, W};
        const std::uint64_t seed = rng();
        CAPTURE(shape_str(img));

        auto weighted = [seed](const Var<double>& y) {
            std::mt19937_64 r(seed);
            return weighted_sum(y, r);
        };

        SUBCASE("add/sub/mul with broadcast")
        {
            auto f = [&](const std::vector<Var<double>>& v) {
                auto a = ops::add(v[0], v[1]);
                auto b = ops::mul(a, v[2]);
                return weighted(ops::sub(b, v[1]));
            };
            CHECK(gradcheck(f, {random_tensor(img, rng), random_tensor({C, 1, W}, rng), random_tensor({N, 1, 1, 1}, rng)}).max_rel_error < kTol);
        }
        SUBCASE("conv2d 3x3 and 1x1")
        {
            const std::size_t O = static_cast<std::size_t>(small(rng));
            auto f = [&](const std::vector<Var<double>>& v) {
                auto y = ops::conv2d(v[0], v[1], v[2]);
                return weighted(ops::conv2d(y, v[3]));
            };
            CHECK(gradcheck(f, {random_tensor(img, rng), random_tensor({O, C, 3, 3}, rng), random_tensor({O}, rng),
                                random_tensor({2, O, 1, 1}, rng)})
                      .max_rel_error < kTol);
        }
        SUBCASE("pool/upsample/relu/gelu")
        {
            auto f = [&](const std::vector<Var<double>>& v) {
                auto y = ops::upsample2x(ops::avg_pool2x2(ops::gelu(v[0])));
                return weighted(ops::add(y, ops::relu(v[1])));
            };
            CHECK(gradcheck(f, {random_tensor(img, rng, -2, 2), away_from_zero(img, rng)}).max_rel_error < kTol);
        }
        SUBCASE("layer_norm")
        {
            // Few channels give near-zero variances where the FD truncation error
            // dominates; the denoiser normalizes over >= 8 channels.
            const Shape wide{N, 8, H, W};
            auto f = [&](const std::vector<Var<double>>& v) { return weighted(ops::layer_norm(v[0], v[1], v[2])); };
            CHECK(gradcheck(f, {random_tensor(wide, rng, -2, 2), random_tensor({8}, rng), random_tensor({8}, rng)}).max_rel_error < kTol);
        }
        SUBCASE("softmax/log_softmax over several axes")
        {
            auto f = [&](const std::vector<Var<double>>& v) {
                auto a = ops::softmax(v[0], 1);
                auto b = ops::log_softmax(v[0], -1);
                return weighted(ops::add(a, b));
            };
            CHECK(gradcheck(f, {random_tensor(img, rng, -2, 2)}).max_rel_error < kTol);
        }
        SUBCASE("concat/slice/pick/reshape/mean")
        {
            std::vector<std::int32_t> idx(N * H * W);
            std::uniform_int_distribution<int> pickc(0, static_cast<int>(2 * C) - 1);
            for (auto& i : idx)
                i = pickc(rng);
            auto f = [&](const std::vector<Var<double>>& v) {
                auto cat = ops::concat<double>({v[0], v[1]}, 1);
                auto picked = ops::pick(cat, std::span<const std::int32_t>(idx), 1);
                auto sl = ops::slice(cat, 1, C / 2, C / 2 + 1);
                auto r = ops::reshape(sl, Shape{N, H, W});
                return ops::add(weighted(ops::mul(picked, r)), ops::mean(ops::mul(v[1], v[1])));
            };
            CHECK(gradcheck(f, {random_tensor(img, rng), random_tensor(img, rng)}).max_rel_error < kTol);
        }
        SUBCASE("matmul")
        {
            auto f = [&](const std::vector<Var<double>>& v) { return weighted(ops::matmul(v[0], v[1])); };
            CHECK(gradcheck(f, {random_tensor({N, C}, rng), random_tensor({C, H}, rng)}).max_rel_error < kTol);
        }
    }
}

TEST_CASE("gradient check: random two-layer conv net at 4x8x8x8")
{
    std::mt19937_64 rng(21);
    auto f = [](const std::vector<Var<double>>& v) {
        auto h = ops::gelu(ops::conv2d(v[0], v[1], v[2]));
        auto y = ops::conv2d(h, v[3], v[4]);
        return ops::mean(ops::mul(y, y));
    };
    auto r = gradcheck(f, {random_tensor({4, 8, 8, 8}, rng), random_tensor({6, 8, 3, 3}, rng, -0.3, 0.3), random_tensor({6}, rng),
                           random_tensor({3, 6, 3, 3}, rng, -0.3, 0.3), random_tensor({3}, rng)});
    CHECK(r.max_rel_error < kTol);
}
