#include "bitseg/diffusion.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace bitseg;

namespace {

// Reference values evaluated with 40-digit arithmetic (mpmath) from the
// cosine schedule with ns = 0.0002, ds = 0.00025.
constexpr double kGamma0 = 0.9999999013532887554949;
constexpr double kGammaHalf = 0.4998822197216494899647;
constexpr double kGamma1 = 6.165419642843563652930e-9;

Tensor<double> uniform(Shape s, std::mt19937_64& rng, double lo, double hi)
{
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<double> t(std::move(s));
    for (auto& v : t.data())
        v = u(rng);
    return t;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b)
{
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double max_abs(const Tensor<double>& a)
{
    double m = 0;
    for (double v : a.data())
        m = std::max(m, std::abs(v));
    return m;
}

} // namespace

TEST_CASE("gamma matches high-precision evaluation")
{
    NoiseSchedule s;
    CHECK(s.gamma(0.0) == doctest::Approx(kGamma0).epsilon(1e-13));
    CHECK(s.gamma(0.5) == doctest::Approx(kGammaHalf).epsilon(1e-13));
    CHECK(s.gamma(1.0) == doctest::Approx(kGamma1).epsilon(1e-6));
    CHECK(s.gamma(0.0) > 0.9999);
    CHECK(s.gamma(1.0) < 1e-6);
    CHECK_THROWS_AS(s.gamma(-0.01), std::domain_error);
    CHECK_THROWS_AS(s.gamma(1.01), std::domain_error);
}

TEST_CASE("gamma strictly decreasing on a 1000-point grid")
{
    NoiseSchedule s;
    double prev = s.gamma(0.0);
    for (int i = 1; i < 1000; ++i) {
        const double g = s.gamma(i / 999.0);
        CHECK(g < prev);
        prev = g;
    }
}

TEST_CASE("corrupt endpoints and zero noise")
{
    std::mt19937_64 rng(1);
    auto x0 = uniform({3, 4, 4}, rng, -0.1, 0.1);
    auto eps = gaussian_noise<double>(x0.shape(), rng);
    auto at0 = corrupt(x0, 0.0, eps);
    CHECK(max_abs_diff(at0, x0) < 1e-3 * (max_abs(x0) + max_abs(eps)));
    auto at1 = corrupt(x0, 1.0, eps);
    CHECK(max_abs_diff(at1, eps) < 1e-3 * max_abs(eps));
    Tensor<double> zero(x0.shape());
    auto clean = corrupt(x0, 0.3, zero);
    const double a = std::sqrt(NoiseSchedule{}.gamma(0.3));
    for (std::size_t i = 0; i < x0.numel(); ++i)
        CHECK(clean[i] == a * x0[i]);
    CHECK_THROWS_AS(corrupt(x0, 0.5, Tensor<double>(Shape{3})), std::invalid_argument);
}

TEST_CASE("ddim_step inverts the forward process")
{
    std::mt19937_64 rng(2);
    const double b = 0.1;
    NoiseSchedule s;
    std::uniform_real_distribution<double> ut(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        auto x0 = uniform({2, 3, 3}, rng, -b, b);
        auto eps = gaussian_noise<double>(x0.shape(), rng);
        double t1 = ut(rng), t2 = ut(rng);
        if (t1 < t2) std::swap(t1, t2);
        if (t1 == t2) continue;
        auto xt = corrupt(x0, t1, eps, s);
        auto next = ddim_step(xt, x0, t1, t2, s, b);
        CHECK(max_abs_diff(next, corrupt(x0, t2, eps, s)) < 1e-6);
    }
}

TEST_CASE("ddim_step clips the prediction and handles the gamma=1 endpoint")
{
    const double b = 0.1;
    // ns = ds = 0 makes gamma(0) exactly 1, so t_next = 0 gives coefficients (1, 0).
    NoiseSchedule exact{0.0, 0.0};
    Tensor<double> xt(Shape{3}, std::vector<double>{0.4, -1.0, 2.0});
    Tensor<double> pred(Shape{3}, std::vector<double>{0.05, 0.3, -0.2});
    auto out = ddim_step(xt, pred, 0.5, 0.0, exact, b);
    CHECK(out[0] == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(out[1] == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(out[2] == doctest::Approx(-0.1).epsilon(1e-12));
    CHECK_THROWS_AS(ddim_step(xt, pred, 0.0, 0.0, exact, b), std::domain_error);

    Tensor<double> big(Shape{3}, 2 * b), edge(Shape{3}, b);
    CHECK(ddim_step(xt, big, 0.6, 0.3, NoiseSchedule{}, b) == ddim_step(xt, edge, 0.6, 0.3, NoiseSchedule{}, b));
}

TEST_CASE("time_grid")
{
    SamplerConfig c{10, 1.0, 0};
    auto [a, b] = time_grid(0, c);
    CHECK(a == doctest::Approx(1.0));
    CHECK(b == doctest::Approx(0.8));
    c.td = 0.0;
    auto [a9, b9] = time_grid(9, c);
    CHECK(a9 == doctest::Approx(0.1));
    CHECK(b9 == 0.0);
    c.td = 100.0;
    for (int s = 0; s < c.steps; ++s)
        CHECK(time_grid(s, c).second == 0.0);

    SamplerConfig d{20, 2.0, 0};
    double prev = 2.0;
    for (int s = 0; s < d.steps; ++s) {
        auto [now, next] = time_grid(s, d);
        CHECK(now < prev);
        CHECK(now > 0.0);
        CHECK(now <= 1.0);
        CHECK(next >= 0.0);
        CHECK(next <= now);
        prev = now;
    }
}

TEST_CASE("sample is deterministic and decodes the last prediction")
{
    const CodecConfig codec{3, 4, 0.1};
    PanopticMask target(4, 4, 5, 8);
    for (std::size_t i = 0; i < target.pixels(); ++i) {
        target.classes[i] = static_cast<std::uint16_t>(1 + i % 4);
        target.instances[i] = target.classes[i] > 2 ? static_cast<std::uint16_t>(1 + i % 3) : 0;
    }
    const auto clean = encode_analog<double>(target, codec);
    int calls = 0;
    DenoiseFn<double> oracle = [&](const Tensor<double>& x, double) {
        ++calls;
        CHECK(x.shape() == clean.shape());
        return clean;
    };
    SamplerConfig cfg{1, 0.0, 42};
    auto r1 = sample(oracle, clean.shape(), cfg, codec, 5, 8);
    CHECK(calls == 1);
    CHECK(r1.mask == target);

    // A denoiser that depends on the state: results are a pure function of the seed.
    DenoiseFn<double> noisy = [&](const Tensor<double>& x, double t) {
        Tensor<double> out = x;
        for (auto& v : out.data())
            v = std::tanh(v * (1.0 + t));
        return out;
    };
    cfg = {8, 1.0, 7};
    const int rec[] = {0, 3};
    auto a = sample(noisy, clean.shape(), cfg, codec, 5, 8, NoiseSchedule{}, rec);
    auto b = sample(noisy, clean.shape(), cfg, codec, 5, 8, NoiseSchedule{}, rec);
    CHECK(a.mask == b.mask);
    CHECK(a.final_pred == b.final_pred);
    CHECK(a.trajectory.size() == 2);
    CHECK(a.trajectory[1].first == 3);
    cfg.seed = 8;
    auto c = sample(noisy, clean.shape(), cfg, codec, 5, 8);
    CHECK_FALSE(c.final_pred == a.final_pred);
    CHECK_THROWS_AS(sample(noisy, clean.shape(), SamplerConfig{0, 1.0, 0}, codec, 5, 8), std::invalid_argument);
}
