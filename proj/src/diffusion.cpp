#include "bitseg/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace bitseg {

double NoiseSchedule::gamma(double t) const
{
    if (!(t >= 0.0 && t <= 1.0))
        throw std::domain_error("gamma: t=" + std::to_string(t) + " outside [0,1]");
    const double c = std::cos(((t + ns) / (1.0 + ds)) * std::numbers::pi / 2.0);
    return c * c;
}

void validate(const SamplerConfig& cfg)
{
    if (cfg.steps < 1)
        throw std::invalid_argument("sampler: steps must be >= 1");
    if (!(cfg.td >= 0.0))
        throw std::invalid_argument("sampler: td must be >= 0");
}

template <typename T>
Tensor<T> corrupt(const Tensor<T>& x0, double t, const Tensor<T>& eps, const NoiseSchedule& sched)
{
    if (x0.shape() != eps.shape())
        throw std::invalid_argument("corrupt: signal shape " + shape_str(x0.shape()) + " != noise shape " + shape_str(eps.shape()));
    const double g = sched.gamma(t);
    const T a = static_cast<T>(std::sqrt(g));
    const T s = static_cast<T>(std::sqrt(1.0 - g));
    Tensor<T> out(x0.shape());
    for (std::size_t i = 0; i < out.numel(); ++i)
        out[i] = a * x0[i] + s * eps[i];
    return out;
}

template <typename T>
Tensor<T> ddim_step(const Tensor<T>& x_t, const Tensor<T>& x_pred, double t_now, double t_next, const NoiseSchedule& sched,
                    double scale)
{
    if (x_t.shape() != x_pred.shape())
        throw std::invalid_argument("ddim_step: state shape " + shape_str(x_t.shape()) + " != prediction shape " +
                                    shape_str(x_pred.shape()));
    if (t_next > t_now)
        throw std::invalid_argument("ddim_step: t_next must not exceed t_now");
    const double g_now = sched.gamma(t_now);
    const double g_next = sched.gamma(t_next);
    if (!(1.0 - g_now > 0.0))
        throw std::domain_error("ddim_step: gamma(t_now) == 1; t_now must be > 0");
    const T sq_now = static_cast<T>(std::sqrt(g_now));
    const T inv_noise_now = static_cast<T>(1.0 / std::sqrt(1.0 - g_now));
    const T sq_next = static_cast<T>(std::sqrt(g_next));
    const T noise_next = static_cast<T>(std::sqrt(1.0 - g_next));
    const T b = static_cast<T>(scale);
    Tensor<T> out(x_t.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const T pred = std::clamp(x_pred[i], -b, b);
        const T eps = (x_t[i] - sq_now * pred) * inv_noise_now;
        out[i] = sq_next * pred + noise_next * eps;
    }
    return out;
}

std::pair<double, double> time_grid(int step, const SamplerConfig& cfg)
{
    const double n = cfg.steps;
    const double t_now = 1.0 - step / n;
    const double t_next = std::max(1.0 - (step + 1 + cfg.td) / n, 0.0);
    return {t_now, t_next};
}

template <typename T>
Tensor<T> gaussian_noise(const Shape& shape, std::mt19937_64& rng)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor<T> out(shape);
    for (auto& v : out.data())
        v = static_cast<T>(normal(rng));
    return out;
}

template <typename T>
SampleResult<T> sample(const DenoiseFn<T>& denoise, const Shape& bits_shape, const SamplerConfig& cfg, const CodecConfig& codec,
                       int num_classes, int max_instances, const NoiseSchedule& sched, std::span<const int> record_steps)
{
    validate(cfg);
    std::mt19937_64 rng(cfg.seed);
    Tensor<T> state = gaussian_noise<T>(bits_shape, rng);
    SampleResult<T> result;
    for (int step = 0; step < cfg.steps; ++step) {
        const auto [t_now, t_next] = time_grid(step, cfg);
        result.final_pred = denoise(state, t_now);
        if (std::find(record_steps.begin(), record_steps.end(), step) != record_steps.end())
            result.trajectory.emplace_back(step, result.final_pred);
        state = ddim_step(state, result.final_pred, t_now, t_next, sched, codec.scale);
    }
    result.mask = decode_analog(result.final_pred, codec, num_classes, max_instances);
    return result;
}

#define BITSEG_INSTANTIATE_DIFFUSION(T)                                                                                    \
    template Tensor<T> corrupt<T>(const Tensor<T>&, double, const Tensor<T>&, const NoiseSchedule&);                        \
    template Tensor<T> ddim_step<T>(const Tensor<T>&, const Tensor<T>&, double, double, const NoiseSchedule&, double);      \
    template Tensor<T> gaussian_noise<T>(const Shape&, std::mt19937_64&);                                                   \
    template SampleResult<T> sample<T>(const DenoiseFn<T>&, const Shape&, const SamplerConfig&, const CodecConfig&, int, int, \
                                       const NoiseSchedule&, std::span<const int>);

BITSEG_INSTANTIATE_DIFFUSION(float)
BITSEG_INSTANTIATE_DIFFUSION(double)

} // namespace bitseg
