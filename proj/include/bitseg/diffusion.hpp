#pragma once

#include "bitseg/panoptic_mask.hpp"
#include "bitseg/tensor.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace bitseg {

/// Cosine schedule gamma(t) = cos(((t + ns) / (1 + ds)) * pi/2)^2.
struct NoiseSchedule {
    double ns = 0.0002;
    double ds = 0.00025;

    /// Throws std::domain_error for t outside [0, 1].
    double gamma(double t) const;
};

struct SamplerConfig {
    int steps = 20;
    double td = 2.0; // asymmetric time offset for t_next
    std::uint64_t seed = 0;
    bool operator==(const SamplerConfig&) const = default;
};

void validate(const SamplerConfig& cfg);

/// x_t = sqrt(gamma(t)) x0 + sqrt(1 - gamma(t)) eps
template <typename T>
Tensor<T> corrupt(const Tensor<T>& x0, double t, const Tensor<T>& eps, const NoiseSchedule& sched = {});

/// One DDIM update from t_now to t_next given a clean-signal estimate.
/// x_pred is clipped to [-scale, scale] before use.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& x_t, const Tensor<T>& x_pred, double t_now, double t_next, const NoiseSchedule& sched,
                    double scale);

/// (t_now, t_next) for sampling step `step` of cfg.steps.
std::pair<double, double> time_grid(int step, const SamplerConfig& cfg);

template <typename T>
Tensor<T> gaussian_noise(const Shape& shape, std::mt19937_64& rng);

/// Predicts clean analog bits from the noisy state at time t.
template <typename T>
using DenoiseFn = std::function<Tensor<T>(const Tensor<T>& noisy, double t)>;

template <typename T>
struct SampleResult {
    PanopticMask mask;
    Tensor<T> final_pred;                          // last clean-bit estimate
    std::vector<std::pair<int, Tensor<T>>> trajectory; // (step, estimate) for requested steps
};

/// Starts from N(0, 1) noise drawn from cfg.seed and runs cfg.steps DDIM
/// updates. The returned mask decodes the final prediction rather than the
/// final noisy state.
template <typename T>
SampleResult<T> sample(const DenoiseFn<T>& denoise, const Shape& bits_shape, const SamplerConfig& cfg, const CodecConfig& codec,
                       int num_classes, int max_instances, const NoiseSchedule& sched = {}, std::span<const int> record_steps = {});

} // namespace bitseg
