#pragma once

#include "bitseg/tensor.hpp"

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace bitseg {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    bool operator==(const AdamConfig&) const = default;
};

/// Raised when a gradient contains NaN or Inf.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Adam with bias correction. Moment tensors are created lazily on the first
/// update to match the parameter shapes.
template <typename T>
class Adam {
public:
    Adam() = default;
    explicit Adam(AdamConfig cfg);

    const AdamConfig& config() const { return cfg_; }
    void set_lr(double lr);
    std::int64_t step() const { return step_; }

    void update(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads);

    std::vector<Tensor<T>>& first_moments() { return m_; }
    std::vector<Tensor<T>>& second_moments() { return v_; }
    const std::vector<Tensor<T>>& first_moments() const { return m_; }
    const std::vector<Tensor<T>>& second_moments() const { return v_; }
    void restore(std::int64_t step, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v);

private:
    AdamConfig cfg_;
    std::int64_t step_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

extern template class Adam<float>;
extern template class Adam<double>;

} // namespace bitseg
