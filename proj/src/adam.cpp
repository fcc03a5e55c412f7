#include "bitseg/adam.hpp"

#include <cmath>
#include <string>

namespace bitseg {

template <typename T>
Adam<T>::Adam(AdamConfig cfg) : cfg_(cfg)
{
    set_lr(cfg.lr);
}

template <typename T>
void Adam<T>::set_lr(double lr)
{
    // lr == 0 is allowed and freezes the parameters.
    if (!(lr >= 0.0))
        throw std::invalid_argument("Adam: learning rate must be non-negative, got " + std::to_string(lr));
    cfg_.lr = lr;
}

template <typename T>
void Adam<T>::update(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads)
{
    if (params.size() != grads.size())
        throw std::invalid_argument("Adam: " + std::to_string(params.size()) + " parameters but " +
                                    std::to_string(grads.size()) + " gradients");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape() != grads[i].shape())
            throw std::invalid_argument("Adam: parameter " + std::to_string(i) + " has shape " + shape_str(params[i].shape()) +
                                        " but gradient has " + shape_str(grads[i].shape()));
        for (T g : grads[i].data())
            if (!std::isfinite(g))
                throw DivergenceError("Adam: non-finite gradient in parameter " + std::to_string(i) + " at step " +
                                      std::to_string(step_ + 1) + "; training diverged");
    }
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.emplace_back(p.shape());
            v_.emplace_back(p.shape());
        }
    } else if (m_.size() != params.size()) {
        throw std::invalid_argument("Adam: parameter count changed between updates");
    }

    ++step_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    const T step_size = static_cast<T>(cfg_.lr / c1);
    const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
    const T eps = static_cast<T>(cfg_.eps);
    const T tb1 = static_cast<T>(b1), tb2 = static_cast<T>(b2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        T* p = params[i].ptr();
        const T* g = grads[i].ptr();
        T* m = m_[i].ptr();
        T* v = v_[i].ptr();
        for (std::size_t j = 0; j < params[i].numel(); ++j) {
            m[j] = tb1 * m[j] + (T(1) - tb1) * g[j];
            v[j] = tb2 * v[j] + (T(1) - tb2) * g[j] * g[j];
            p[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_c2 + eps);
        }
    }
}

template <typename T>
void Adam<T>::restore(std::int64_t step, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v)
{
    if (step < 0 || m.size() != v.size())
        throw std::invalid_argument("Adam::restore: inconsistent state");
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
}

template class Adam<float>;
template class Adam<double>;

} // namespace bitseg
