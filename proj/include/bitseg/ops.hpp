#pragma once

#include "bitseg/autograd.hpp"

#include <cstdint>
#include <span>
#include <vector>

// Differentiable tensor operations. Every op records itself on the current
// thread's tape when one of its inputs requires grad. Shape errors throw
// std::invalid_argument naming the op and the offending shapes.
namespace bitseg::ops {

// Elementwise with numpy-style broadcasting.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> scale(const Var<T>& x, T s);
template <typename T> Var<T> shift(const Var<T>& x, T s);

template <typename T> Var<T> relu(const Var<T>& x);
/// tanh approximation of GELU.
template <typename T> Var<T> gelu(const Var<T>& x);

/// [M,K] x [K,N] -> [M,N]
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);

/// x [N,C,H,W], weight [O,C,k,k] with odd k, optional bias [O]; stride 1,
/// zero padding k/2 so spatial size is preserved.
template <typename T> Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias = {});

/// 2x2 average pooling on [N,C,H,W]; H and W must be even.
template <typename T> Var<T> avg_pool2x2(const Var<T>& x);
/// 2x nearest-neighbour upsampling on [N,C,H,W].
template <typename T> Var<T> upsample2x(const Var<T>& x);

/// Normalizes over dim 1 of [N,C,...] independently at every other position,
/// then applies per-channel gamma/beta of shape [C].
template <typename T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

/// Negative axis counts from the end.
template <typename T> Var<T> softmax(const Var<T>& x, int axis = -1);
template <typename T> Var<T> log_softmax(const Var<T>& x, int axis = -1);

template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, int axis);
template <typename T> Var<T> slice(const Var<T>& x, int axis, std::size_t begin, std::size_t end);

/// Selects x[..., index, ...] along `axis` at every other position; the axis
/// is removed from the result. `index` has numel equal to the result.
template <typename T> Var<T> pick(const Var<T>& x, std::span<const std::int32_t> index, int axis);

template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);

template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);

/// Shape that results from broadcasting a against b; throws when incompatible.
Shape broadcast_shape(const char* op, const Shape& a, const Shape& b);

} // namespace bitseg::ops
