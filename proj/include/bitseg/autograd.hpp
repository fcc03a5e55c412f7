#pragma once

#include "bitseg/tensor.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace bitseg {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad; // empty until backward reaches the node
    bool requires_grad = false;
};

/// Handle to a tensor that may participate in reverse-mode differentiation.
/// Copies share the underlying node.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>(Node<T>{std::move(value), {}, requires_grad}))
    {
    }

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    void zero_grad() { node_->grad = Tensor<T>(); }

    const std::shared_ptr<Node<T>>& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Backward closure: receives the output gradient and one gradient slot per
/// input (nullptr for inputs that do not require grad) to accumulate into.
template <typename T>
using BackwardFn = std::function<void(const Tensor<T>& out_grad, std::vector<Tensor<T>*>& in_grads)>;

template <typename T>
struct TapeRecord {
    const char* op;
    std::vector<std::shared_ptr<Node<T>>> inputs;
    std::shared_ptr<Node<T>> output;
    BackwardFn<T> backward;
};

/// Per-thread ordered log of differentiable operations. Records are appended
/// as ops execute, so the log is topologically sorted by construction.
template <typename T>
class Tape {
public:
    static Tape& current();

    void record(TapeRecord<T> rec) { records_.push_back(std::move(rec)); }
    std::size_t size() const { return records_.size(); }
    void clear() { records_.clear(); }
    std::vector<TapeRecord<T>>& records() { return records_; }

    static bool grad_enabled();
    static void set_grad_enabled(bool on);

private:
    std::vector<TapeRecord<T>> records_;
};

/// Disables recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_f_;
    bool prev_d_;
};

/// Propagates d(loss)/d(node) to every node recorded on this thread's tape and
/// consumes the tape. Leaf gradients accumulate across calls.
template <typename T>
void backward(const Var<T>& loss);

/// Builds the op output and, when any input requires grad and recording is
/// enabled, appends a tape record.
template <typename T>
Var<T> make_result(const char* op, Tensor<T> value, std::vector<Var<T>> inputs, BackwardFn<T> fn);

extern template class Tape<float>;
extern template class Tape<double>;

} // namespace bitseg
