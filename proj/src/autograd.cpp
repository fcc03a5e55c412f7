#include "bitseg/autograd.hpp"

#include <stdexcept>

namespace bitseg {

namespace {
thread_local bool g_grad_enabled_f = true;
thread_local bool g_grad_enabled_d = true;

template <typename T>
bool& grad_flag();
template <>
bool& grad_flag<float>() { return g_grad_enabled_f; }
template <>
bool& grad_flag<double>() { return g_grad_enabled_d; }
} // namespace

template <typename T>
Tape<T>& Tape<T>::current()
{
    thread_local Tape<T> tape;
    return tape;
}

template <typename T>
bool Tape<T>::grad_enabled()
{
    return grad_flag<T>();
}

template <typename T>
void Tape<T>::set_grad_enabled(bool on)
{
    grad_flag<T>() = on;
}

NoGradGuard::NoGradGuard() : prev_f_(g_grad_enabled_f), prev_d_(g_grad_enabled_d)
{
    g_grad_enabled_f = false;
    g_grad_enabled_d = false;
}

NoGradGuard::~NoGradGuard()
{
    g_grad_enabled_f = prev_f_;
    g_grad_enabled_d = prev_d_;
}

template <typename T>
Var<T> make_result(const char* op, Tensor<T> value, std::vector<Var<T>> inputs, BackwardFn<T> fn)
{
    bool needs = false;
    if (Tape<T>::grad_enabled()) {
        for (const auto& in : inputs)
            needs = needs || in.requires_grad();
    }
    Var<T> out(std::move(value), needs);
    if (needs) {
        TapeRecord<T> rec{op, {}, out.node(), std::move(fn)};
        rec.inputs.reserve(inputs.size());
        for (const auto& in : inputs)
            rec.inputs.push_back(in.node());
        Tape<T>::current().record(std::move(rec));
    }
    return out;
}

template <typename T>
void backward(const Var<T>& loss)
{
    if (loss.value().numel() != 1)
        throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    auto& tape = Tape<T>::current();
    if (!loss.requires_grad()) {
        tape.clear();
        throw std::logic_error("backward: loss does not depend on any tensor requiring grad");
    }
    auto& node = *loss.node();
    if (node.grad.empty())
        node.grad = Tensor<T>(node.value.shape(), T(0));
    node.grad[0] += T(1);

    auto& recs = tape.records();
    std::vector<Tensor<T>*> slots;
    for (auto it = recs.rbegin(); it != recs.rend(); ++it) {
        auto& out = *it->output;
        if (out.grad.empty())
            continue;
        slots.assign(it->inputs.size(), nullptr);
        for (std::size_t i = 0; i < it->inputs.size(); ++i) {
            auto& in = *it->inputs[i];
            if (!in.requires_grad)
                continue;
            if (in.grad.empty())
                in.grad = Tensor<T>(in.value.shape(), T(0));
            slots[i] = &in.grad;
        }
        it->backward(out.grad, slots);
        // Intermediate gradients are no longer needed once propagated.
        if (it->output != loss.node())
            out.grad = Tensor<T>();
    }
    tape.clear();
}

template class Tape<float>;
template class Tape<double>;
template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);
template Var<float> make_result<float>(const char*, Tensor<float>, std::vector<Var<float>>, BackwardFn<float>);
template Var<double> make_result<double>(const char*, Tensor<double>, std::vector<Var<double>>, BackwardFn<double>);

} // namespace bitseg
