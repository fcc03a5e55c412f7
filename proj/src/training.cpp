#include "bitseg/training.hpp"

#include "bitseg/ops.hpp"
#include "bitseg/random.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace bitseg {

void validate(const TrainConfig& cfg)
{
    auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
    if (cfg.loss_power < 0)
        fail("loss_power must be >= 0");
    if (!(cfg.adam.lr >= 0))
        fail("lr must be >= 0");
    if (!(cfg.ema_decay >= 0 && cfg.ema_decay < 1))
        fail("ema_decay must be in [0, 1)");
    if (cfg.batch_size < 1)
        fail("batch_size must be >= 1");
    if (cfg.steps < 0)
        fail("steps must be >= 0");
    if (!(cfg.past_drop >= 0 && cfg.past_drop <= 1))
        fail("past_drop must be in [0, 1]");
    if (cfg.checkpoint_every < 0 || cfg.log_every < 1)
        fail("checkpoint_every must be >= 0 and log_every >= 1");
}

std::vector<double> loss_weights(const PanopticMask& mask, double p)
{
    const int H = mask.height, W = mask.width;
    const std::size_t S = mask.pixels();
    // segment label per pixel, then pixel count per label
    std::vector<int> label(S, -1);
    std::vector<std::size_t> count;
    std::map<SegmentKey, int> thing_label;
    std::vector<std::size_t> stack;
    for (std::size_t i = 0; i < S; ++i) {
        if (label[i] >= 0)
            continue;
        if (mask.instances[i] != 0) {
            auto [it, fresh] = thing_label.try_emplace({mask.classes[i], mask.instances[i]}, static_cast<int>(count.size()));
            if (fresh)
                count.push_back(0);
            label[i] = it->second;
            ++count[static_cast<std::size_t>(it->second)];
            continue;
        }
        const int l = static_cast<int>(count.size());
        count.push_back(0);
        label[i] = l;
        stack.assign(1, i);
        while (!stack.empty()) {
            const std::size_t q = stack.back();
            stack.pop_back();
            ++count.back();
            const int y = static_cast<int>(q) / W, x = static_cast<int>(q) % W;
            const int ny[4] = {y - 1, y + 1, y, y}, nx[4] = {x, x, x - 1, x + 1};
            for (int k = 0; k < 4; ++k) {
                if (ny[k] < 0 || ny[k] >= H || nx[k] < 0 || nx[k] >= W)
                    continue;
                const auto r = static_cast<std::size_t>(ny[k] * W + nx[k]);
                if (label[r] < 0 && mask.instances[r] == 0 && mask.classes[r] == mask.classes[i]) {
                    label[r] = l;
                    stack.push_back(r);
                }
            }
        }
    }
    std::vector<double> per_label(count.size());
    for (std::size_t l = 0; l < count.size(); ++l)
        per_label[l] = std::pow(static_cast<double>(count[l]), -p);
    std::vector<double> w(S);
    double total = 0;
    for (std::size_t i = 0; i < S; ++i)
        total += w[i] = per_label[static_cast<std::size_t>(label[i])];
    const double norm = static_cast<double>(S) / total;
    for (auto& v : w)
        v *= norm;
    return w;
}

template <typename T>
Var<T> ce_loss(const DenoiserOutput<T>& out, std::span<const PanopticMask> targets, const Tensor<T>& weights)
{
    const Shape& cs = out.class_logits.shape();
    const Shape& is = out.instance_logits.shape();
    const std::size_t N = cs[0], H = cs[2], W = cs[3], S = H * W;
    if (targets.size() != N || weights.shape() != Shape{N, H, W})
        throw std::invalid_argument("ce_loss: expected " + std::to_string(N) + " targets and weights [N, H, W], got " +
                                    std::to_string(targets.size()) + " and " + shape_str(weights.shape()));
    std::vector<std::int32_t> cls(N * S), ins(N * S);
    for (std::size_t n = 0; n < N; ++n) {
        const auto& m = targets[n];
        if (m.pixels() != S || static_cast<std::size_t>(m.height) != H)
            throw std::invalid_argument("ce_loss: target size does not match logits");
        for (std::size_t i = 0; i < S; ++i) {
            if (m.classes[i] >= cs[1] || m.instances[i] >= is[1])
                throw std::invalid_argument("ce_loss: target (" + std::to_string(m.classes[i]) + ", " +
                                            std::to_string(m.instances[i]) + ") out of range for " +
                                            std::to_string(cs[1]) + " classes and " + std::to_string(is[1]) + " instance ids");
            cls[n * S + i] = m.classes[i];
            ins[n * S + i] = m.instances[i];
        }
    }
    auto ll = ops::add(ops::pick(ops::log_softmax(out.class_logits, 1), std::span<const std::int32_t>(cls), 1),
                       ops::pick(ops::log_softmax(out.instance_logits, 1), std::span<const std::int32_t>(ins), 1));
    return ops::scale(ops::mean(ops::mul(ll, Var<T>(weights))), T(-1));
}

template <typename T>
Var<T> l2_loss(const Var<T>& m_pred, const Tensor<T>& target, const Tensor<T>& weights)
{
    const Shape& s = m_pred.shape();
    if (s.size() != 4 || target.shape() != s || weights.shape() != Shape{s[0], s[2], s[3]})
        throw std::invalid_argument("l2_loss: shapes " + shape_str(s) + ", " + shape_str(target.shape()) + ", " +
                                    shape_str(weights.shape()) + " do not fit");
    auto d = ops::sub(m_pred, Var<T>(target));
    auto w = Var<T>(weights.reshaped({s[0], 1, s[2], s[3]}));
    return ops::mean(ops::mul(ops::mul(d, d), w));
}

template <typename T>
void ema_update(std::vector<Tensor<T>>& ema, const std::vector<Tensor<T>>& raw, double decay)
{
    if (!(decay >= 0 && decay < 1))
        throw std::invalid_argument("ema_update: decay must be in [0, 1)");
    if (ema.size() != raw.size())
        throw std::invalid_argument("ema_update: tensor count mismatch");
    const T a = static_cast<T>(decay), b = static_cast<T>(1 - decay);
    for (std::size_t k = 0; k < ema.size(); ++k) {
        if (ema[k].shape() != raw[k].shape())
            throw std::invalid_argument("ema_update: shape mismatch at tensor " + std::to_string(k));
        T* e = ema[k].ptr();
        const T* r = raw[k].ptr();
        for (std::size_t i = 0; i < ema[k].numel(); ++i)
            e[i] = a * e[i] + b * r[i];
    }
}

template <typename T>
TrainState<T> init_train_state(const NetConfig& net, const TrainConfig& train)
{
    validate(net);
    validate(train);
    TrainState<T> s{net, train, init_params<T>(net, derive_seed(train.seed, {1})), {}, Adam<T>(train.adam), 0};
    s.ema = s.params.tensors();
    return s;
}

template <typename T>
TrainState<T> video_finetune_state(const TrainState<T>& image_state, const TrainConfig& train, int past_frames)
{
    validate(train);
    NetConfig net = image_state.net;
    net.past_frames = past_frames;
    ParamStore<T> ema_store;
    for (std::size_t k = 0; k < image_state.params.size(); ++k)
        ema_store.add(image_state.params.names()[k], image_state.ema[k]);
    TrainState<T> s{net, train, expand_for_past(image_state.net, image_state.params, past_frames), {}, Adam<T>(train.adam), 0};
    s.ema = expand_for_past(image_state.net, ema_store, past_frames).tensors();
    return s;
}

double scheduled_lr(const TrainConfig& cfg, std::int64_t step)
{
    if (cfg.lr_schedule == LrSchedule::constant || cfg.steps == 0)
        return cfg.adam.lr;
    return cfg.adam.lr * std::max(0.0, 1.0 - static_cast<double>(step) / cfg.steps);
}

template <typename T>
Tensor<T> encode_past(std::span<const PanopticMask> past, const NetConfig& net, int height, int width)
{
    const auto D = static_cast<std::size_t>(net.bit_channels());
    const std::size_t S = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    const auto P = static_cast<std::size_t>(net.past_frames);
    if (past.size() > P)
        throw std::invalid_argument("encode_past: " + std::to_string(past.size()) + " past masks for a net with " +
                                    std::to_string(P) + " past frames");
    Tensor<T> out({P * D, static_cast<std::size_t>(height), static_cast<std::size_t>(width)});
    for (std::size_t k = 0; k < past.size(); ++k) {
        if (past[k].pixels() == 0)
            continue; // missing frame
        const auto bits = encode_analog<T>(past[k], net.codec);
        std::copy(bits.ptr(), bits.ptr() + D * S, out.ptr() + k * D * S);
    }
    return out;
}

template <typename T>
Tensor<T> image_tensor(std::span<const Image* const> images)
{
    if (images.empty())
        throw std::invalid_argument("image_tensor: no images");
    const auto H = static_cast<std::size_t>(images[0]->height), W = static_cast<std::size_t>(images[0]->width);
    Tensor<T> out({images.size(), 3, H, W});
    for (std::size_t n = 0; n < images.size(); ++n) {
        if (images[n]->data.size() != 3 * H * W)
            throw std::invalid_argument("image_tensor: images differ in size");
        std::copy(images[n]->data.begin(), images[n]->data.end(), out.ptr() + n * 3 * H * W);
    }
    return out;
}

template <typename T>
Batch<T> make_batch(const TrainState<T>& state, std::span<const Sequence> data)
{
    if (data.empty())
        throw std::invalid_argument("make_batch: empty training set");
    const NetConfig& net = state.net;
    const auto N = static_cast<std::size_t>(state.train.batch_size);
    const Frame& probe = data[0].at(0);
    const int H = probe.mask.height, W = probe.mask.width;
    if (H % net.spatial_multiple() || W % net.spatial_multiple())
        throw std::invalid_argument("make_batch: image size must be a multiple of " + std::to_string(net.spatial_multiple()));
    const auto D = static_cast<std::size_t>(net.bit_channels());
    const std::size_t S = static_cast<std::size_t>(H) * static_cast<std::size_t>(W);
    const auto P = static_cast<std::size_t>(net.past_frames);

    std::mt19937_64 rng(derive_seed(state.train.seed, {2, static_cast<std::uint64_t>(state.step)}));
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    Batch<T> b;
    b.noisy = Tensor<T>({N, D, static_cast<std::size_t>(H), static_cast<std::size_t>(W)});
    b.clean = b.noisy;
    if (P)
        b.past = Tensor<T>({N, P * D, static_cast<std::size_t>(H), static_cast<std::size_t>(W)});
    b.weights = Tensor<T>({N, static_cast<std::size_t>(H), static_cast<std::size_t>(W)});
    std::vector<const Image*> images;
    for (std::size_t n = 0; n < N; ++n) {
        const Sequence& seq = data[rng() % data.size()];
        const std::size_t f = rng() % seq.size();
        const Frame& cur = seq[f];
        if (cur.mask.height != H || cur.mask.width != W)
            throw std::invalid_argument("make_batch: frames differ in size");
        images.push_back(&cur.image);

        std::vector<PanopticMask> masks{cur.mask};
        for (std::size_t k = 1; k <= P && k <= f; ++k)
            masks.push_back(seq[f - k].mask);
        const auto map = draw_instance_map(masks, net.max_instances, rng);
        b.targets.push_back(apply_instance_map(cur.mask, map));

        if (P && !(unit(rng) < state.train.past_drop)) {
            std::vector<PanopticMask> past;
            for (std::size_t k = 1; k < masks.size(); ++k)
                past.push_back(apply_instance_map(masks[k], map));
            const auto enc = encode_past<T>(past, net, H, W);
            std::copy(enc.ptr(), enc.ptr() + enc.numel(), b.past.ptr() + n * P * D * S);
        }

        const double t = unit(rng);
        b.t.push_back(t);
        const auto x0 = encode_analog<T>(b.targets.back(), net.codec);
        const auto eps = gaussian_noise<T>(x0.shape(), rng);
        const auto xt = corrupt(x0, t, eps);
        std::copy(x0.ptr(), x0.ptr() + D * S, b.clean.ptr() + n * D * S);
        std::copy(xt.ptr(), xt.ptr() + D * S, b.noisy.ptr() + n * D * S);
        const auto w = loss_weights(b.targets.back(), state.train.loss_power);
        for (std::size_t i = 0; i < S; ++i)
            b.weights[n * S + i] = static_cast<T>(w[i]);
    }
    b.images = image_tensor<T>(images);
    return b;
}

template <typename T>
double train_step(TrainState<T>& state, std::span<const Sequence> data)
{
    const Batch<T> batch = make_batch(state, data);
    BoundNet<T> net(state.net, state.params, true);
    const auto h = encode_image(net, Var<T>(batch.images));
    const auto out = decode_mask(net, Var<T>(batch.noisy), h, batch.t, batch.past.empty() ? Var<T>() : Var<T>(batch.past));
    const Var<T> loss = state.train.loss == LossKind::cross_entropy ? ce_loss(out, std::span<const PanopticMask>(batch.targets), batch.weights)
                                                                   : l2_loss(out.m_pred, batch.clean, batch.weights);
    const double value = static_cast<double>(loss.value().item());
    if (!std::isfinite(value)) {
        Tape<T>::current().clear();
        std::ostringstream msg;
        msg << "training diverged at step " << state.step << ": loss = " << value << " (lr " << scheduled_lr(state.train, state.step)
            << ")";
        throw DivergenceError(msg.str());
    }
    backward(loss);
    const auto grads = net.grads();
    state.adam.set_lr(scheduled_lr(state.train, state.step));
    state.adam.update(std::span<Tensor<T>>(state.params.tensors()), std::span<const Tensor<T>>(grads));
    ema_update(state.ema, state.params.tensors(), state.train.ema_decay);
    ++state.step;
    return value;
}

#define BITSEG_INSTANTIATE(T)                                                                                      \
    template Var<T> ce_loss<T>(const DenoiserOutput<T>&, std::span<const PanopticMask>, const Tensor<T>&);     \
    template Var<T> l2_loss<T>(const Var<T>&, const Tensor<T>&, const Tensor<T>&);                             \
    template void ema_update<T>(std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&, double);               \
    template TrainState<T> init_train_state<T>(const NetConfig&, const TrainConfig&);                            \
    template TrainState<T> video_finetune_state<T>(const TrainState<T>&, const TrainConfig&, int);               \
    template Tensor<T> encode_past<T>(std::span<const PanopticMask>, const NetConfig&, int, int);                \
    template Tensor<T> image_tensor<T>(std::span<const Image* const>);                                            \
    template Batch<T> make_batch<T>(const TrainState<T>&, std::span<const Sequence>);                            \
    template double train_step<T>(TrainState<T>&, std::span<const Sequence>);

BITSEG_INSTANTIATE(float)
BITSEG_INSTANTIATE(double)

} // namespace bitseg
