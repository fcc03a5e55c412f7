#pragma once

#include "bitseg/adam.hpp"
#include "bitseg/denoiser.hpp"
#include "bitseg/image.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace bitseg {

enum class LossKind { cross_entropy, l2 };
enum class LrSchedule { constant, linear };

/// Codec settings (b, n_c, n_i) live in NetConfig::codec because the decoder
/// heads depend on them; the run config exposes them next to these fields.
struct TrainConfig {
    LossKind loss = LossKind::cross_entropy;
    double loss_power = 0.2; // p in w = 1 / c^p
    AdamConfig adam{1e-3, 0.9, 0.999, 1e-8};
    LrSchedule lr_schedule = LrSchedule::constant;
    double ema_decay = 0.999;
    int batch_size = 8;
    int steps = 1000;
    std::uint64_t seed = 0;
    double past_drop = 0.1; // video: chance of conditioning on an empty past
    int checkpoint_every = 0;
    int log_every = 1;

    bool operator==(const TrainConfig&) const = default;
};

void validate(const TrainConfig& cfg);

/// w'_ij = H*W * w_ij / sum(w), w_ij = 1 / c_ij^p, where c_ij is the pixel
/// count of the segment at (i, j). Thing segments are keyed by (class,
/// instance); instance-0 regions count per 4-connected component.
std::vector<double> loss_weights(const PanopticMask& mask, double p);

/// Mean over batch and pixels of w' * (NLL of the true class + NLL of the
/// true instance id). weights is [N, H, W].
template <typename T>
Var<T> ce_loss(const DenoiserOutput<T>& out, std::span<const PanopticMask> targets, const Tensor<T>& weights);

/// Mean over batch, bit channels and pixels of w' * (m_pred - target)^2.
template <typename T>
Var<T> l2_loss(const Var<T>& m_pred, const Tensor<T>& target, const Tensor<T>& weights);

/// ema <- decay * ema + (1 - decay) * raw, per tensor.
template <typename T>
void ema_update(std::vector<Tensor<T>>& ema, const std::vector<Tensor<T>>& raw, double decay);

/// One labelled frame; an image dataset is a set of length-1 sequences.
struct Frame {
    Image image;
    PanopticMask mask;
};
using Sequence = std::vector<Frame>;

template <typename T>
struct TrainState {
    NetConfig net;
    TrainConfig train;
    ParamStore<T> params;
    std::vector<Tensor<T>> ema;
    Adam<T> adam;
    std::int64_t step = 0;
};

/// Fresh state with initialized weights; EMA starts equal to the weights.
template <typename T>
TrainState<T> init_train_state(const NetConfig& net, const TrainConfig& train);

/// Image-model state widened for past-frame conditioning. Weights and EMA
/// are carried over, the optimizer and step counter restart.
template <typename T>
TrainState<T> video_finetune_state(const TrainState<T>& image_state, const TrainConfig& train, int past_frames);

template <typename T>
struct Batch {
    Tensor<T> images;      // [N, 3, H, W]
    Tensor<T> noisy;       // [N, D, H, W]
    Tensor<T> clean;       // [N, D, H, W]
    Tensor<T> past;        // [N, P*D, H, W] or empty
    Tensor<T> weights;     // [N, H, W]
    std::vector<double> t; // per sample
    std::vector<PanopticMask> targets; // after id permutation
};

/// Draws the batch for state.step: sequences, frames, id permutations,
/// times and noise all come from a stream keyed by (seed, step).
template <typename T>
Batch<T> make_batch(const TrainState<T>& state, std::span<const Sequence> data);

/// Forward, backward and optimizer update for one batch. Returns the loss.
/// Throws DivergenceError on a non-finite loss.
template <typename T>
double train_step(TrainState<T>& state, std::span<const Sequence> data);

/// Learning rate at a given step under the configured schedule.
double scheduled_lr(const TrainConfig& cfg, std::int64_t step);

/// Encoded past masks, most recent first, concatenated to [P*D, H, W].
/// Missing or empty masks are zeros.
template <typename T>
Tensor<T> encode_past(std::span<const PanopticMask> past, const NetConfig& net, int height, int width);

template <typename T>
Tensor<T> image_tensor(std::span<const Image* const> images);

} // namespace bitseg
