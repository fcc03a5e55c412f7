#pragma once

#include "bitseg/autograd.hpp"
#include "bitseg/diffusion.hpp"
#include "bitseg/panoptic_mask.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace bitseg {

enum class Activation { gelu, relu };

struct NetConfig {
    int num_classes = 5;   // C
    int max_instances = 8; // K
    CodecConfig codec;

    int encoder_width = 16;
    int feature_dim = 64; // d
    int base_width = 32;
    int depth = 2; // decoder resolutions
    int time_embed_dim = 128;
    int time_hidden = 128;
    int past_frames = 0; // 0, 1 or 2
    Activation activation = Activation::gelu;

    int bit_channels() const { return codec.channels(); }
    /// Channels entering the first decoder conv.
    int decoder_input_channels() const { return bit_channels() + feature_dim + past_frames * bit_channels(); }
    /// Spatial sizes must be divisible by this.
    int spatial_multiple() const;

    bool operator==(const NetConfig&) const = default;
};

void validate(const NetConfig& cfg);

/// Named parameter tensors in creation order.
template <typename T>
class ParamStore {
public:
    void add(std::string name, Tensor<T> value);
    std::size_t size() const { return values_.size(); }
    std::size_t numel() const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t index(const std::string& name) const;

    const std::vector<std::string>& names() const { return names_; }
    std::vector<Tensor<T>>& tensors() { return values_; }
    const std::vector<Tensor<T>>& tensors() const { return values_; }
    Tensor<T>& at(const std::string& name) { return values_[index(name)]; }
    const Tensor<T>& at(const std::string& name) const { return values_[index(name)]; }

    bool operator==(const ParamStore&) const = default;

private:
    std::vector<std::string> names_;
    std::vector<Tensor<T>> values_;
    std::map<std::string, std::size_t> index_;
};

/// Glorot-uniform weights, zero biases, unit norm gains.
template <typename T>
ParamStore<T> init_params(const NetConfig& cfg, std::uint64_t seed);

/// Parameters wrapped as graph leaves for one forward/backward pass.
template <typename T>
class BoundNet {
public:
    BoundNet(const NetConfig& cfg, const ParamStore<T>& params, bool requires_grad);
    /// Uses the given variables directly, e.g. to differentiate with respect
    /// to externally owned leaves.
    BoundNet(const NetConfig& cfg, const std::vector<std::string>& names, std::vector<Var<T>> vars);

    const NetConfig& config() const { return cfg_; }
    const Var<T>& operator[](const std::string& name) const;
    const std::vector<Var<T>>& vars() const { return vars_; }
    /// Gradients in parameter order; zeros where backward did not reach.
    std::vector<Tensor<T>> grads() const;

private:
    NetConfig cfg_;
    std::vector<Var<T>> vars_;
    std::map<std::string, std::size_t> index_;
};

template <typename T>
struct DenoiserOutput {
    Var<T> class_logits;    // [N, C, H, W]
    Var<T> instance_logits; // [N, K+1, H, W]
    Var<T> m_pred;          // [N, n_c + n_i, H, W], within [-b, b]
};

/// images [N, 3, H, W] in [0, 1] -> features [N, d, H, W].
template <typename T>
Var<T> encode_image(const BoundNet<T>& net, const Var<T>& images);

/// m_crpt [N, D, H, W], h [N, d, H, W], one t per sample. `past` is
/// [N, past_frames * D, H, W] or empty, in which case it is treated as zeros.
/// Throws when past masks are given to a net configured without them.
template <typename T>
DenoiserOutput<T> decode_mask(const BoundNet<T>& net, const Var<T>& m_crpt, const Var<T>& h, const std::vector<double>& t,
                              const Var<T>& past = {});

/// Expected analog bits under per-channel softmax distributions.
template <typename T>
Var<T> logits_to_analog(const Var<T>& class_logits, const Var<T>& instance_logits, const CodecConfig& codec);

/// [N, dim] sinusoidal embedding of t * 1000.
template <typename T>
Tensor<T> timestep_embedding(const std::vector<double>& t, int dim);

/// Single-sample denoiser over [D, H, W] states for the sampler. `h` is
/// [1, d, H, W]; `past` is [1, P*D, H, W] or empty.
template <typename T>
DenoiseFn<T> make_denoise_fn(const BoundNet<T>& net, const Tensor<T>& h, const Tensor<T>& past = {});

/// Copy of an image-model parameter set with the first decoder conv widened
/// for `past_frames` past masks. New input channels get zero weights, so the
/// widened net starts out computing exactly what the image model computes.
template <typename T>
ParamStore<T> expand_for_past(const NetConfig& image_cfg, const ParamStore<T>& params, int past_frames);

} // namespace bitseg
