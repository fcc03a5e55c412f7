#include "bitseg/denoiser.hpp"
#include "bitseg/ops.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>

namespace bitseg {

int NetConfig::spatial_multiple() const
{
    int m = 1 << std::max(depth - 1, 0);
    return std::max(m, 2);
}

void validate(const NetConfig& cfg)
{
    auto positive = [](int v, const char* name) {
        if (v <= 0)
            throw std::invalid_argument(std::string("net: ") + name + " must be positive");
    };
    positive(cfg.encoder_width, "encoder_width");
    positive(cfg.feature_dim, "feature_dim");
    positive(cfg.base_width, "base_width");
    positive(cfg.depth, "depth");
    positive(cfg.time_embed_dim, "time_embed_dim");
    positive(cfg.time_hidden, "time_hidden");
    if (cfg.time_embed_dim % 2)
        throw std::invalid_argument("net: time_embed_dim must be even");
    if (cfg.depth > 5)
        throw std::invalid_argument("net: depth must be <= 5");
    if (cfg.past_frames < 0 || cfg.past_frames > 2)
        throw std::invalid_argument("net: past_frames must be 0, 1 or 2");
    validate(cfg.codec, cfg.num_classes, cfg.max_instances);
}

template <typename T>
void ParamStore<T>::add(std::string name, Tensor<T> value)
{
    if (contains(name))
        throw std::invalid_argument("duplicate parameter " + name);
    index_.emplace(name, values_.size());
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
}

template <typename T>
std::size_t ParamStore<T>::numel() const
{
    std::size_t n = 0;
    for (const auto& v : values_)
        n += v.numel();
    return n;
}

template <typename T>
std::size_t ParamStore<T>::index(const std::string& name) const
{
    auto it = index_.find(name);
    if (it == index_.end())
        throw std::out_of_range("no parameter named " + name);
    return it->second;
}

namespace {

int level_width(const NetConfig& cfg, int level) { return cfg.base_width << level; }

template <typename T>
class Initializer {
public:
    // Without a seed only the layout is built and weights stay zero.
    Initializer(ParamStore<T>& store, std::optional<std::uint64_t> seed) : store_(store), random_(seed.has_value()), rng_(seed.value_or(0)) {}

    void glorot(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out)
    {
        const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> u(-a, a);
        Tensor<T> w(std::move(shape));
        if (random_)
            for (auto& v : w.data())
                v = static_cast<T>(u(rng_));
        store_.add(name, std::move(w));
    }
    void conv(const std::string& name, int out, int in, int k)
    {
        const auto kk = static_cast<std::size_t>(k * k);
        glorot(name + ".w", Shape{size_t(out), size_t(in), size_t(k), size_t(k)}, size_t(in) * kk, size_t(out) * kk);
        store_.add(name + ".b", Tensor<T>(Shape{size_t(out)}));
    }
    void linear(const std::string& name, int in, int out)
    {
        glorot(name + ".w", Shape{size_t(in), size_t(out)}, size_t(in), size_t(out));
        store_.add(name + ".b", Tensor<T>(Shape{size_t(out)}));
    }
    void norm(const std::string& name, int ch)
    {
        store_.add(name + ".g", Tensor<T>(Shape{size_t(ch)}, T(1)));
        store_.add(name + ".b", Tensor<T>(Shape{size_t(ch)}));
    }
    void resblock(const std::string& name, int ch, int time_hidden)
    {
        norm(name + ".n0", ch);
        conv(name + ".c0", ch, ch, 3);
        linear(name + ".t", time_hidden, ch);
        norm(name + ".n1", ch);
        conv(name + ".c1", ch, ch, 3);
    }

private:
    ParamStore<T>& store_;
    bool random_;
    std::mt19937_64 rng_;
};

template <typename T>
Var<T> act(const NetConfig& cfg, const Var<T>& x)
{
    return cfg.activation == Activation::relu ? ops::relu(x) : ops::gelu(x);
}

template <typename T>
Var<T> conv(const BoundNet<T>& net, const std::string& name, const Var<T>& x)
{
    return ops::conv2d(x, net[name + ".w"], net[name + ".b"]);
}

template <typename T>
Var<T> norm(const BoundNet<T>& net, const std::string& name, const Var<T>& x)
{
    return ops::layer_norm(x, net[name + ".g"], net[name + ".b"]);
}

template <typename T>
Var<T> linear(const BoundNet<T>& net, const std::string& name, const Var<T>& x)
{
    return ops::add(ops::matmul(x, net[name + ".w"]), net[name + ".b"]);
}

// Pre-norm residual block with the time embedding added after the first conv.
template <typename T>
Var<T> resblock(const BoundNet<T>& net, const std::string& name, const Var<T>& x, const Var<T>& temb)
{
    const auto& cfg = net.config();
    Var<T> h = conv(net, name + ".c0", act(cfg, norm(net, name + ".n0", x)));
    Var<T> tp = linear(net, name + ".t", temb);
    tp = ops::reshape(tp, Shape{tp.shape()[0], tp.shape()[1], 1, 1});
    h = ops::add(h, tp);
    h = conv(net, name + ".c1", act(cfg, norm(net, name + ".n1", h)));
    return ops::add(x, h);
}

template <typename T>
Var<T> codebook_projection(const Var<T>& logits, int bits, double b)
{
    const std::size_t cats = logits.shape()[1];
    Tensor<T> w(Shape{size_t(bits), cats, 1, 1});
    for (int j = 0; j < bits; ++j)
        for (std::size_t k = 0; k < cats; ++k)
            w[size_t(j) * cats + k] = ((k >> j) & 1U) ? static_cast<T>(2 * b) : T(0);
    Tensor<T> bias(Shape{size_t(bits)}, static_cast<T>(-b));
    return ops::conv2d(ops::softmax(logits, 1), Var<T>(std::move(w)), Var<T>(std::move(bias)));
}

void check_spatial(const NetConfig& cfg, const Shape& s, const char* what)
{
    const auto m = static_cast<std::size_t>(cfg.spatial_multiple());
    if (s.size() != 4 || s[2] == 0 || s[3] == 0 || s[2] % m || s[3] % m)
        throw std::invalid_argument(std::string(what) + ": spatial dims of " + shape_str(s) + " must be positive multiples of " +
                                    std::to_string(m));
}

} // namespace

template <typename T>
ParamStore<T> build_params(const NetConfig& cfg, std::optional<std::uint64_t> seed)
{
    validate(cfg);
    ParamStore<T> store;
    Initializer<T> init(store, seed);
    const int we = cfg.encoder_width;
    init.conv("enc.c0", we, 3, 3);
    init.conv("enc.c1", we, we, 3);
    init.conv("enc.c2", 2 * we, we, 3);
    init.conv("enc.c3", 2 * we, 2 * we, 3);
    init.conv("enc.merge", cfg.feature_dim, 3 * we, 1);

    init.linear("time.l0", cfg.time_embed_dim, cfg.time_hidden);
    init.linear("time.l1", cfg.time_hidden, cfg.time_hidden);

    init.conv("dec.in", level_width(cfg, 0), cfg.decoder_input_channels(), 3);
    for (int l = 0; l + 1 < cfg.depth; ++l) {
        init.resblock("dec.down" + std::to_string(l), level_width(cfg, l), cfg.time_hidden);
        init.conv("dec.pool" + std::to_string(l), level_width(cfg, l + 1), level_width(cfg, l), 3);
    }
    init.resblock("dec.mid", level_width(cfg, cfg.depth - 1), cfg.time_hidden);
    for (int l = cfg.depth - 2; l >= 0; --l) {
        const std::string n = "dec.up" + std::to_string(l);
        init.conv(n + ".proj", level_width(cfg, l), level_width(cfg, l + 1) + level_width(cfg, l), 3);
        init.resblock(n, level_width(cfg, l), cfg.time_hidden);
    }
    init.norm("dec.out", level_width(cfg, 0));
    init.conv("dec.cls", cfg.num_classes, level_width(cfg, 0), 1);
    init.conv("dec.ins", cfg.max_instances + 1, level_width(cfg, 0), 1);
    return store;
}

template <typename T>
ParamStore<T> init_params(const NetConfig& cfg, std::uint64_t seed)
{
    return build_params<T>(cfg, seed);
}

template <typename T>
void check_layout(const NetConfig& cfg, const std::vector<std::string>& names, const std::vector<const Shape*>& shapes)
{
    const ParamStore<T> expected = build_params<T>(cfg, std::nullopt);
    if (expected.names() != names)
        throw std::invalid_argument("parameter set does not match the net config");
    for (std::size_t i = 0; i < names.size(); ++i)
        if (expected.tensors()[i].shape() != *shapes[i])
            throw std::invalid_argument("parameter " + names[i] + " has shape " + shape_str(*shapes[i]) + ", config expects " +
                                        shape_str(expected.tensors()[i].shape()));
}

template <typename T>
BoundNet<T>::BoundNet(const NetConfig& cfg, const ParamStore<T>& params, bool requires_grad) : cfg_(cfg)
{
    std::vector<const Shape*> shapes;
    for (const auto& t : params.tensors())
        shapes.push_back(&t.shape());
    check_layout<T>(cfg, params.names(), shapes);
    for (std::size_t i = 0; i < params.size(); ++i) {
        index_.emplace(params.names()[i], i);
        vars_.emplace_back(params.tensors()[i], requires_grad);
    }
}

template <typename T>
BoundNet<T>::BoundNet(const NetConfig& cfg, const std::vector<std::string>& names, std::vector<Var<T>> vars)
    : cfg_(cfg), vars_(std::move(vars))
{
    if (names.size() != vars_.size())
        throw std::invalid_argument("BoundNet: name and variable counts differ");
    std::vector<const Shape*> shapes;
    for (const auto& v : vars_)
        shapes.push_back(&v.shape());
    check_layout<T>(cfg, names, shapes);
    for (std::size_t i = 0; i < names.size(); ++i)
        index_.emplace(names[i], i);
}

template <typename T>
const Var<T>& BoundNet<T>::operator[](const std::string& name) const
{
    auto it = index_.find(name);
    if (it == index_.end())
        throw std::out_of_range("no parameter named " + name);
    return vars_[it->second];
}

template <typename T>
std::vector<Tensor<T>> BoundNet<T>::grads() const
{
    std::vector<Tensor<T>> out;
    out.reserve(vars_.size());
    for (const auto& v : vars_)
        out.push_back(v.has_grad() ? v.grad() : Tensor<T>(v.shape()));
    return out;
}

template <typename T>
Var<T> encode_image(const BoundNet<T>& net, const Var<T>& images)
{
    const auto& cfg = net.config();
    check_spatial(cfg, images.shape(), "encode_image");
    if (images.shape()[1] != 3)
        throw std::invalid_argument("encode_image: expected 3 image channels, got " + shape_str(images.shape()));
    Var<T> f0 = act(cfg, conv(net, "enc.c0", images));
    f0 = act(cfg, conv(net, "enc.c1", f0));
    Var<T> f1 = act(cfg, conv(net, "enc.c2", ops::avg_pool2x2(f0)));
    f1 = act(cfg, conv(net, "enc.c3", f1));
    return conv(net, "enc.merge", ops::concat<T>({f0, ops::upsample2x(f1)}, 1));
}

template <typename T>
Tensor<T> timestep_embedding(const std::vector<double>& t, int dim)
{
    const std::size_t half = static_cast<std::size_t>(dim / 2);
    Tensor<T> out(Shape{t.size(), static_cast<std::size_t>(dim)});
    for (std::size_t n = 0; n < t.size(); ++n)
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            const double arg = t[n] * 1000.0 * freq;
            out[n * 2 * half + i] = static_cast<T>(std::sin(arg));
            out[n * 2 * half + half + i] = static_cast<T>(std::cos(arg));
        }
    return out;
}

template <typename T>
Var<T> logits_to_analog(const Var<T>& class_logits, const Var<T>& instance_logits, const CodecConfig& codec)
{
    return ops::concat<T>({codebook_projection(class_logits, codec.class_bits, codec.scale),
                           codebook_projection(instance_logits, codec.instance_bits, codec.scale)},
                          1);
}

template <typename T>
DenoiserOutput<T> decode_mask(const BoundNet<T>& net, const Var<T>& m_crpt, const Var<T>& h, const std::vector<double>& t,
                              const Var<T>& past)
{
    const auto& cfg = net.config();
    check_spatial(cfg, m_crpt.shape(), "decode_mask");
    const Shape& ms = m_crpt.shape();
    const std::size_t N = ms[0], D = static_cast<std::size_t>(cfg.bit_channels());
    if (ms[1] != D)
        throw std::invalid_argument("decode_mask: noisy bits " + shape_str(ms) + " need " + std::to_string(D) + " channels");
    const Shape hs{N, static_cast<std::size_t>(cfg.feature_dim), ms[2], ms[3]};
    if (h.shape() != hs)
        throw std::invalid_argument("decode_mask: features " + shape_str(h.shape()) + " do not match " + shape_str(hs));
    if (t.size() != N)
        throw std::invalid_argument("decode_mask: got " + std::to_string(t.size()) + " times for batch of " + std::to_string(N));
    for (double v : t)
        if (!(v >= 0.0 && v <= 1.0))
            throw std::domain_error("decode_mask: t outside [0,1]");

    std::vector<Var<T>> inputs{m_crpt, h};
    const Shape ps{N, static_cast<std::size_t>(cfg.past_frames) * D, ms[2], ms[3]};
    if (past) {
        if (cfg.past_frames == 0)
            throw std::invalid_argument("decode_mask: past masks given to a net configured without past-frame conditioning");
        if (past.shape() != ps)
            throw std::invalid_argument("decode_mask: past masks " + shape_str(past.shape()) + " do not match " + shape_str(ps));
        inputs.push_back(past);
    } else if (cfg.past_frames > 0) {
        inputs.emplace_back(Tensor<T>(ps));
    }

    Var<T> temb(timestep_embedding<T>(t, cfg.time_embed_dim));
    temb = act(cfg, linear(net, "time.l0", temb));
    temb = act(cfg, linear(net, "time.l1", temb));

    Var<T> x = conv(net, "dec.in", ops::concat<T>(inputs, 1));
    std::vector<Var<T>> skips;
    for (int l = 0; l + 1 < cfg.depth; ++l) {
        x = resblock(net, "dec.down" + std::to_string(l), x, temb);
        skips.push_back(x);
        x = conv(net, "dec.pool" + std::to_string(l), ops::avg_pool2x2(x));
    }
    x = resblock(net, "dec.mid", x, temb);
    for (int l = cfg.depth - 2; l >= 0; --l) {
        const std::string n = "dec.up" + std::to_string(l);
        x = conv(net, n + ".proj", ops::concat<T>({ops::upsample2x(x), skips[static_cast<std::size_t>(l)]}, 1));
        x = resblock(net, n, x, temb);
    }
    x = act(cfg, norm(net, "dec.out", x));

    DenoiserOutput<T> out;
    out.class_logits = conv(net, "dec.cls", x);
    out.instance_logits = conv(net, "dec.ins", x);
    out.m_pred = logits_to_analog(out.class_logits, out.instance_logits, cfg.codec);
    return out;
}

template <typename T>
DenoiseFn<T> make_denoise_fn(const BoundNet<T>& net, const Tensor<T>& h, const Tensor<T>& past)
{
    Var<T> hv(h);
    Var<T> pv = past.empty() ? Var<T>() : Var<T>(past);
    return [net, hv, pv](const Tensor<T>& noisy, double t) {
        NoGradGuard guard;
        const Shape s = noisy.shape();
        Var<T> x(noisy.reshaped(Shape{1, s[0], s[1], s[2]}));
        auto out = decode_mask(net, x, hv, {t}, pv);
        return out.m_pred.value().reshaped(s);
    };
}

template <typename T>
ParamStore<T> expand_for_past(const NetConfig& image_cfg, const ParamStore<T>& params, int past_frames)
{
    if (image_cfg.past_frames != 0)
        throw std::invalid_argument("expand_for_past: source net already conditions on past masks");
    NetConfig video_cfg = image_cfg;
    video_cfg.past_frames = past_frames;
    validate(video_cfg);
    BoundNet<T> check(image_cfg, params, false); // validates shapes
    ParamStore<T> out;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& name = params.names()[i];
        const auto& src = params.tensors()[i];
        if (name != "dec.in.w") {
            out.add(name, src);
            continue;
        }
        const Shape& s = src.shape();
        const std::size_t cin = static_cast<std::size_t>(video_cfg.decoder_input_channels());
        const std::size_t kk = s[2] * s[3];
        Tensor<T> w(Shape{s[0], cin, s[2], s[3]});
        for (std::size_t o = 0; o < s[0]; ++o)
            for (std::size_t c = 0; c < s[1]; ++c)
                for (std::size_t q = 0; q < kk; ++q)
                    w[(o * cin + c) * kk + q] = src[(o * s[1] + c) * kk + q];
        out.add(name, std::move(w));
    }
    return out;
}

#define BITSEG_INSTANTIATE_DENOISER(T)                                                                                       \
    template class ParamStore<T>;                                                                                            \
    template class BoundNet<T>;                                                                                              \
    template ParamStore<T> init_params<T>(const NetConfig&, std::uint64_t);                                                  \
    template Var<T> encode_image<T>(const BoundNet<T>&, const Var<T>&);                                                      \
    template DenoiserOutput<T> decode_mask<T>(const BoundNet<T>&, const Var<T>&, const Var<T>&, const std::vector<double>&, \
                                              const Var<T>&);                                                                \
    template Var<T> logits_to_analog<T>(const Var<T>&, const Var<T>&, const CodecConfig&);                                  \
    template Tensor<T> timestep_embedding<T>(const std::vector<double>&, int);                                               \
    template DenoiseFn<T> make_denoise_fn<T>(const BoundNet<T>&, const Tensor<T>&, const Tensor<T>&);                       \
    template ParamStore<T> expand_for_past<T>(const NetConfig&, const ParamStore<T>&, int);

BITSEG_INSTANTIATE_DENOISER(float)
BITSEG_INSTANTIATE_DENOISER(double)

} // namespace bitseg
