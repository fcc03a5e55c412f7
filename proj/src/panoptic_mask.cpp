#include "bitseg/panoptic_mask.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <string>

namespace bitseg {

PanopticMask::PanopticMask(int h, int w, int c, int k)
    : height(h), width(w), num_classes(c), max_instances(k),
      classes(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), 0),
      instances(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), 0)
{
    if (h < 0 || w < 0 || c < 1 || k < 0)
        throw MaskError("PanopticMask: invalid dimensions");
}

void validate(const PanopticMask& m)
{
    const std::size_t n = static_cast<std::size_t>(m.height) * static_cast<std::size_t>(m.width);
    if (m.classes.size() != n || m.instances.size() != n)
        throw MaskError("mask: channel sizes do not match " + std::to_string(m.height) + "x" + std::to_string(m.width));
    for (std::size_t i = 0; i < n; ++i) {
        if (m.classes[i] >= m.num_classes)
            throw MaskError("mask: class " + std::to_string(m.classes[i]) + " at pixel " + std::to_string(i) +
                            " outside [0," + std::to_string(m.num_classes) + ")");
        if (m.instances[i] > m.max_instances)
            throw MaskError("mask: instance " + std::to_string(m.instances[i]) + " at pixel " + std::to_string(i) +
                            " exceeds K=" + std::to_string(m.max_instances));
        if (m.classes[i] == 0 && m.instances[i] != 0)
            throw MaskError("mask: null-class pixel " + std::to_string(i) + " carries instance " + std::to_string(m.instances[i]));
    }
}

std::map<SegmentKey, std::size_t> segment_areas(const PanopticMask& m)
{
    std::map<SegmentKey, std::size_t> areas;
    for (std::size_t i = 0; i < m.classes.size(); ++i)
        if (m.classes[i] != 0)
            ++areas[{m.classes[i], m.instances[i]}];
    return areas;
}

std::vector<std::uint16_t> present_instance_ids(const PanopticMask& m)
{
    std::set<std::uint16_t> ids;
    for (auto v : m.instances)
        if (v != 0)
            ids.insert(v);
    return {ids.begin(), ids.end()};
}

void validate(const CodecConfig& cfg, int num_classes, int max_instances)
{
    if (cfg.class_bits < 1 || cfg.class_bits > 16 || cfg.instance_bits < 1 || cfg.instance_bits > 16)
        throw MaskError("codec: bit counts must be in [1,16]");
    if ((1L << cfg.class_bits) < num_classes)
        throw MaskError("codec: " + std::to_string(cfg.class_bits) + " class bits cannot hold C=" + std::to_string(num_classes));
    if ((1L << cfg.instance_bits) < max_instances + 1)
        throw MaskError("codec: " + std::to_string(cfg.instance_bits) + " instance bits cannot hold K=" + std::to_string(max_instances));
    if (!(cfg.scale > 0.0))
        throw MaskError("codec: scale b must be positive");
}

std::vector<std::uint8_t> int2bit(std::span<const std::uint32_t> values, int n)
{
    if (n < 1 || n > 31)
        throw MaskError("int2bit: bit count must be in [1,31]");
    std::vector<std::uint8_t> bits(values.size() * static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (values[i] >> n)
            throw MaskError("int2bit: value " + std::to_string(values[i]) + " does not fit in " + std::to_string(n) + " bits");
        for (int k = 0; k < n; ++k)
            bits[i * static_cast<std::size_t>(n) + static_cast<std::size_t>(k)] = static_cast<std::uint8_t>((values[i] >> k) & 1u);
    }
    return bits;
}

std::vector<std::uint32_t> bit2int(std::span<const std::uint8_t> bits, int n)
{
    if (n < 1 || bits.size() % static_cast<std::size_t>(n))
        throw MaskError("bit2int: bit count does not divide input length");
    std::vector<std::uint32_t> values(bits.size() / static_cast<std::size_t>(n), 0);
    for (std::size_t i = 0; i < values.size(); ++i)
        for (int k = 0; k < n; ++k)
            values[i] |= static_cast<std::uint32_t>(bits[i * static_cast<std::size_t>(n) + static_cast<std::size_t>(k)] != 0) << k;
    return values;
}

template <typename T>
Tensor<T> encode_analog(const PanopticMask& mask, const CodecConfig& cfg)
{
    validate(cfg, mask.num_classes, mask.max_instances);
    validate(mask);
    const std::size_t S = mask.pixels();
    const int nc = cfg.class_bits, ni = cfg.instance_bits;
    Tensor<T> out(Shape{static_cast<std::size_t>(nc + ni), static_cast<std::size_t>(mask.height), static_cast<std::size_t>(mask.width)});
    const T b = static_cast<T>(cfg.scale);
    T* p = out.ptr();
    for (std::size_t s = 0; s < S; ++s) {
        for (int k = 0; k < nc; ++k)
            p[static_cast<std::size_t>(k) * S + s] = ((mask.classes[s] >> k) & 1u) ? b : -b;
        for (int k = 0; k < ni; ++k)
            p[static_cast<std::size_t>(nc + k) * S + s] = ((mask.instances[s] >> k) & 1u) ? b : -b;
    }
    return out;
}

template <typename T>
PanopticMask decode_analog(const Tensor<T>& bits, const CodecConfig& cfg, int num_classes, int max_instances)
{
    const int nc = cfg.class_bits, ni = cfg.instance_bits;
    if (bits.rank() != 3 || bits.dim(0) != static_cast<std::size_t>(nc + ni))
        throw MaskError("decode_analog: expected [" + std::to_string(nc + ni) + ",H,W], got " + shape_str(bits.shape()));
    PanopticMask m(static_cast<int>(bits.dim(1)), static_cast<int>(bits.dim(2)), num_classes, max_instances);
    const std::size_t S = m.pixels();
    const T* p = bits.ptr();
    for (std::size_t s = 0; s < S; ++s) {
        std::uint32_t c = 0, inst = 0;
        for (int k = 0; k < nc; ++k)
            c |= static_cast<std::uint32_t>(p[static_cast<std::size_t>(k) * S + s] > T(0)) << k;
        for (int k = 0; k < ni; ++k)
            inst |= static_cast<std::uint32_t>(p[static_cast<std::size_t>(nc + k) * S + s] > T(0)) << k;
        if (c >= static_cast<std::uint32_t>(num_classes))
            c = 0;
        if (inst > static_cast<std::uint32_t>(max_instances) || c == 0)
            inst = 0;
        m.classes[s] = static_cast<std::uint16_t>(c);
        m.instances[s] = static_cast<std::uint16_t>(inst);
    }
    return m;
}

InstanceMap draw_instance_map(std::span<const PanopticMask> masks, int max_instances, std::mt19937_64& rng)
{
    std::set<std::uint16_t> ids;
    std::uint16_t largest = 0;
    for (const auto& m : masks)
        for (auto v : present_instance_ids(m)) {
            ids.insert(v);
            largest = std::max(largest, v);
        }
    if (ids.size() > static_cast<std::size_t>(max_instances))
        throw MaskError("permute_instance_ids: " + std::to_string(ids.size()) + " instances exceed K=" + std::to_string(max_instances));
    std::vector<std::uint16_t> pool(static_cast<std::size_t>(max_instances));
    std::iota(pool.begin(), pool.end(), std::uint16_t{1});
    std::shuffle(pool.begin(), pool.end(), rng);
    InstanceMap map(static_cast<std::size_t>(largest) + 1, 0);
    std::size_t next = 0;
    for (auto id : ids)
        map[id] = pool[next++];
    return map;
}

PanopticMask apply_instance_map(const PanopticMask& mask, const InstanceMap& map)
{
    PanopticMask out = mask;
    for (auto& v : out.instances) {
        if (v >= map.size())
            throw MaskError("apply_instance_map: id " + std::to_string(v) + " not covered by map");
        v = map[v];
    }
    return out;
}

PanopticMask permute_instance_ids(const PanopticMask& mask, std::mt19937_64& rng)
{
    const auto map = draw_instance_map(std::span<const PanopticMask>(&mask, 1), mask.max_instances, rng);
    return apply_instance_map(mask, map);
}

PanopticMask filter_small_instances(const PanopticMask& mask, int min_pixels)
{
    if (min_pixels < 0)
        throw MaskError("filter_small_instances: min_pixels must be non-negative");
    const auto areas = segment_areas(mask);
    PanopticMask out = mask;
    for (std::size_t i = 0; i < out.pixels(); ++i) {
        if (out.instances[i] == 0 || out.classes[i] == 0)
            continue;
        if (areas.at({out.classes[i], out.instances[i]}) < static_cast<std::size_t>(min_pixels)) {
            out.classes[i] = 0;
            out.instances[i] = 0;
        }
    }
    return out;
}

template Tensor<float> encode_analog<float>(const PanopticMask&, const CodecConfig&);
template Tensor<double> encode_analog<double>(const PanopticMask&, const CodecConfig&);
template PanopticMask decode_analog<float>(const Tensor<float>&, const CodecConfig&, int, int);
template PanopticMask decode_analog<double>(const Tensor<double>&, const CodecConfig&, int, int);

} // namespace bitseg
