#pragma once

#include "bitseg/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace bitseg {

class MaskError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Two-channel panoptic mask: a semantic class and an instance id per pixel.
/// Class 0 is the null class and instance 0 means "no instance".
struct PanopticMask {
    int height = 0;
    int width = 0;
    int num_classes = 0;   // C: valid classes are [0, C)
    int max_instances = 0; // K: valid instance ids are [0, K]
    std::vector<std::uint16_t> classes;
    std::vector<std::uint16_t> instances;

    PanopticMask() = default;
    PanopticMask(int h, int w, int num_classes, int max_instances);

    std::size_t pixels() const { return classes.size(); }
    std::uint16_t class_at(int y, int x) const { return classes[static_cast<std::size_t>(y * width + x)]; }
    std::uint16_t instance_at(int y, int x) const { return instances[static_cast<std::size_t>(y * width + x)]; }

    bool operator==(const PanopticMask&) const = default;
};

/// Throws MaskError when ranges or the null-class invariant are violated.
void validate(const PanopticMask& mask);

/// (class, instance) pair identifying a segment.
using SegmentKey = std::pair<std::uint16_t, std::uint16_t>;

/// Pixel count per segment; null-class pixels are skipped.
std::map<SegmentKey, std::size_t> segment_areas(const PanopticMask& mask);

/// Sorted distinct nonzero instance ids.
std::vector<std::uint16_t> present_instance_ids(const PanopticMask& mask);

struct CodecConfig {
    int class_bits = 4;    // n_c
    int instance_bits = 4; // n_i
    double scale = 0.1;    // b: analog bits live in {-b, +b}

    int channels() const { return class_bits + instance_bits; }
    bool operator==(const CodecConfig&) const = default;
};

/// Checks 2^n_c >= C, 2^n_i >= K+1 and b > 0.
void validate(const CodecConfig& cfg, int num_classes, int max_instances);

/// Least-significant-bit-first binary expansion: result[i*n + k] = (x[i] >> k) & 1.
std::vector<std::uint8_t> int2bit(std::span<const std::uint32_t> values, int n);
/// Inverse of int2bit over groups of n bits.
std::vector<std::uint32_t> bit2int(std::span<const std::uint8_t> bits, int n);

/// Analog bits in planar layout [n_c + n_i, H, W]; class bits come first.
template <typename T>
Tensor<T> encode_analog(const PanopticMask& mask, const CodecConfig& cfg);

/// Thresholds at 0 and converts back to integers. Decoded classes >= C and
/// instances > K map to null, and null-class pixels get instance 0.
template <typename T>
PanopticMask decode_analog(const Tensor<T>& bits, const CodecConfig& cfg, int num_classes, int max_instances);

/// Injective map from instance ids to ids; index is the old id.
using InstanceMap = std::vector<std::uint16_t>;

/// Draws a random injective map from the ids present in any of `masks` into
/// [1, K]; 0 stays 0. Shared across masks so video frames stay consistent.
InstanceMap draw_instance_map(std::span<const PanopticMask> masks, int max_instances, std::mt19937_64& rng);
PanopticMask apply_instance_map(const PanopticMask& mask, const InstanceMap& map);

PanopticMask permute_instance_ids(const PanopticMask& mask, std::mt19937_64& rng);

/// Instances covering fewer than min_pixels pixels become null (class 0,
/// instance 0).
PanopticMask filter_small_instances(const PanopticMask& mask, int min_pixels);

// Bit-exact "PANM" v1 file: magic, u8 version, u32-LE H, W, C, K, then H*W
// u16-LE classes and H*W u16-LE instances.
void save_mask(const PanopticMask& mask, const std::filesystem::path& path);
PanopticMask load_mask(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_mask(const PanopticMask& mask);
PanopticMask deserialize_mask(std::span<const std::uint8_t> bytes);

} // namespace bitseg
