#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace bitseg {

/// RGB image, planar [3, H, W], values in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w) : height(h), width(w), data(3 * static_cast<std::size_t>(h) * static_cast<std::size_t>(w), 0.f) {}

    float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }

    bool operator==(const Image&) const = default;
};

struct PanopticMask;

void write_ppm(const Image& image, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);
void write_png(const Image& image, const std::filesystem::path& path);

/// Deterministic color for a (class, instance) segment; null is black.
std::array<std::uint8_t, 3> segment_color(std::uint16_t cls, std::uint16_t instance);
/// Mask colors alone.
Image colorize(const PanopticMask& mask);
/// Image blended with mask colors at the given alpha.
Image overlay(const Image& image, const PanopticMask& mask, float alpha = 0.5f);

} // namespace bitseg
