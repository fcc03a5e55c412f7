#include "bitseg/image.hpp"
#include "bitseg/panoptic_mask.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>

namespace bitseg {

namespace {

std::uint8_t to_byte(float v)
{
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
}

std::vector<std::uint8_t> interleave(const Image& img)
{
    const std::size_t S = static_cast<std::size_t>(img.height) * static_cast<std::size_t>(img.width);
    std::vector<std::uint8_t> rgb(3 * S);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t c = 0; c < 3; ++c)
            rgb[3 * s + c] = to_byte(img.data[c * S + s]);
    return rgb;
}

} // namespace

void write_ppm(const Image& image, const std::filesystem::path& path)
{
    std::ofstream f(path, std::ios::binary);
    if (!f)
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    f << "P6\n" << image.width << ' ' << image.height << "\n255\n";
    const auto rgb = interleave(image);
    f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!f)
        throw std::runtime_error("write failed for " + path.string());
}

Image read_ppm(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw std::runtime_error("cannot open image " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    f.get();
    if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255)
        throw std::runtime_error(path.string() + ": only binary 8-bit PPM (P6) is supported");
    const std::size_t S = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    std::vector<std::uint8_t> rgb(3 * S);
    f.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!f)
        throw std::runtime_error(path.string() + ": truncated pixel data");
    Image img(h, w);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t c = 0; c < 3; ++c)
            img.data[c * S + s] = static_cast<float>(rgb[3 * s + c]) / 255.f;
    return img;
}

void write_png(const Image& image, const std::filesystem::path& path)
{
    std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
    if (!fp)
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng failed writing " + path.string());
    }
    auto rgb = interleave(image);
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < image.height; ++y)
        png_write_row(png, rgb.data() + static_cast<std::size_t>(y) * 3 * static_cast<std::size_t>(image.width));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

std::array<std::uint8_t, 3> segment_color(std::uint16_t cls, std::uint16_t instance)
{
    if (cls == 0)
        return {0, 0, 0};
    // splitmix64 finalizer over the packed key
    std::uint64_t z = (static_cast<std::uint64_t>(cls) << 16 | instance) + 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return {static_cast<std::uint8_t>(64 + (z & 0xBF)), static_cast<std::uint8_t>(64 + ((z >> 8) & 0xBF)),
            static_cast<std::uint8_t>(64 + ((z >> 16) & 0xBF))};
}

Image colorize(const PanopticMask& mask)
{
    Image out(mask.height, mask.width);
    const std::size_t S = mask.pixels();
    for (std::size_t s = 0; s < S; ++s) {
        const auto c = segment_color(mask.classes[s], mask.instances[s]);
        for (std::size_t k = 0; k < 3; ++k)
            out.data[k * S + s] = static_cast<float>(c[k]) / 255.f;
    }
    return out;
}

Image overlay(const Image& image, const PanopticMask& mask, float alpha)
{
    if (image.height != mask.height || image.width != mask.width)
        throw std::invalid_argument("overlay: image and mask sizes differ");
    Image out = colorize(mask);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = alpha * out.data[i] + (1.f - alpha) * image.data[i];
    return out;
}

} // namespace bitseg
