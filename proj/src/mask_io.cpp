#include "bitseg/panoptic_mask.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <iterator>

namespace bitseg {

namespace {

constexpr std::array<char, 4> kMagic{'P', 'A', 'N', 'M'};
constexpr std::uint8_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v)
{
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

std::uint32_t get_u32(const std::uint8_t* p)
{
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 | static_cast<std::uint32_t>(p[2]) << 16 |
           static_cast<std::uint32_t>(p[3]) << 24;
}

} // namespace

std::vector<std::uint8_t> serialize_mask(const PanopticMask& mask)
{
    validate(mask);
    std::vector<std::uint8_t> out;
    out.reserve(21 + 4 * mask.pixels());
    out.insert(out.end(), kMagic.begin(), kMagic.end());
    out.push_back(kVersion);
    put_u32(out, static_cast<std::uint32_t>(mask.height));
    put_u32(out, static_cast<std::uint32_t>(mask.width));
    put_u32(out, static_cast<std::uint32_t>(mask.num_classes));
    put_u32(out, static_cast<std::uint32_t>(mask.max_instances));
    for (auto v : mask.classes)
        put_u16(out, v);
    for (auto v : mask.instances)
        put_u16(out, v);
    return out;
}

PanopticMask deserialize_mask(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < 21 || std::memcmp(bytes.data(), kMagic.data(), 4) != 0)
        throw MaskError("mask file: bad magic");
    if (bytes[4] != kVersion)
        throw MaskError("mask file: unsupported version " + std::to_string(bytes[4]));
    const std::uint32_t h = get_u32(&bytes[5]), w = get_u32(&bytes[9]);
    const std::uint32_t c = get_u32(&bytes[13]), k = get_u32(&bytes[17]);
    const std::size_t n = static_cast<std::size_t>(h) * w;
    if (bytes.size() != 21 + 4 * n)
        throw MaskError("mask file: expected " + std::to_string(21 + 4 * n) + " bytes, got " + std::to_string(bytes.size()));
    PanopticMask m(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c), static_cast<int>(k));
    const std::uint8_t* p = bytes.data() + 21;
    for (std::size_t i = 0; i < n; ++i)
        m.classes[i] = static_cast<std::uint16_t>(p[2 * i] | p[2 * i + 1] << 8);
    p += 2 * n;
    for (std::size_t i = 0; i < n; ++i)
        m.instances[i] = static_cast<std::uint16_t>(p[2 * i] | p[2 * i + 1] << 8);
    validate(m);
    return m;
}

void save_mask(const PanopticMask& mask, const std::filesystem::path& path)
{
    const auto bytes = serialize_mask(mask);
    std::ofstream f(path, std::ios::binary);
    if (!f)
        throw MaskError("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f)
        throw MaskError("write failed for " + path.string());
}

PanopticMask load_mask(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw MaskError("cannot open mask file " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    try {
        return deserialize_mask(bytes);
    } catch (const MaskError& e) {
        throw MaskError(path.string() + ": " + e.what());
    }
}

} // namespace bitseg
