#include "bitseg/panoptic_mask.hpp"

#include <doctest.h>

#include <random>
#include <set>

using namespace bitseg;

namespace {

// Random valid mask: classes in [0,C), things get instance ids in [1,K].
PanopticMask random_mask(std::mt19937_64& rng, int h, int w, int c, int k)
{
    PanopticMask m(h, w, c, k);
    std::uniform_int_distribution<int> cls(0, c - 1), inst(0, k);
    for (std::size_t i = 0; i < m.pixels(); ++i) {
        m.classes[i] = static_cast<std::uint16_t>(cls(rng));
        m.instances[i] = m.classes[i] == 0 ? 0 : static_cast<std::uint16_t>(inst(rng));
    }
    return m;
}

// Unordered pixel partition: for every pixel, the set of pixels sharing its segment.
std::vector<std::size_t> partition_signature(const PanopticMask& m)
{
    std::map<SegmentKey, std::size_t> first;
    std::vector<std::size_t> sig(m.pixels());
    for (std::size_t i = 0; i < m.pixels(); ++i) {
        auto [it, inserted] = first.emplace(SegmentKey{m.classes[i], m.instances[i]}, i);
        sig[i] = it->second;
    }
    return sig;
}

} // namespace

TEST_CASE("int2bit is LSB-first")
{
    std::vector<std::uint32_t> v{5};
    CHECK(int2bit(v, 3) == std::vector<std::uint8_t>{1, 0, 1});
    v = {0};
    CHECK(int2bit(v, 4) == std::vector<std::uint8_t>{0, 0, 0, 0});
    v = {6};
    CHECK(int2bit(v, 3) == std::vector<std::uint8_t>{0, 1, 1});
    v = {8};
    CHECK_THROWS_AS(int2bit(v, 3), MaskError);
}

TEST_CASE("bit2int inverts int2bit")
{
    std::vector<std::uint8_t> b{1, 0, 1};
    CHECK(bit2int(b, 3) == std::vector<std::uint32_t>{5});
    b = {1, 1, 1, 1};
    CHECK(bit2int(b, 4) == std::vector<std::uint32_t>{15});
    for (int n = 1; n <= 10; ++n) {
        std::vector<std::uint32_t> all(1u << n);
        for (std::uint32_t x = 0; x < all.size(); ++x)
            all[x] = x;
        CHECK(bit2int(int2bit(all, n), n) == all);
    }
}

TEST_CASE("encode_analog places class bits first in {-b,+b}")
{
    PanopticMask m(1, 1, 4, 3);
    m.classes[0] = 1;
    m.instances[0] = 2;
    CodecConfig cfg{2, 2, 0.1};
    auto x = encode_analog<double>(m, cfg);
    CHECK(x.shape() == Shape{4, 1, 1});
    CHECK(x[0] == doctest::Approx(0.1));
    CHECK(x[1] == doctest::Approx(-0.1));
    CHECK(x[2] == doctest::Approx(-0.1));
    CHECK(x[3] == doctest::Approx(0.1));

    PanopticMask zero(3, 2, 4, 3);
    const auto z = encode_analog<double>(zero, cfg);
    for (double v : z.data())
        CHECK(v == -0.1);
    // b = 1 gives the unit-scaled analog bits.
    const auto z1 = encode_analog<double>(zero, CodecConfig{2, 2, 1.0});
    for (double v : z1.data())
        CHECK(v == -1.0);
}

TEST_CASE("codec validation")
{
    PanopticMask m(2, 2, 5, 8);
    CHECK_THROWS_AS(encode_analog<float>(m, CodecConfig{2, 4, 0.1}), MaskError); // 4 < C
    CHECK_THROWS_AS(encode_analog<float>(m, CodecConfig{3, 3, 0.1}), MaskError); // 8 < K+1
    CHECK_THROWS_AS(encode_analog<float>(m, CodecConfig{3, 4, 0.0}), MaskError);
    m.instances[0] = 1; // class 0 with an instance
    CHECK_THROWS_AS(validate(m), MaskError);
}

TEST_CASE("decode_analog roundtrip, noise margin and zero input")
{
    std::mt19937_64 rng(1);
    const CodecConfig cfg{3, 4, 0.1};
    for (int trial = 0; trial < 200; ++trial) {
        auto m = random_mask(rng, 5, 7, 6, 12);
        auto x = encode_analog<float>(m, cfg);
        CHECK(decode_analog(x, cfg, 6, 12) == m);
        std::uniform_real_distribution<float> noise(-0.099f, 0.099f);
        for (auto& v : x.data())
            v += noise(rng);
        CHECK(decode_analog(x, cfg, 6, 12) == m);
    }
    Tensor<float> zeros(Shape{7, 3, 3});
    auto null = decode_analog(zeros, cfg, 6, 12);
    for (std::size_t i = 0; i < null.pixels(); ++i) {
        CHECK(null.classes[i] == 0);
        CHECK(null.instances[i] == 0);
    }
}

TEST_CASE("decode_analog maps out-of-range codes to null")
{
    const CodecConfig cfg{3, 4, 1.0};
    Tensor<double> x(Shape{7, 1, 2}, 1.0); // all bits set: class 7, instance 15
    auto m = decode_analog(x, cfg, 5, 8);
    CHECK(m.classes[0] == 0);
    CHECK(m.instances[0] == 0);
    // class in range but instance too large -> instance dropped only
    for (int k = 1; k < 3; ++k) x[static_cast<std::size_t>(k) * 2] = -1.0; // class bits 1,0,0 -> 1
    m = decode_analog(x, cfg, 5, 8);
    CHECK(m.classes[0] == 1);
    CHECK(m.instances[0] == 0);
    validate(m);
}

TEST_CASE("permute_instance_ids preserves partition and classes")
{
    std::mt19937_64 rng(2);
    PanopticMask m(2, 3, 3, 8);
    m.classes = {1, 1, 2, 2, 2, 0};
    m.instances = {3, 3, 7, 7, 0, 0};
    std::set<std::vector<std::uint16_t>> seen;
    for (int i = 0; i < 20; ++i) {
        auto p = permute_instance_ids(m, rng);
        CHECK(p.classes == m.classes);
        CHECK(partition_signature(p) == partition_signature(m));
        CHECK(p.instances[0] != p.instances[2]);
        CHECK(p.instances[0] >= 1);
        CHECK(p.instances[0] <= 8);
        CHECK(p.instances[4] == 0);
        seen.insert(p.instances);
    }
    CHECK(seen.size() > 1);

    PanopticMask empty(3, 3, 3, 4);
    CHECK(permute_instance_ids(empty, rng) == empty);

    PanopticMask crowded(1, 3, 2, 2);
    crowded.classes = {1, 1, 1};
    crowded.instances = {1, 2, 3};
    crowded.max_instances = 3;
    auto ok = permute_instance_ids(crowded, rng);
    crowded.max_instances = 2;
    crowded.instances = {1, 2, 2};
    CHECK_NOTHROW(permute_instance_ids(crowded, rng));
    crowded.max_instances = 1;
    CHECK_THROWS_AS(permute_instance_ids(crowded, rng), MaskError);
    (void)ok;
}

TEST_CASE("permutation property on random masks")
{
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        auto m = random_mask(rng, 6, 6, 4, 15);
        auto p = permute_instance_ids(m, rng);
        CHECK(p.classes == m.classes);
        CHECK(partition_signature(p) == partition_signature(m));
        CHECK_NOTHROW(validate(p));
    }
}

TEST_CASE("filter_small_instances")
{
    PanopticMask m(10, 10, 3, 4);
    for (std::size_t i = 0; i < m.pixels(); ++i)
        m.classes[i] = 1;
    for (std::size_t i = 0; i < 50; ++i) {
        m.classes[i] = 2;
        m.instances[i] = 1;
    }
    CHECK(filter_small_instances(m, 0) == m);
    auto f = filter_small_instances(m, 80);
    CHECK(f.instances[0] == 0);
    CHECK(f.classes[0] == 0);
    CHECK(f.classes[60] == 1);
    CHECK(filter_small_instances(m, 10) == m);
    CHECK(filter_small_instances(f, 80) == f);

    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        auto r = random_mask(rng, 8, 8, 3, 6);
        auto once = filter_small_instances(r, 7);
        CHECK(filter_small_instances(once, 7) == once);
    }
}

TEST_CASE("PANM serialization layout")
{
    PanopticMask m(1, 2, 5, 8);
    m.classes = {3, 0};
    m.instances = {258, 0};
    m.max_instances = 300;
    auto bytes = serialize_mask(m);
    const std::vector<std::uint8_t> expected{'P', 'A', 'N', 'M', 1, 1, 0, 0, 0, 2, 0, 0, 0, 5, 0, 0, 0, 44, 1, 0, 0, 3, 0, 0, 0, 2, 1, 0, 0};
    CHECK(bytes == expected);
    CHECK(deserialize_mask(bytes) == m);
    bytes[0] = 'X';
    CHECK_THROWS_AS(deserialize_mask(bytes), MaskError);
}
