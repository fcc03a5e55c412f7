#include "bitseg/metrics.hpp"

#include "metric_oracle.hpp"

#include <doctest.h>

#include <random>

using namespace bitseg;

namespace {

PanopticMask rect_mask(int h, int w, int y0, int x0, int y1, int x1, std::uint16_t cls, std::uint16_t id)
{
    PanopticMask m(h, w, 5, 8);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            m.classes[static_cast<std::size_t>(y * w + x)] = cls;
            m.instances[static_cast<std::size_t>(y * w + x)] = id;
        }
    return m;
}

const std::vector<bool> kThing{false, false, false, true, true};

} // namespace

TEST_CASE("match_segments agrees with the brute-force oracle")
{
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto gt = testing::random_blocky_mask(16, 16, 5, 8, rng);
        // predictions are perturbed copies so that real matches occur
        auto pred = testing::perturb_mask(gt, rng, trial % 4 == 0 ? 0.5 : 0.15);
        const auto fast = match_segments(pred, gt);
        const auto slow = testing::brute_force_match(pred, gt);
        REQUIRE(testing::same_match(fast, slow));
    }
}

TEST_CASE("match_segments trivial cases")
{
    std::mt19937_64 rng(2);
    const auto m = testing::random_blocky_mask(16, 16, 5, 8, rng);
    const auto self = match_segments(m, m);
    CHECK(self.unmatched_gt.empty());
    CHECK(self.unmatched_pred.empty());
    for (const auto& p : self.pairs)
        CHECK(p.iou == 1.0);
    CHECK(self.pairs.size() == segment_areas(m).size());

    const auto a = rect_mask(8, 8, 0, 0, 4, 4, 3, 1);
    const auto b = rect_mask(8, 8, 4, 4, 8, 8, 3, 1);
    const auto d = match_segments(a, b);
    CHECK(d.pairs.empty());
    CHECK(d.unmatched_gt.size() == 1);
    CHECK(d.unmatched_pred.size() == 1);
    CHECK_THROWS_AS(match_segments(a, PanopticMask(4, 8, 5, 8)), std::invalid_argument);
}

TEST_CASE("PQ hand case: IoU 0.6 true positive plus one missed segment")
{
    // gt: two class-3 instances; pred covers 6 of the 10 pixels of the first
    PanopticMask gt(4, 10, 5, 8), pred(4, 10, 5, 8);
    for (int x = 0; x < 10; ++x) {
        gt.classes[static_cast<std::size_t>(x)] = 3;
        gt.instances[static_cast<std::size_t>(x)] = 1;
        gt.classes[static_cast<std::size_t>(20 + x)] = 3;
        gt.instances[static_cast<std::size_t>(20 + x)] = 2;
    }
    for (int x = 0; x < 6; ++x) {
        pred.classes[static_cast<std::size_t>(x)] = 3;
        pred.instances[static_cast<std::size_t>(x)] = 4;
    }
    const PanopticMask preds[] = {pred}, gts[] = {gt};
    const auto r = panoptic_quality(preds, gts, kThing);
    CHECK(r.per_class[3].tp == 1);
    CHECK(r.per_class[3].fn == 1);
    CHECK(r.per_class[3].fp == 0);
    CHECK(r.pq == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(r.pq_thing == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(r.pq_stuff == 0.0);
}

TEST_CASE("PQ properties")
{
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<PanopticMask> gts, preds;
        for (int i = 0; i < 3; ++i) {
            gts.push_back(testing::random_blocky_mask(16, 16, 5, 8, rng));
            preds.push_back(testing::perturb_mask(gts.back(), rng, 0.2));
        }
        CHECK(panoptic_quality(gts, gts, kThing).pq == 1.0);
        const double base = panoptic_quality(preds, gts, kThing).pq;
        CHECK(base >= 0.0);
        CHECK(base <= 1.0);
        std::vector<PanopticMask> permuted;
        for (const auto& p : preds)
            permuted.push_back(permute_instance_ids(p, rng));
        CHECK(panoptic_quality(permuted, gts, kThing).pq == doctest::Approx(base).epsilon(1e-12));
        std::vector<PanopticMask> gperm;
        for (const auto& g : gts)
            gperm.push_back(permute_instance_ids(g, rng));
        CHECK(panoptic_quality(preds, gperm, kThing).pq == doctest::Approx(base).epsilon(1e-12));
    }
    CHECK_THROWS_AS(panoptic_quality(std::span<const PanopticMask>{}, std::span<const PanopticMask>{}, kThing),
                    std::invalid_argument);
}

TEST_CASE("stuff instance ids are ignored")
{
    auto gt = rect_mask(4, 4, 0, 0, 4, 4, 1, 0);
    auto pred = gt;
    pred.instances.assign(pred.pixels(), 3);
    const PanopticMask p[] = {pred}, g[] = {gt};
    CHECK(panoptic_quality(p, g, kThing).pq == 1.0);
}

TEST_CASE("jaccard and boundary examples")
{
    const auto gt = rect_mask(10, 12, 2, 2, 6, 6, 3, 1);
    const PanopticMask g[] = {gt};
    CHECK(jaccard_mean(g, g) == 1.0);
    const PanopticMask empty[] = {PanopticMask(10, 12, 5, 8)};
    CHECK(jaccard_mean(empty, g) == 0.0);

    // equal areas overlapping by half: IoU = 8 / 24
    const PanopticMask half[] = {rect_mask(10, 12, 2, 4, 6, 8, 3, 5)};
    CHECK(jaccard_mean(half, g) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    const auto a = object_mask(gt, 1);
    CHECK(boundary_f(a, a, 10, 12, 1) == 1.0);
    const auto shifted = object_mask(rect_mask(10, 12, 2, 3, 6, 7, 3, 1), 1);
    CHECK(boundary_f(shifted, a, 10, 12, 1) == 1.0);
    CHECK(boundary_f(shifted, a, 10, 12, 0) < 1.0);
    const auto far = object_mask(rect_mask(10, 12, 0, 9, 3, 12, 3, 1), 1);
    CHECK(boundary_f(far, a, 10, 12, 1) == 0.0);
    CHECK_THROWS_AS(boundary_f(a, a, 10, 12, -1), std::invalid_argument);
    CHECK(default_boundary_radius(64, 64) == 1);
    CHECK(default_boundary_radius(480, 854) == 8);
}

TEST_CASE("boundary_f is symmetric")
{
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        const auto m1 = testing::random_blocky_mask(16, 16, 5, 8, rng);
        const auto m2 = testing::perturb_mask(m1, rng, 0.3);
        const auto a = object_mask(m1, 1), b = object_mask(m2, 1);
        const int r = static_cast<int>(trial % 3);
        CHECK(boundary_f(a, b, 16, 16, r) == boundary_f(b, a, 16, 16, r));
    }
}

TEST_CASE("video J uses a video-level assignment")
{
    std::vector<PanopticMask> gt, pred;
    for (int f = 0; f < 3; ++f) {
        auto g = rect_mask(8, 8, 0, f, 3, f + 3, 3, 1);
        auto p = rect_mask(8, 8, 0, f, 3, f + 3, 3, 6);
        gt.push_back(g);
        pred.push_back(p);
    }
    const auto r = jaccard_and_f(pred, gt, 1);
    CHECK(r.j_mean == 1.0);
    CHECK(r.f_mean == 1.0);
    CHECK(r.j_recall == 1.0);
    CHECK(r.objects == 1);
}

TEST_CASE("hungarian matches exhaustive search")
{
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 300; ++trial) {
        const int rows = 1 + static_cast<int>(rng() % 5), cols = 1 + static_cast<int>(rng() % 5);
        std::vector<double> c(static_cast<std::size_t>(rows * cols));
        for (auto& v : c)
            v = u(rng);
        const auto a = hungarian(c, rows, cols);
        double got = 0;
        for (int i = 0; i < rows; ++i)
            if (a[static_cast<std::size_t>(i)] >= 0)
                got += c[static_cast<std::size_t>(i * cols + a[static_cast<std::size_t>(i)])];
        CHECK(got == doctest::Approx(testing::brute_force_assignment(c, rows, cols)).epsilon(1e-12));
    }
}

TEST_CASE("track consistency examples")
{
    std::vector<PanopticMask> gt, stable, shuffled;
    std::mt19937_64 rng(6);
    for (int f = 0; f < 6; ++f) {
        PanopticMask g(8, 16, 5, 8);
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                g.classes[static_cast<std::size_t>(y * 16 + x + f)] = 3;
                g.instances[static_cast<std::size_t>(y * 16 + x + f)] = 1;
                g.classes[static_cast<std::size_t>((y + 4) * 16 + x + 8)] = 4;
                g.instances[static_cast<std::size_t>((y + 4) * 16 + x + 8)] = 2;
            }
        gt.push_back(g);
        auto p = g;
        for (auto& v : p.instances)
            v = v ? static_cast<std::uint16_t>(v + 4) : 0;
        stable.push_back(p);
        auto s = g;
        for (auto& v : s.instances)
            v = v ? static_cast<std::uint16_t>(1 + (v + f) % 8) : 0;
        shuffled.push_back(s);
    }
    CHECK(track_consistency(stable, gt).fraction() == 1.0);
    const auto tc = track_consistency(shuffled, gt);
    CHECK(tc.transitions == 10);
    CHECK(tc.consistent == 0);
    const PanopticMask one_p[] = {stable[0]}, one_g[] = {gt[0]};
    CHECK(track_consistency(one_p, one_g).fraction() == 1.0);
}

TEST_CASE("re-randomized ids sit near chance")
{
    // K = 200 ids redrawn every frame: expected consistency about 1/200
    std::mt19937_64 rng(7);
    std::vector<PanopticMask> gt, pred;
    for (int f = 0; f < 50; ++f) {
        PanopticMask g(8, 8, 5, 200);
        for (std::size_t i = 0; i < 16; ++i) {
            g.classes[i] = 3;
            g.instances[i] = 1;
        }
        gt.push_back(g);
        auto p = g;
        const auto id = static_cast<std::uint16_t>(1 + rng() % 200);
        for (std::size_t i = 0; i < 16; ++i)
            p.instances[i] = id;
        pred.push_back(p);
    }
    CHECK(track_consistency(pred, gt).fraction() < 0.1);
}

TEST_CASE("report rendering")
{
    Report r{{"cell", "PQ"}, {{"b=0.1", "0.5000"}, {"b=1.0", "0.1000"}}};
    CHECK(r.to_csv() == "cell,PQ\nb=0.1,0.5000\nb=1.0,0.1000\n");
    const auto t = r.to_table();
    CHECK(t.find("b=0.1  0.5000") != std::string::npos);
}
