#pragma once

// Slow reference implementations for the metric tests.

#include "bitseg/metrics.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>

namespace bitseg::testing {

/// Random mask built from a few overlapping rectangles so that segments are
/// large enough for IoU > 0.5 matches to happen.
inline PanopticMask random_blocky_mask(int h, int w, int C, int K, std::mt19937_64& rng)
{
    PanopticMask m(h, w, C, K);
    std::uniform_int_distribution<int> cls(0, C - 1), id(0, K), ys(0, h - 1), xs(0, w - 1);
    const int n = 2 + static_cast<int>(rng() % 7);
    for (int i = 0; i < n; ++i) {
        int y0 = ys(rng), y1 = ys(rng), x0 = xs(rng), x1 = xs(rng);
        if (y0 > y1) std::swap(y0, y1);
        if (x0 > x1) std::swap(x0, x1);
        const auto c = static_cast<std::uint16_t>(cls(rng));
        const auto k = c == 0 ? std::uint16_t{0} : static_cast<std::uint16_t>(id(rng));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                m.classes[static_cast<std::size_t>(y * w + x)] = c;
                m.instances[static_cast<std::size_t>(y * w + x)] = k;
            }
    }
    return m;
}

/// Copy with a fraction of pixels relabelled at random.
inline PanopticMask perturb_mask(const PanopticMask& m, std::mt19937_64& rng, double frac)
{
    PanopticMask out = m;
    std::uniform_real_distribution<double> u(0, 1);
    std::uniform_int_distribution<int> cls(0, m.num_classes - 1), id(0, m.max_instances);
    for (std::size_t i = 0; i < out.pixels(); ++i)
        if (u(rng) < frac) {
            out.classes[i] = static_cast<std::uint16_t>(cls(rng));
            out.instances[i] = out.classes[i] == 0 ? 0 : static_cast<std::uint16_t>(id(rng));
        }
    return out;
}

/// All-pairs IoU enumeration; asserts each segment is in at most one pair.
inline SegmentMatch brute_force_match(const PanopticMask& pred, const PanopticMask& gt)
{
    std::set<SegmentKey> ps, gs;
    for (std::size_t i = 0; i < pred.pixels(); ++i) {
        if (pred.classes[i]) ps.insert({pred.classes[i], pred.instances[i]});
        if (gt.classes[i]) gs.insert({gt.classes[i], gt.instances[i]});
    }
    SegmentMatch out;
    std::set<SegmentKey> mp, mg;
    for (const auto& g : gs)
        for (const auto& p : ps) {
            if (p.first != g.first)
                continue;
            std::size_t inter = 0, uni = 0;
            for (std::size_t i = 0; i < gt.pixels(); ++i) {
                const bool in_p = pred.classes[i] == p.first && pred.instances[i] == p.second;
                const bool in_g = gt.classes[i] == g.first && gt.instances[i] == g.second;
                inter += in_p && in_g;
                uni += in_p || in_g;
            }
            const double iou = static_cast<double>(inter) / static_cast<double>(uni);
            if (iou > 0.5) {
                if (mp.count(p) || mg.count(g))
                    throw std::logic_error("IoU > 0.5 match is not unique");
                out.pairs.push_back({g, p, iou});
                mp.insert(p);
                mg.insert(g);
            }
        }
    for (const auto& g : gs)
        if (!mg.count(g)) out.unmatched_gt.push_back(g);
    for (const auto& p : ps)
        if (!mp.count(p)) out.unmatched_pred.push_back(p);
    return out;
}

inline bool same_match(SegmentMatch a, SegmentMatch b)
{
    auto key = [](const MatchedPair& m) { return std::make_pair(m.gt, m.pred); };
    auto by_key = [&](const MatchedPair& x, const MatchedPair& y) { return key(x) < key(y); };
    std::sort(a.pairs.begin(), a.pairs.end(), by_key);
    std::sort(b.pairs.begin(), b.pairs.end(), by_key);
    if (a.pairs.size() != b.pairs.size())
        return false;
    for (std::size_t i = 0; i < a.pairs.size(); ++i)
        if (key(a.pairs[i]) != key(b.pairs[i]) || std::abs(a.pairs[i].iou - b.pairs[i].iou) > 1e-12)
            return false;
    std::sort(a.unmatched_gt.begin(), a.unmatched_gt.end());
    std::sort(b.unmatched_gt.begin(), b.unmatched_gt.end());
    std::sort(a.unmatched_pred.begin(), a.unmatched_pred.end());
    std::sort(b.unmatched_pred.begin(), b.unmatched_pred.end());
    return a.unmatched_gt == b.unmatched_gt && a.unmatched_pred == b.unmatched_pred;
}

/// Minimum total cost over all partial injective row->column assignments
/// that assign min(rows, cols) rows.
inline double brute_force_assignment(const std::vector<double>& c, int rows, int cols)
{
    const bool transpose = rows > cols;
    const int r = transpose ? cols : rows, n = transpose ? rows : cols;
    auto at = [&](int i, int j) { return transpose ? c[static_cast<std::size_t>(j * cols + i)] : c[static_cast<std::size_t>(i * cols + j)]; };
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double s = 0;
        for (int i = 0; i < r; ++i)
            s += at(i, perm[static_cast<std::size_t>(i)]);
        best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

} // namespace bitseg::testing
