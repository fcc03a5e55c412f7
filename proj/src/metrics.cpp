#include "bitseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace bitseg {

namespace {

void check_same_size(const PanopticMask& a, const PanopticMask& b, const char* what)
{
    if (a.height != b.height || a.width != b.width)
        throw std::invalid_argument(std::string(what) + ": prediction is " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                                    " but ground truth is " + std::to_string(b.height) + "x" + std::to_string(b.width));
}

std::uint64_t pair_key(SegmentKey a, SegmentKey b)
{
    return (static_cast<std::uint64_t>(a.first) << 48) | (static_cast<std::uint64_t>(a.second) << 32) |
           (static_cast<std::uint64_t>(b.first) << 16) | b.second;
}

} // namespace

SegmentMatch match_segments(const PanopticMask& pred, const PanopticMask& gt)
{
    check_same_size(pred, gt, "match_segments");
    const auto pred_area = segment_areas(pred);
    const auto gt_area = segment_areas(gt);
    std::map<std::uint64_t, std::size_t> inter;
    for (std::size_t i = 0; i < gt.pixels(); ++i) {
        if (gt.classes[i] == 0 || pred.classes[i] != gt.classes[i])
            continue;
        ++inter[pair_key({pred.classes[i], pred.instances[i]}, {gt.classes[i], gt.instances[i]})];
    }
    SegmentMatch out;
    std::set<SegmentKey> matched_pred, matched_gt;
    for (const auto& [key, n] : inter) {
        const SegmentKey p{static_cast<std::uint16_t>(key >> 48), static_cast<std::uint16_t>(key >> 32)};
        const SegmentKey g{static_cast<std::uint16_t>(key >> 16), static_cast<std::uint16_t>(key)};
        const double uni = static_cast<double>(pred_area.at(p) + gt_area.at(g) - n);
        const double iou = static_cast<double>(n) / uni;
        if (iou > 0.5) {
            out.pairs.push_back({g, p, iou});
            matched_pred.insert(p);
            matched_gt.insert(g);
        }
    }
    for (const auto& [k, a] : gt_area)
        if (!matched_gt.count(k))
            out.unmatched_gt.push_back(k);
    for (const auto& [k, a] : pred_area)
        if (!matched_pred.count(k))
            out.unmatched_pred.push_back(k);
    return out;
}

PanopticMask canonicalize_stuff(const PanopticMask& mask, const std::vector<bool>& thing)
{
    PanopticMask out = mask;
    for (std::size_t i = 0; i < out.pixels(); ++i) {
        const std::size_t c = out.classes[i];
        if (c >= thing.size() || !thing[c])
            out.instances[i] = 0;
    }
    return out;
}

double ClassStats::pq() const
{
    const double denom = static_cast<double>(tp) + 0.5 * static_cast<double>(fp) + 0.5 * static_cast<double>(fn);
    return denom > 0 ? iou_sum / denom : 0.0;
}

PQResult panoptic_quality(std::span<const PanopticMask> preds, std::span<const PanopticMask> gts, const std::vector<bool>& thing)
{
    if (preds.size() != gts.size())
        throw std::invalid_argument("panoptic_quality: " + std::to_string(preds.size()) + " predictions for " +
                                    std::to_string(gts.size()) + " ground-truth masks");
    if (preds.empty())
        throw std::invalid_argument("panoptic_quality: empty dataset");
    PQResult r;
    r.per_class.resize(thing.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto m = match_segments(canonicalize_stuff(preds[i], thing), canonicalize_stuff(gts[i], thing));
        auto stats = [&](SegmentKey k) -> ClassStats& {
            if (k.first >= r.per_class.size())
                throw std::invalid_argument("panoptic_quality: class " + std::to_string(k.first) + " has no thing/stuff metadata");
            return r.per_class[k.first];
        };
        for (const auto& p : m.pairs) {
            ++stats(p.gt).tp;
            stats(p.gt).iou_sum += p.iou;
        }
        for (const auto& k : m.unmatched_gt)
            ++stats(k).fn;
        for (const auto& k : m.unmatched_pred)
            ++stats(k).fp;
    }
    double all = 0, th = 0, st = 0;
    int n_all = 0, n_th = 0, n_st = 0;
    for (std::size_t c = 1; c < r.per_class.size(); ++c) {
        const auto& s = r.per_class[c];
        if (!s.defined())
            continue;
        all += s.pq();
        ++n_all;
        if (thing[c]) {
            th += s.pq();
            ++n_th;
        } else {
            st += s.pq();
            ++n_st;
        }
    }
    r.pq = n_all ? all / n_all : 0.0;
    r.pq_thing = n_th ? th / n_th : 0.0;
    r.pq_stuff = n_st ? st / n_st : 0.0;
    return r;
}

std::vector<std::uint8_t> object_mask(const PanopticMask& mask, std::uint16_t instance)
{
    std::vector<std::uint8_t> out(mask.pixels());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = mask.instances[i] == instance;
    return out;
}

double jaccard(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt)
{
    if (pred.size() != gt.size())
        throw std::invalid_argument("jaccard: mask sizes differ");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        inter += pred[i] && gt[i];
        uni += pred[i] || gt[i];
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::uint8_t> boundary_pixels(std::span<const std::uint8_t> mask, int height, int width)
{
    std::vector<std::uint8_t> out(mask.size());
    auto at = [&](int y, int x) { return mask[static_cast<std::size_t>(y * width + x)] != 0; };
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            if (!at(y, x))
                continue;
            const bool edge = (y > 0 && !at(y - 1, x)) || (y + 1 < height && !at(y + 1, x)) || (x > 0 && !at(y, x - 1)) ||
                              (x + 1 < width && !at(y, x + 1));
            out[static_cast<std::size_t>(y * width + x)] = edge;
        }
    return out;
}

namespace {

std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& m, int height, int width, int r)
{
    std::vector<std::pair<int, int>> disk;
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx)
            if (dx * dx + dy * dy <= r * r)
                disk.emplace_back(dy, dx);
    std::vector<std::uint8_t> out(m.size());
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            if (!m[static_cast<std::size_t>(y * width + x)])
                continue;
            for (auto [dy, dx] : disk) {
                const int yy = y + dy, xx = x + dx;
                if (yy >= 0 && yy < height && xx >= 0 && xx < width)
                    out[static_cast<std::size_t>(yy * width + xx)] = 1;
            }
        }
    return out;
}

} // namespace

double boundary_f(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, int height, int width, int radius)
{
    if (radius < 0)
        throw std::invalid_argument("boundary_f: radius must be >= 0");
    if (pred.size() != gt.size() || pred.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width))
        throw std::invalid_argument("boundary_f: mask sizes differ");
    const auto pb = boundary_pixels(pred, height, width);
    const auto gb = boundary_pixels(gt, height, width);
    const auto pd = dilate(pb, height, width, radius);
    const auto gd = dilate(gb, height, width, radius);
    std::size_t np = 0, ng = 0, hit_p = 0, hit_g = 0;
    for (std::size_t i = 0; i < pb.size(); ++i) {
        np += pb[i];
        ng += gb[i];
        hit_p += pb[i] && gd[i];
        hit_g += gb[i] && pd[i];
    }
    if (np == 0 && ng == 0)
        return 1.0;
    if (np == 0 || ng == 0)
        return 0.0;
    const double P = static_cast<double>(hit_p) / static_cast<double>(np);
    const double R = static_cast<double>(hit_g) / static_cast<double>(ng);
    return P + R > 0 ? 2 * P * R / (P + R) : 0.0;
}

int default_boundary_radius(int height, int width)
{
    return static_cast<int>(std::ceil(0.008 * std::hypot(static_cast<double>(height), static_cast<double>(width))));
}

std::vector<int> hungarian(const std::vector<double>& cost, int rows, int cols)
{
    if (cost.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols))
        throw std::invalid_argument("hungarian: cost size mismatch");
    const int n = std::max(rows, cols);
    if (n == 0)
        return {};
    // square padding with zero cost; classic O(n^3) potentials method
    auto a = [&](int i, int j) { return (i < rows && j < cols) ? cost[static_cast<std::size_t>(i * cols + j)] : 0.0; };
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n) + 1), v(static_cast<std::size_t>(n) + 1);
    std::vector<int> p(static_cast<std::size_t>(n) + 1), way(static_cast<std::size_t>(n) + 1);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
        std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const int i0 = p[static_cast<std::size_t>(j0)];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                const auto uj = static_cast<std::size_t>(j);
                if (used[uj])
                    continue;
                const double cur = a(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[uj];
                if (cur < minv[uj]) {
                    minv[uj] = cur;
                    way[uj] = j0;
                }
                if (minv[uj] < delta) {
                    delta = minv[uj];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                const auto uj = static_cast<std::size_t>(j);
                if (used[uj]) {
                    u[static_cast<std::size_t>(p[uj])] += delta;
                    v[uj] -= delta;
                } else {
                    minv[uj] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> assign(static_cast<std::size_t>(rows), -1);
    for (int j = 1; j <= n; ++j) {
        const int i = p[static_cast<std::size_t>(j)] - 1;
        if (i >= 0 && i < rows && j - 1 < cols)
            assign[static_cast<std::size_t>(i)] = j - 1;
    }
    return assign;
}

namespace {

std::vector<std::uint16_t> video_ids(std::span<const PanopticMask> masks)
{
    std::set<std::uint16_t> ids;
    for (const auto& m : masks)
        for (auto id : present_instance_ids(m))
            ids.insert(id);
    return {ids.begin(), ids.end()};
}

void check_video(std::span<const PanopticMask> pred, std::span<const PanopticMask> gt, const char* what)
{
    if (pred.size() != gt.size())
        throw std::invalid_argument(std::string(what) + ": " + std::to_string(pred.size()) + " predicted frames for " +
                                    std::to_string(gt.size()) + " ground-truth frames");
    for (std::size_t f = 0; f < gt.size(); ++f)
        check_same_size(pred[f], gt[f], what);
}

} // namespace

VideoJF jaccard_and_f(std::span<const PanopticMask> pred, std::span<const PanopticMask> gt, int radius)
{
    check_video(pred, gt, "jaccard_and_f");
    const auto gids = video_ids(gt);
    const auto pids = video_ids(pred);
    VideoJF r;
    if (gids.empty()) {
        const double s = pids.empty() ? 1.0 : 0.0;
        r = {s, s, s, s, 0};
        return r;
    }
    const std::size_t F = gt.size();
    const int G = static_cast<int>(gids.size()), P = static_cast<int>(pids.size());
    // per-frame J for every (gt, pred) pair
    std::vector<double> jpair(static_cast<std::size_t>(G * P) * F);
    std::vector<double> cost(static_cast<std::size_t>(G * P));
    for (std::size_t f = 0; f < F; ++f)
        for (int g = 0; g < G; ++g) {
            const auto gm = object_mask(gt[f], gids[static_cast<std::size_t>(g)]);
            for (int p = 0; p < P; ++p) {
                const auto pm = object_mask(pred[f], pids[static_cast<std::size_t>(p)]);
                const double j = jaccard(pm, gm);
                jpair[(static_cast<std::size_t>(g * P + p)) * F + f] = j;
                cost[static_cast<std::size_t>(g * P + p)] -= j / static_cast<double>(F);
            }
        }
    const auto assign = hungarian(cost, G, P);
    const int H = gt.front().height, W = gt.front().width;
    for (int g = 0; g < G; ++g) {
        const int p = assign[static_cast<std::size_t>(g)];
        double js = 0, jr = 0, fs = 0, fr = 0;
        for (std::size_t f = 0; f < F; ++f) {
            const auto gm = object_mask(gt[f], gids[static_cast<std::size_t>(g)]);
            std::vector<std::uint8_t> pm(gm.size());
            if (p >= 0)
                pm = object_mask(pred[f], pids[static_cast<std::size_t>(p)]);
            const double j = jaccard(pm, gm);
            const double fb = boundary_f(pm, gm, H, W, radius);
            js += j;
            jr += j > 0.5;
            fs += fb;
            fr += fb > 0.5;
        }
        const double n = static_cast<double>(F);
        r.j_mean += js / n;
        r.j_recall += jr / n;
        r.f_mean += fs / n;
        r.f_recall += fr / n;
    }
    r.objects = G;
    r.j_mean /= G;
    r.j_recall /= G;
    r.f_mean /= G;
    r.f_recall /= G;
    return r;
}

double jaccard_mean(std::span<const PanopticMask> pred, std::span<const PanopticMask> gt)
{
    return jaccard_and_f(pred, gt, 0).j_mean;
}

TrackCount track_consistency(std::span<const PanopticMask> pred, std::span<const PanopticMask> gt)
{
    check_video(pred, gt, "track_consistency");
    TrackCount tc;
    for (auto id : video_ids(gt)) {
        int prev = -2; // -2: object absent in previous frame, -1: present but unmatched
        for (std::size_t f = 0; f < gt.size(); ++f) {
            std::map<std::uint16_t, std::size_t> inter;
            std::size_t area = 0;
            for (std::size_t i = 0; i < gt[f].pixels(); ++i) {
                if (gt[f].instances[i] != id)
                    continue;
                ++area;
                if (pred[f].instances[i] != 0)
                    ++inter[pred[f].instances[i]];
            }
            if (area == 0) {
                prev = -2;
                continue;
            }
            int best = -1;
            double best_iou = 0;
            if (!inter.empty()) {
                std::map<std::uint16_t, std::size_t> parea;
                for (auto v : pred[f].instances)
                    if (inter.count(v))
                        ++parea[v];
                for (const auto& [pid, n] : inter) {
                    const double iou = static_cast<double>(n) / static_cast<double>(area + parea[pid] - n);
                    if (iou > best_iou) {
                        best_iou = iou;
                        best = pid;
                    }
                }
            }
            if (prev != -2) {
                ++tc.transitions;
                tc.consistent += best >= 0 && best == prev;
            }
            prev = best;
        }
    }
    return tc;
}

std::string Report::to_csv() const
{
    std::ostringstream s;
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i)
            s << (i ? "," : "") << cells[i];
        s << '\n';
    };
    line(columns);
    for (const auto& r : rows)
        line(r);
    return s.str();
}

std::string Report::to_table() const
{
    std::vector<std::size_t> w(columns.size());
    for (std::size_t i = 0; i < columns.size(); ++i)
        w[i] = columns[i].size();
    for (const auto& r : rows)
        for (std::size_t i = 0; i < r.size() && i < w.size(); ++i)
            w[i] = std::max(w[i], r[i].size());
    std::ostringstream s;
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size() && i < w.size(); ++i) {
            if (i)
                s << "  ";
            // first column left-aligned, numbers right-aligned
            if (i == 0)
                s << cells[i] << std::string(w[i] - cells[i].size(), ' ');
            else
                s << std::string(w[i] - cells[i].size(), ' ') << cells[i];
        }
        s << '\n';
    };
    line(columns);
    std::size_t total = 0;
    for (auto x : w)
        total += x;
    s << std::string(total + 2 * (w.empty() ? 0 : w.size() - 1), '-') << '\n';
    for (const auto& r : rows)
        line(r);
    return s.str();
}

std::string format_metric(double v, int decimals)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

} // namespace bitseg
